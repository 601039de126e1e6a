//! Volume rendering along box-clipped rays.
//!
//! Each ray is cut into sub-intervals of length `δ_j`; sample `j` at the interval midpoint
//! contributes `w_j = T_j (1 - exp(-σ_j δ_j))` with `T_j = exp(-Σ_{k<j} σ_k δ_k)`, and
//! the leftover transmittance shows the background.
//!
//! [`RayBatch`] is the production path: it marches many rays at once in short segments so
//! that rays which become opaque stop early, keeps every activation, and backpropagates
//! exactly through the compositing. [`render_ray_reference`] is a straightforward
//! single-ray implementation over any [`RadianceField`], used for analytic fields and
//! for the first-order Riemann-sum verification mode.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::{sh_encode, SH_DIM};
use crate::error::{Error, Result};
use crate::field::{ColorBatch, DensityBatch, FieldSample, TimestepField};
use crate::geometry::{clip_ray_to_box, CameraModel, Ray, RayInterval, Vec3};
use crate::image::RgbaImage;
use crate::occupancy::OccupancyGrid;
use crate::scalar::Scalar;

/// Samples evaluated per ray before transmittance is re-checked.
pub const SEGMENT_SAMPLES: usize = 16;

/// Pixels rendered together by [`render_image`].
pub const TILE_PIXELS: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum Sampling {
    /// `samples` equal sub-intervals per clipped ray.
    FixedCount { samples: usize },
    /// Sub-intervals of length `step`; the last one is shortened to end at the exit point.
    FixedStep { step: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quadrature {
    /// `w_j = T_j (1 - exp(-σ_j δ_j))`
    AlphaComposite,
    /// `w_j = T_j σ_j δ_j`, first-order in `δ`; reference renderer only.
    Riemann,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    pub sampling: Sampling,
    /// Marching stops once transmittance falls below this; 0 disables early stopping.
    pub early_stop_transmittance: f64,
    pub background: [f64; 3],
    pub quadrature: Quadrature,
    /// Samples whose compositing weight is below this are not shaded (their color counts
    /// as zero). 0 shades every sample.
    #[serde(default)]
    pub color_skip_weight: f64,
}

impl RenderParams {
    pub fn inference(samples: usize, background: [f64; 3]) -> Self {
        Self {
            sampling: Sampling::FixedCount { samples },
            early_stop_transmittance: 1e-4,
            background,
            quadrature: Quadrature::AlphaComposite,
            color_skip_weight: 0.0,
        }
    }

    /// Exact compositing with no early stopping, as used for gradient checks.
    pub fn exact(samples: usize, background: [f64; 3]) -> Self {
        Self {
            early_stop_transmittance: 0.0,
            ..Self::inference(samples, background)
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.sampling {
            Sampling::FixedCount { samples } if samples < 1 => {
                return Err(Error::Config("at least one sample per ray is required".into()))
            }
            Sampling::FixedStep { step } if !(step > 0.0) => {
                return Err(Error::Config(format!("step {step} must be positive")))
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.early_stop_transmittance) {
            return Err(Error::Config(format!(
                "early-stop transmittance {} not in [0, 1)",
                self.early_stop_transmittance
            )));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config(format!(
                "background {:?} outside [0, 1]",
                self.background
            )));
        }
        if !(self.color_skip_weight >= 0.0) {
            return Err(Error::Config("color skip weight must be non-negative".into()));
        }
        Ok(())
    }

    /// Number of sub-intervals for a clipped interval of the given length.
    pub fn sample_count(&self, length: f64) -> usize {
        match self.sampling {
            Sampling::FixedCount { samples } => samples,
            Sampling::FixedStep { step } => ((length / step).ceil() as usize).max(1),
        }
    }

    /// With preview quality the sample count is halved.
    pub fn with_samples(&self, samples: usize) -> Self {
        Self {
            sampling: Sampling::FixedCount { samples },
            ..self.clone()
        }
    }
}

/// Sample midpoints and sub-interval lengths along `[t_in, t_out]`.
pub fn place_samples<S: Scalar>(
    interval: &RayInterval<S>,
    sampling: Sampling,
    mut jitter: Option<&mut ChaCha8Rng>,
    ts: &mut Vec<S>,
    deltas: &mut Vec<S>,
) {
    let length = interval.length();
    if !(length > S::zero()) {
        return;
    }
    match sampling {
        Sampling::FixedCount { samples } => {
            let delta = length / S::lit(samples as f64);
            for j in 0..samples {
                let u = match jitter.as_deref_mut() {
                    Some(rng) => S::lit(rng.gen::<f64>()),
                    None => S::lit(0.5),
                };
                ts.push(interval.t_in + (S::lit(j as f64) + u) * delta);
                deltas.push(delta);
            }
        }
        Sampling::FixedStep { step } => {
            let step = S::lit(step);
            let n = (length / step).ceil().to_usize().unwrap_or(1).max(1);
            for j in 0..n {
                let a = interval.t_in + S::lit(j as f64) * step;
                let b = (a + step).min(interval.t_out);
                let u = match jitter.as_deref_mut() {
                    Some(rng) => S::lit(rng.gen::<f64>()),
                    None => S::lit(0.5),
                };
                ts.push(a + (b - a) * u);
                deltas.push(b - a);
            }
        }
    }
}

/// A field that can be queried at arbitrary points, for the reference renderer.
pub trait RadianceField<S: Scalar> {
    fn half_extent(&self) -> f64;
    fn query(&self, points: &[Vec3<S>], dir: Vec3<S>) -> Result<Vec<FieldSample<S>>>;
}

impl<S: Scalar> RadianceField<S> for TimestepField<S> {
    fn half_extent(&self) -> f64 {
        TimestepField::half_extent(self)
    }

    fn query(&self, points: &[Vec3<S>], dir: Vec3<S>) -> Result<Vec<FieldSample<S>>> {
        let mut density = DensityBatch::default();
        self.density_forward(points, &mut density)?;
        let rows: Vec<u32> = (0..points.len() as u32).collect();
        let sh = sh_encode(dir);
        let sh_rows: Vec<S> = rows.iter().flat_map(|_| sh).collect();
        let mut color = ColorBatch::default();
        self.color_forward(&density, &rows, &sh_rows, &mut color)?;
        Ok((0..points.len())
            .map(|i| FieldSample {
                sigma: density.sigma[i],
                rgb: [color.rgb[3 * i], color.rgb[3 * i + 1], color.rgb[3 * i + 2]],
            })
            .collect())
    }
}

/// Per-sample record of one reference-rendered ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleRecord<S> {
    pub t: S,
    pub delta: S,
    pub sigma: S,
    pub rgb: [S; 3],
    pub weight: S,
    /// Transmittance after this sample.
    pub transmittance: S,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RayResult<S> {
    pub color: [S; 3],
    pub opacity: S,
    pub transmittance: S,
    pub samples: Vec<SampleRecord<S>>,
}

/// Composites precomputed samples; stops after the first sample that drops transmittance
/// below `early_stop`.
pub fn composite<S: Scalar>(
    sigmas: &[S],
    deltas: &[S],
    rgbs: &[[S; 3]],
    background: [S; 3],
    early_stop: S,
    quadrature: Quadrature,
) -> ([S; 3], S, Vec<(S, S)>) {
    let mut color = [S::zero(); 3];
    let mut trans = S::one();
    let mut optical = S::zero();
    let mut weights = Vec::with_capacity(sigmas.len());
    for ((&sigma, &delta), rgb) in sigmas.iter().zip(deltas).zip(rgbs) {
        let s = sigma * delta;
        let (w, next) = match quadrature {
            Quadrature::AlphaComposite => {
                let next = trans * (-s).exp();
                (trans * (S::one() - (-s).exp()), next)
            }
            Quadrature::Riemann => {
                optical = optical + s;
                (trans * s, (-optical).exp())
            }
        };
        for c in 0..3 {
            color[c] = color[c] + w * rgb[c];
        }
        weights.push((w, next));
        trans = next;
        if trans < early_stop {
            break;
        }
    }
    for c in 0..3 {
        color[c] = color[c] + trans * background[c];
    }
    (color, trans, weights)
}

/// Exact gradient of alpha compositing with respect to each used sample's density and
/// color. `weights[j] = (w_j, T_{j+1})`.
pub fn composite_backward<S: Scalar>(
    deltas: &[S],
    rgbs: &[[S; 3]],
    weights: &[(S, S)],
    background: [S; 3],
    d_color: [S; 3],
    d_sigma: &mut [S],
    d_rgb: &mut [[S; 3]],
) {
    let used = weights.len();
    let t_final = weights.last().map(|w| w.1).unwrap_or(S::one());
    let tail_bg: S = (0..3).map(|c| d_color[c] * t_final * background[c]).sum();
    // suffix = dC · Σ_{k>j} w_k c_k
    let mut suffix = S::zero();
    for j in (0..used).rev() {
        let (w, t_next) = weights[j];
        let c = rgbs[j];
        let dc_dot_c: S = (0..3).map(|k| d_color[k] * c[k]).sum();
        d_rgb[j] = [d_color[0] * w, d_color[1] * w, d_color[2] * w];
        d_sigma[j] = deltas[j] * (t_next * dc_dot_c - suffix - tail_bg);
        suffix = suffix + w * dc_dot_c;
    }
}

/// Renders one ray by querying `field` at every sample (no segmenting, no color skipping).
pub fn render_ray_reference<S: Scalar, F: RadianceField<S>>(
    field: &F,
    ray: &Ray<S>,
    params: &RenderParams,
) -> Result<RayResult<S>> {
    params.validate()?;
    let background = params.background.map(S::lit);
    let Some(interval) = clip_ray_to_box(ray, S::lit(field.half_extent())) else {
        return Ok(RayResult {
            color: background,
            opacity: S::zero(),
            transmittance: S::one(),
            samples: Vec::new(),
        });
    };
    let mut ts = Vec::new();
    let mut deltas = Vec::new();
    place_samples(&interval, params.sampling, None, &mut ts, &mut deltas);
    let points: Vec<Vec3<S>> = ts.iter().map(|&t| ray.at(t)).collect();
    let samples = field.query(&points, ray.dir)?;
    if let Some(j) = samples
        .iter()
        .position(|s| !s.sigma.is_finite() || s.rgb.iter().any(|c| !c.is_finite()))
    {
        return Err(Error::NonFinite {
            location: format!("sample {j}"),
        });
    }
    let sigmas: Vec<S> = samples.iter().map(|s| s.sigma).collect();
    let rgbs: Vec<[S; 3]> = samples.iter().map(|s| s.rgb).collect();
    let (color, trans, weights) = composite(
        &sigmas,
        &deltas,
        &rgbs,
        background,
        S::lit(params.early_stop_transmittance),
        params.quadrature,
    );
    let records = weights
        .iter()
        .enumerate()
        .map(|(j, &(weight, transmittance))| SampleRecord {
            t: ts[j],
            delta: deltas[j],
            sigma: sigmas[j],
            rgb: rgbs[j],
            weight,
            transmittance,
        })
        .collect();
    Ok(RayResult {
        color,
        opacity: S::one() - trans,
        transmittance: trans,
        samples: records,
    })
}

struct Segment<S> {
    density: DensityBatch<S>,
    color: ColorBatch<S>,
    /// Global sample index of each density row.
    sample_of_row: Vec<u32>,
    /// Global sample index of each color row.
    sample_of_color: Vec<u32>,
}

/// Forward state of a batch of rays, kept for the backward pass.
pub struct RayBatch<S> {
    pub colors: Vec<[S; 3]>,
    pub transmittance: Vec<S>,
    background: [S; 3],
    starts: Vec<usize>,
    used: Vec<usize>,
    deltas: Vec<S>,
    weights: Vec<(S, S)>,
    rgbs: Vec<[S; 3]>,
    segments: Vec<Segment<S>>,
}

impl<S: Scalar> RayBatch<S> {
    /// Renders `rays` through `field`. `jitter` enables stratified sample offsets.
    pub fn render(
        field: &TimestepField<S>,
        rays: &[Ray<S>],
        params: &RenderParams,
        jitter: Option<&mut ChaCha8Rng>,
    ) -> Result<Self> {
        Self::render_with(field, rays, params, jitter, None)
    }

    /// Like [`RayBatch::render`], but samples in cells that `occupancy` marks empty are
    /// not evaluated and count as zero density.
    pub fn render_with(
        field: &TimestepField<S>,
        rays: &[Ray<S>],
        params: &RenderParams,
        jitter: Option<&mut ChaCha8Rng>,
        occupancy: Option<&OccupancyGrid>,
    ) -> Result<Self> {
        params.validate()?;
        if params.quadrature != Quadrature::AlphaComposite {
            return Err(Error::Config(
                "batched rendering supports alpha compositing only".into(),
            ));
        }
        let half = S::lit(field.half_extent());
        let background = params.background.map(S::lit);
        let early_stop = S::lit(params.early_stop_transmittance);
        let skip = S::lit(params.color_skip_weight);

        let mut ts = Vec::new();
        let mut deltas = Vec::new();
        let mut starts = Vec::with_capacity(rays.len() + 1);
        let mut jitter = jitter;
        for ray in rays {
            starts.push(ts.len());
            if let Some(iv) = clip_ray_to_box(ray, half) {
                place_samples(&iv, params.sampling, jitter.as_deref_mut(), &mut ts, &mut deltas);
            }
        }
        starts.push(ts.len());
        let total = ts.len();
        let mut weights = vec![(S::zero(), S::one()); total];
        let mut rgbs = vec![[S::zero(); 3]; total];
        let mut used = vec![0usize; rays.len()];
        let mut trans = vec![S::one(); rays.len()];
        let mut next = vec![0usize; rays.len()];
        let sh: Vec<[S; SH_DIM]> = rays.iter().map(|r| sh_encode(r.dir)).collect();

        let mut active: Vec<usize> = (0..rays.len()).filter(|&r| starts[r + 1] > starts[r]).collect();
        let mut seg_end = vec![0usize; rays.len()];
        let mut segments = Vec::new();
        let mut points = Vec::new();
        while !active.is_empty() {
            points.clear();
            let mut seg = Segment {
                density: DensityBatch::default(),
                color: ColorBatch::default(),
                sample_of_row: Vec::new(),
                sample_of_color: Vec::new(),
            };
            for &r in &active {
                let len = starts[r + 1] - starts[r];
                let mut j = next[r];
                let mut taken = 0;
                while j < len && taken < SEGMENT_SAMPLES {
                    let s = starts[r] + j;
                    let p = rays[r].at(ts[s]);
                    if occupancy.is_none_or(|o| o.is_occupied(p)) {
                        points.push(p);
                        seg.sample_of_row.push(s as u32);
                        taken += 1;
                    }
                    j += 1;
                }
                seg_end[r] = j;
            }
            if let Err(e) = field.density_forward(&points, &mut seg.density) {
                return Err(locate_non_finite(e, &seg.density.sigma, &seg.sample_of_row, &starts));
            }

            let mut color_rows = Vec::new();
            let mut sh_rows: Vec<S> = Vec::new();
            let mut row = 0usize;
            let rows = seg.sample_of_row.len();
            let mut still_active = Vec::with_capacity(active.len());
            for &r in &active {
                let len = starts[r + 1] - starts[r];
                let mut stopped = false;
                for j in next[r]..seg_end[r] {
                    let s = starts[r] + j;
                    used[r] = j + 1;
                    if row == rows || seg.sample_of_row[row] as usize != s {
                        // skipped as empty space: no attenuation, no color
                        weights[s] = (S::zero(), trans[r]);
                        continue;
                    }
                    let sigma = seg.density.sigma[row];
                    let decay = (-(sigma * deltas[s])).exp();
                    let t_now = trans[r];
                    let w = t_now * (S::one() - decay);
                    let t_next = t_now * decay;
                    weights[s] = (w, t_next);
                    trans[r] = t_next;
                    if w >= skip {
                        color_rows.push(row as u32);
                        sh_rows.extend_from_slice(&sh[r]);
                        seg.sample_of_color.push(s as u32);
                    }
                    row += 1;
                    if t_next < early_stop {
                        stopped = true;
                        break;
                    }
                }
                while row < rows && (seg.sample_of_row[row] as usize) < starts[r + 1] {
                    row += 1;
                }
                next[r] = seg_end[r];
                if !stopped && next[r] < len {
                    still_active.push(r);
                }
            }
            field.color_forward(&seg.density, &color_rows, &sh_rows, &mut seg.color)?;
            for (k, &s) in seg.sample_of_color.iter().enumerate() {
                rgbs[s as usize] = [seg.color.rgb[3 * k], seg.color.rgb[3 * k + 1], seg.color.rgb[3 * k + 2]];
            }
            segments.push(seg);
            active = still_active;
        }

        let colors = (0..rays.len())
            .map(|r| {
                let mut c = [S::zero(); 3];
                for s in starts[r]..starts[r] + used[r] {
                    let w = weights[s].0;
                    for k in 0..3 {
                        c[k] = c[k] + w * rgbs[s][k];
                    }
                }
                for k in 0..3 {
                    c[k] = c[k] + trans[r] * background[k];
                }
                c
            })
            .collect();
        Ok(Self {
            colors,
            transmittance: trans,
            background,
            starts,
            used,
            deltas,
            weights,
            rgbs,
            segments,
        })
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn opacity(&self, ray: usize) -> S {
        S::one() - self.transmittance[ray]
    }

    /// Number of samples composited for `ray` (fewer than placed when it stopped early).
    pub fn used_samples(&self, ray: usize) -> usize {
        self.used[ray]
    }

    /// Compositing weight `w_j` and transmittance after it for each used sample of `ray`.
    pub fn sample_weights(&self, ray: usize) -> &[(S, S)] {
        &self.weights[self.starts[ray]..self.starts[ray] + self.used[ray]]
    }

    pub fn sample_colors(&self, ray: usize) -> &[[S; 3]] {
        &self.rgbs[self.starts[ray]..self.starts[ray] + self.used[ray]]
    }

    /// Total density rows evaluated (including those past an early stop).
    pub fn evaluated_samples(&self) -> usize {
        self.segments.iter().map(|s| s.sample_of_row.len()).sum()
    }

    pub fn shaded_samples(&self) -> usize {
        self.segments.iter().map(|s| s.sample_of_color.len()).sum()
    }

    /// Accumulates `dL/dθ` given `dL/dcolor` for every ray.
    pub fn backward(&self, field: &TimestepField<S>, d_colors: &[[S; 3]], grads: &mut [S]) {
        assert_eq!(d_colors.len(), self.len());
        assert_eq!(grads.len(), field.parameter_count());
        let total = self.deltas.len();
        let mut d_sigma = vec![S::zero(); total];
        let mut d_rgb = vec![[S::zero(); 3]; total];
        for (r, &dc) in d_colors.iter().enumerate() {
            let range = self.starts[r]..self.starts[r] + self.used[r];
            composite_backward(
                &self.deltas[range.clone()],
                &self.rgbs[range.clone()],
                &self.weights[range.clone()],
                self.background,
                dc,
                &mut d_sigma[range.clone()],
                &mut d_rgb[range],
            );
        }
        let dout = field.config().density_out();
        let mut scratch = Vec::new();
        let mut d_out = Vec::new();
        let mut rows_sigma = Vec::new();
        let mut rows_rgb = Vec::new();
        for seg in &self.segments {
            d_out.clear();
            d_out.resize(seg.sample_of_row.len() * dout, S::zero());
            rows_rgb.clear();
            rows_rgb.extend(seg.sample_of_color.iter().flat_map(|&s| d_rgb[s as usize]));
            field.color_backward(&seg.color, &rows_rgb, grads, &mut d_out, &mut scratch);
            rows_sigma.clear();
            rows_sigma.extend(seg.sample_of_row.iter().map(|&s| d_sigma[s as usize]));
            field.density_backward(&seg.density, &rows_sigma, &mut d_out, grads, &mut scratch);
        }
    }
}

fn locate_non_finite<S: Scalar>(err: Error, sigma: &[S], sample_of_row: &[u32], starts: &[usize]) -> Error {
    let Error::NonFinite { location } = err else {
        return err;
    };
    match sigma.iter().position(|s| !s.is_finite()) {
        Some(row) => {
            let s = sample_of_row[row] as usize;
            let ray = starts.partition_point(|&st| st <= s) - 1;
            Error::NonFinite {
                location: format!("{location} (ray {ray}, sample {})", s - starts[ray]),
            }
        }
        None => Error::NonFinite { location },
    }
}

/// Renders one ray through the batched path.
pub fn render_ray<S: Scalar>(field: &TimestepField<S>, ray: &Ray<S>, params: &RenderParams) -> Result<RayBatch<S>> {
    RayBatch::render(field, std::slice::from_ref(ray), params, None)
}

/// Renders every pixel of `camera`; alpha holds the accumulated opacity.
pub fn render_image<S: Scalar>(
    field: &TimestepField<S>,
    camera: &CameraModel,
    params: &RenderParams,
) -> Result<RgbaImage> {
    camera.validate()?;
    params.validate()?;
    let (w, h) = (camera.width as usize, camera.height as usize);
    let n = w * h;
    let tiles: Vec<(usize, usize)> = (0..n)
        .step_by(TILE_PIXELS)
        .map(|s| (s, (s + TILE_PIXELS).min(n)))
        .collect();
    let rendered: Vec<Result<Vec<f32>>> = tiles
        .par_iter()
        .map(|&(a, b)| {
            let rays: Vec<Ray<S>> = (a..b)
                .map(|i| {
                    let ray = camera.generate_ray((i % w) as u32, (i / w) as u32)?;
                    Ok(ray.cast())
                })
                .collect::<Result<_>>()?;
            let batch = RayBatch::render(field, &rays, params, None)?;
            let mut out = Vec::with_capacity(rays.len() * 4);
            for (r, c) in batch.colors.iter().enumerate() {
                out.extend(c.iter().map(|v| v.as_f64().clamp(0.0, 1.0) as f32));
                out.push(batch.opacity(r).as_f64().clamp(0.0, 1.0) as f32);
            }
            Ok(out)
        })
        .collect();
    let mut data = Vec::with_capacity(n * 4);
    for tile in rendered {
        data.extend(tile?);
    }
    RgbaImage::from_data(camera.width, camera.height, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{GridConfig, TableLayout};
    use crate::field::FieldConfig;
    use crate::geometry::look_at_zup;
    use rand::SeedableRng;

    struct Uniform {
        sigma: f64,
        rgb: [f64; 3],
    }

    impl RadianceField<f64> for Uniform {
        fn half_extent(&self) -> f64 {
            2.0
        }
        fn query(&self, points: &[Vec3<f64>], _dir: Vec3<f64>) -> Result<Vec<FieldSample<f64>>> {
            Ok(points
                .iter()
                .map(|_| FieldSample {
                    sigma: self.sigma,
                    rgb: self.rgb,
                })
                .collect())
        }
    }

    fn down_ray() -> Ray<f64> {
        Ray::new(Vec3::new(0.0, 0.0, 5.0), Vec3::new(0.0, 0.0, -1.0))
    }

    #[test]
    fn empty_space_shows_background() {
        let f = Uniform {
            sigma: 0.0,
            rgb: [1.0, 0.0, 0.0],
        };
        let p = RenderParams::exact(32, [0.2, 0.3, 0.4]);
        let r = render_ray_reference(&f, &down_ray(), &p).unwrap();
        assert_eq!(r.color, [0.2, 0.3, 0.4]);
        assert_eq!(r.opacity, 0.0);
        assert_eq!(r.transmittance, 1.0);
    }

    #[test]
    fn opaque_front_sample_dominates() {
        // 4 world units / 4 samples: σδ = 40 on the first sample
        let f = Uniform {
            sigma: 40.0,
            rgb: [0.1, 0.8, 0.3],
        };
        let p = RenderParams::exact(4, [1.0, 1.0, 1.0]);
        let r = render_ray_reference(&f, &down_ray(), &p).unwrap();
        for c in 0..3 {
            assert!((r.color[c] - f.rgb[c]).abs() < 1e-12);
        }
        assert!((r.opacity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_sample_hand_composite() {
        let sig = [std::f64::consts::LN_2, 1e9];
        let del = [1.0, 1.0];
        let rgb = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let (c, t, w) = composite(&sig, &del, &rgb, [0.0; 3], 0.0, Quadrature::AlphaComposite);
        assert!((c[0] - 0.5).abs() < 1e-12 && (c[1] - 0.5).abs() < 1e-12 && c[2] == 0.0);
        assert!((w[0].0 - 0.5).abs() < 1e-12 && (w[1].0 - 0.5).abs() < 1e-12);
        assert!(t < 1e-12);
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = 8;
            let sig: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
            let del: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.3)).collect();
            let rgb: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
            let bg = [rng.gen(), rng.gen(), rng.gen()];
            let dc = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let loss = |sig: &[f64], rgb: &[[f64; 3]]| {
                let (c, _, _) = composite(sig, &del, rgb, bg, 0.0, Quadrature::AlphaComposite);
                (0..3).map(|k| c[k] * dc[k]).sum::<f64>()
            };
            let (_, _, w) = composite(&sig, &del, &rgb, bg, 0.0, Quadrature::AlphaComposite);
            let mut ds = vec![0.0; n];
            let mut dr = vec![[0.0; 3]; n];
            composite_backward(&del, &rgb, &w, bg, dc, &mut ds, &mut dr);
            let h = 1e-6;
            for j in 0..n {
                let mut s2 = sig.clone();
                s2[j] += h;
                let up = loss(&s2, &rgb);
                s2[j] -= 2.0 * h;
                let down = loss(&s2, &rgb);
                let fd = (up - down) / (2.0 * h);
                assert!(
                    (ds[j] - fd).abs() <= 1e-6 * fd.abs().max(1e-3),
                    "sigma {j}: {} vs {fd}",
                    ds[j]
                );
                for k in 0..3 {
                    let mut r2 = rgb.clone();
                    r2[j][k] += h;
                    let up = loss(&sig, &r2);
                    r2[j][k] -= 2.0 * h;
                    let down = loss(&sig, &r2);
                    let fd = (up - down) / (2.0 * h);
                    assert!((dr[j][k] - fd).abs() <= 1e-6 * fd.abs().max(1e-3));
                }
            }
        }
    }

    #[test]
    fn weights_and_residual_transmittance_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let n = rng.gen_range(1..64);
            let sig: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..50.0)).collect();
            let del: Vec<f64> = (0..n).map(|_| rng.gen_range(0.001..0.2)).collect();
            let rgb = vec![[0.5; 3]; n];
            let (_, t, w) = composite(&sig, &del, &rgb, [0.0; 3], 0.0, Quadrature::AlphaComposite);
            let total: f64 = w.iter().map(|x| x.0).sum::<f64>() + t;
            assert!((total - 1.0).abs() < 1e-5);
            assert!(w.windows(2).all(|p| p[1].1 <= p[0].1));
        }
    }

    fn tiny_field(seed: u64) -> TimestepField<f64> {
        let cfg = FieldConfig::with_grid(GridConfig {
            levels: 2,
            channels: 2,
            table_size: 1 << 9,
            r_min: 3.0,
            r_max_factor: 2.0,
            half_extent: 2.0,
            layout: TableLayout::PerLevel,
        });
        let mut f = TimestepField::<f64>::init(cfg, 0, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let table = f.layout().table.clone();
        for (i, p) in f.params_mut().iter_mut().enumerate() {
            *p = if table.contains(&i) {
                rng.gen_range(-1.0..1.0)
            } else {
                *p * 2.0
            };
        }
        f
    }

    fn random_rays(rng: &mut ChaCha8Rng, n: usize) -> Vec<Ray<f64>> {
        (0..n)
            .map(|_| {
                let o = Vec3::new(
                    rng.gen_range(-4.0..4.0),
                    rng.gen_range(-4.0..4.0),
                    rng.gen_range(2.5..4.0),
                );
                let target = Vec3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                Ray::new(o, target - o)
            })
            .collect()
    }

    #[test]
    fn batched_path_matches_reference_renderer() {
        let f = tiny_field(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rays = random_rays(&mut rng, 40);
        for params in [
            RenderParams::exact(37, [1.0, 1.0, 1.0]),
            RenderParams::inference(64, [0.0, 0.5, 1.0]),
        ] {
            let batch = RayBatch::render(&f, &rays, &params, None).unwrap();
            for (r, ray) in rays.iter().enumerate() {
                let reference = render_ray_reference(&f, ray, &params).unwrap();
                for c in 0..3 {
                    assert!((batch.colors[r][c] - reference.color[c]).abs() < 1e-9);
                }
                assert_eq!(batch.used_samples(r), reference.samples.len());
            }
        }
    }

    #[test]
    fn batched_backward_matches_finite_differences() {
        let mut f = tiny_field(4);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rays = random_rays(&mut rng, 3);
        let params = RenderParams::exact(8, [1.0, 1.0, 1.0]);
        let dc: Vec<[f64; 3]> = (0..rays.len())
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let loss = |f: &TimestepField<f64>| {
            let b = RayBatch::render(f, &rays, &params, None).unwrap();
            b.colors
                .iter()
                .zip(&dc)
                .map(|(c, d)| (0..3).map(|k| c[k] * d[k]).sum::<f64>())
                .sum::<f64>()
        };
        let batch = RayBatch::render(&f, &rays, &params, None).unwrap();
        let mut g = vec![0.0; f.parameter_count()];
        batch.backward(&f, &dc, &mut g);
        let nz: Vec<usize> = (0..g.len()).filter(|&i| g[i].abs() > 1e-9).collect();
        assert!(nz.len() > 50);
        let h = 1e-5;
        for _ in 0..64 {
            let i = nz[rng.gen_range(0..nz.len())];
            let keep = f.params()[i];
            f.params_mut()[i] = keep + h;
            let up = loss(&f);
            f.params_mut()[i] = keep - h;
            let down = loss(&f);
            f.params_mut()[i] = keep;
            let fd = (up - down) / (2.0 * h);
            assert!((g[i] - fd).abs() / fd.abs().max(1e-8) < 1e-5, "{i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn early_stop_truncates_gradient_consistently() {
        // with early stopping on, gradients are those of the truncated sum
        let mut f = tiny_field(8);
        let d1 = f.layout().density[1].clone();
        f.params_mut()[d1.bias().start] = 3.0;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rays = random_rays(&mut rng, 2);
        let params = RenderParams {
            early_stop_transmittance: 0.05,
            ..RenderParams::exact(64, [1.0, 1.0, 1.0])
        };
        let batch = RayBatch::render(&f, &rays, &params, None).unwrap();
        assert!(batch.used_samples(0) < 64);
        let dc = vec![[1.0, -0.5, 0.25]; 2];
        let mut g = vec![0.0; f.parameter_count()];
        batch.backward(&f, &dc, &mut g);
        let loss = |f: &TimestepField<f64>, used: &[usize]| {
            let b = RayBatch::render(f, &rays, &params, None).unwrap();
            assert_eq!(&b.used, used, "perturbation changed the stop point");
            b.colors
                .iter()
                .zip(&dc)
                .map(|(c, d)| (0..3).map(|k| c[k] * d[k]).sum::<f64>())
                .sum::<f64>()
        };
        let nz: Vec<usize> = (0..g.len()).filter(|&i| g[i].abs() > 1e-9).collect();
        let h = 1e-6;
        for _ in 0..32 {
            let i = nz[rng.gen_range(0..nz.len())];
            let keep = f.params()[i];
            f.params_mut()[i] = keep + h;
            let up = loss(&f, &batch.used);
            f.params_mut()[i] = keep - h;
            let down = loss(&f, &batch.used);
            f.params_mut()[i] = keep;
            let fd = (up - down) / (2.0 * h);
            assert!((g[i] - fd).abs() / fd.abs().max(1e-8) < 1e-4);
        }
    }

    #[test]
    fn zero_density_field_renders_background_and_is_deterministic() {
        let mut f = tiny_field(2);
        let d1 = f.layout().density[1].clone();
        for p in &mut f.params_mut()[d1.range()] {
            *p = 0.0;
        }
        f.params_mut()[d1.bias().start] = -40.0; // clamps to exp(-15)
        let pose = look_at_zup(Vec3::new(0.0, -5.0, 3.0), Vec3::new(0.0, 0.0, 0.0)).unwrap();
        let cam = CameraModel::from_fov_x(24, 16, 0.9, pose).unwrap();
        let params = RenderParams::inference(32, [1.0, 1.0, 1.0]);
        let img = render_image(&f, &cam, &params).unwrap();
        for px in img.pixels() {
            for c in 0..3 {
                assert!((px[c] - 1.0).abs() < 1e-5);
            }
            assert!(px[3] < 1e-5);
        }
        let again = render_image(&f, &cam, &params).unwrap();
        assert_eq!(img, again);
    }

    #[test]
    fn single_ray_backward_on_empty_space_has_no_color_gradient() {
        let mut f = tiny_field(3);
        let d1 = f.layout().density[1].clone();
        f.params_mut()[d1.bias().start] = -40.0;
        for p in &mut f.params_mut()[d1.weights()] {
            *p = 0.0;
        }
        let ray = down_ray();
        let params = RenderParams::exact(16, [1.0, 1.0, 1.0]);
        let b = render_ray(&f, &ray, &params).unwrap();
        // weights are ~exp(-15) δ, so color gradients vanish to that order
        let mut g = vec![0.0; f.parameter_count()];
        b.backward(&f, &[[1.0, 1.0, 1.0]], &mut g);
        let out = f.layout().color.last().unwrap();
        assert!(g[out.range()].iter().all(|v| v.abs() < 1e-5));
    }

    #[test]
    fn fixed_step_sampling_partitions_interval() {
        let iv = RayInterval { t_in: 1.0, t_out: 2.05 };
        let mut ts = Vec::new();
        let mut ds = Vec::new();
        place_samples(&iv, Sampling::FixedStep { step: 0.1 }, None, &mut ts, &mut ds);
        assert_eq!(ts.len(), 11);
        assert!((ds.iter().sum::<f64>() - 1.05).abs() < 1e-12);
        assert!((ds[10] - 0.05).abs() < 1e-12);
        assert!((ts[10] - 2.025).abs() < 1e-12);
    }
}
