//! The per-timestep radiance function: hash-grid encoding, density MLP and color MLP,
//! with batched forward and hand-written backward passes.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoding::{sh_encode, GridConfig, HashGrid, TableLayout, SH_DIM};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::scalar::{linear_backward, linear_forward, Scalar};

/// Raw density is clamped to this magnitude before exponentiation.
pub const DENSITY_CLAMP: f64 = 15.0;

/// Half-width of the uniform hash-table initialization.
pub const TABLE_INIT_RANGE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityActivation {
    /// `exp(clamp(raw, -15, 15))`
    Exp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub grid: GridConfig,
    pub density_hidden: usize,
    /// Geometric feature width passed from the density to the color network.
    pub feature_dim: usize,
    pub color_hidden: usize,
    /// Number of hidden layers in the color network.
    pub color_depth: usize,
    pub dir_dim: usize,
    pub density_activation: DensityActivation,
}

impl FieldConfig {
    /// Architecture of the published model around the given grid.
    pub fn with_grid(grid: GridConfig) -> Self {
        Self {
            grid,
            density_hidden: 64,
            feature_dim: 15,
            color_hidden: 64,
            color_depth: 2,
            dir_dim: SH_DIM,
            density_activation: DensityActivation::Exp,
        }
    }

    /// 16 levels, 2 channels, one shared table of 2^22 slots, resolutions 16 to 4096.
    pub fn paper() -> Self {
        Self::with_grid(GridConfig {
            levels: 16,
            channels: 2,
            table_size: 1 << 22,
            r_min: 16.0,
            r_max_factor: 2048.0,
            half_extent: 2.0,
            layout: TableLayout::Shared,
        })
    }

    pub fn density_out(&self) -> usize {
        1 + self.feature_dim
    }

    pub fn color_in(&self) -> usize {
        self.dir_dim + self.feature_dim
    }

    pub fn half_extent(&self) -> f64 {
        self.grid.half_extent
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.dir_dim != SH_DIM {
            return Err(Error::Config(format!(
                "direction encoding must have {SH_DIM} components"
            )));
        }
        if self.density_hidden == 0 || self.color_hidden == 0 || self.color_depth == 0 {
            return Err(Error::Config("MLP widths and depth must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self)
    }
}

/// Total number of learnable scalars for `config`.
pub fn parameter_count(config: &FieldConfig) -> usize {
    ParamLayout::new(config).total
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: &'static str,
    pub fan_in: usize,
    pub fan_out: usize,
    /// Weights `[fan_in x fan_out]` row-major, immediately followed by `fan_out` biases.
    pub offset: usize,
}

impl LayerSpec {
    pub fn weights(&self) -> Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    pub fn bias(&self) -> Range<usize> {
        let w = self.weights().end;
        w..w + self.fan_out
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.bias().end
    }

    pub fn len(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Canonical ordering of every learnable scalar: hash table first, then each layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayout {
    pub table: Range<usize>,
    pub density: Vec<LayerSpec>,
    pub color: Vec<LayerSpec>,
    pub total: usize,
}

impl ParamLayout {
    fn new(cfg: &FieldConfig) -> Self {
        let table = 0..cfg.grid.table_scalars();
        let mut offset = table.end;
        let mut layer = |name, fan_in, fan_out| {
            let spec = LayerSpec {
                name,
                fan_in,
                fan_out,
                offset,
            };
            offset += spec.len();
            spec
        };
        let density = vec![
            layer("density.0", cfg.grid.feature_dim(), cfg.density_hidden),
            layer("density.1", cfg.density_hidden, cfg.density_out()),
        ];
        let mut color = vec![layer("color.0", cfg.color_in(), cfg.color_hidden)];
        for _ in 1..cfg.color_depth {
            color.push(layer("color.hidden", cfg.color_hidden, cfg.color_hidden));
        }
        color.push(layer("color.out", cfg.color_hidden, 3));
        Self {
            table,
            density,
            color,
            total: offset,
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.density.iter().chain(&self.color)
    }

    pub fn mlp(&self) -> Range<usize> {
        self.table.end..self.total
    }

    /// Parameter groups for diagnostics: `("table", range)` then one entry per layer.
    pub fn groups(&self) -> Vec<(&'static str, Range<usize>)> {
        std::iter::once(("table", self.table.clone()))
            .chain(self.layers().map(|l| (l.name, l.range())))
            .collect()
    }
}

/// Density and color at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample<S> {
    pub sigma: S,
    pub rgb: [S; 3],
}

/// The learned radiance field of one time step.
#[derive(Clone, Debug)]
pub struct TimestepField<S> {
    pub time_index: u32,
    pub scene_scale: f64,
    config: FieldConfig,
    layout: ParamLayout,
    grid: HashGrid,
    params: Vec<S>,
}

impl<S: Scalar> TimestepField<S> {
    /// Hash table `U(-1e-4, 1e-4)`, Xavier-uniform weights, zero biases.
    pub fn init(config: FieldConfig, time_index: u32, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(layout.total);
        params.extend((0..layout.table.len()).map(|_| S::lit(rng.gen_range(-TABLE_INIT_RANGE..TABLE_INIT_RANGE))));
        for layer in layout.layers() {
            let bound = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            params.extend((0..layer.fan_in * layer.fan_out).map(|_| S::lit(rng.gen_range(-bound..bound))));
            params.extend(std::iter::repeat_n(S::zero(), layer.fan_out));
        }
        debug_assert_eq!(params.len(), layout.total);
        Self::from_params(config, time_index, 1.0, params)
    }

    pub fn from_params(config: FieldConfig, time_index: u32, scene_scale: f64, params: Vec<S>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if params.len() != layout.total {
            return Err(Error::LayoutMismatch {
                expected: layout.total,
                actual: params.len(),
            });
        }
        let grid = HashGrid::new(config.grid.clone())?;
        Ok(Self {
            time_index,
            scene_scale,
            config,
            layout,
            grid,
            params,
        })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn grid(&self) -> &HashGrid {
        &self.grid
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [S] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<S> {
        self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn half_extent(&self) -> f64 {
        self.config.grid.half_extent
    }

    pub fn cast<T: Scalar>(&self) -> TimestepField<T> {
        TimestepField {
            time_index: self.time_index,
            scene_scale: self.scene_scale,
            config: self.config.clone(),
            layout: self.layout.clone(),
            grid: self.grid.clone(),
            params: self.params.iter().map(|v| T::lit(v.as_f64())).collect(),
        }
    }

    /// Encodes and runs the density network for every point.
    pub fn density_forward(&self, points: &[Vec3<S>], batch: &mut DensityBatch<S>) -> Result<()> {
        let n = points.len();
        let enc_dim = self.grid.feature_dim();
        let [d0, d1] = [&self.layout.density[0], &self.layout.density[1]];
        batch.resize(n, enc_dim, d0.fan_out, d1.fan_out);
        batch.points.clear();
        batch.points.extend_from_slice(points);
        let table = &self.params[self.layout.table.clone()];
        for (p, row) in points.iter().zip(batch.encoded.chunks_exact_mut(enc_dim)) {
            self.grid.encode(table, *p, row);
        }
        linear_forward(
            &batch.encoded,
            n,
            d0.fan_in,
            d0.fan_out,
            &self.params[d0.weights()],
            &self.params[d0.bias()],
            &mut batch.hidden,
        );
        relu(&mut batch.hidden);
        linear_forward(
            &batch.hidden,
            n,
            d1.fan_in,
            d1.fan_out,
            &self.params[d1.weights()],
            &self.params[d1.bias()],
            &mut batch.out,
        );
        let lim = S::lit(DENSITY_CLAMP);
        for (i, row) in batch.out.chunks_exact(d1.fan_out).enumerate() {
            let raw = row[0];
            batch.sigma[i] = raw.max(-lim).min(lim).exp();
        }
        if batch.sigma.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                location: first_non_finite(&[
                    ("encoding", &batch.encoded),
                    (d0.name, &batch.hidden),
                    (d1.name, &batch.out),
                ])
                .unwrap_or("density activation")
                .to_string(),
            });
        }
        Ok(())
    }

    /// Runs the color network on the density rows listed in `rows`; `sh` holds their
    /// direction encodings (`rows.len() x 16`).
    pub fn color_forward(
        &self,
        density: &DensityBatch<S>,
        rows: &[u32],
        sh: &[S],
        batch: &mut ColorBatch<S>,
    ) -> Result<()> {
        let m = rows.len();
        let fd = self.config.feature_dim;
        let dir = self.config.dir_dim;
        let cin = self.config.color_in();
        let dout = self.config.density_out();
        debug_assert_eq!(sh.len(), m * dir);
        batch.rows.clear();
        batch.rows.extend_from_slice(rows);
        batch.input.resize(m * cin, S::zero());
        for (k, &r) in rows.iter().enumerate() {
            let dst = &mut batch.input[k * cin..(k + 1) * cin];
            dst[..dir].copy_from_slice(&sh[k * dir..(k + 1) * dir]);
            let src = &density.out[r as usize * dout + 1..(r as usize + 1) * dout];
            dst[dir..dir + fd].copy_from_slice(src);
        }
        let layers = &self.layout.color;
        batch.activations.resize_with(layers.len(), Vec::new);
        for (li, layer) in layers.iter().enumerate() {
            let (done, rest) = batch.activations.split_at_mut(li);
            let input: &[S] = if li == 0 { &batch.input } else { &done[li - 1] };
            let out = &mut rest[0];
            out.resize(m * layer.fan_out, S::zero());
            linear_forward(
                input,
                m,
                layer.fan_in,
                layer.fan_out,
                &self.params[layer.weights()],
                &self.params[layer.bias()],
                out,
            );
            if li + 1 < layers.len() {
                relu(out);
            }
        }
        let logits = batch.activations.last().expect("color network has layers");
        batch.rgb.clear();
        batch.rgb.extend(logits.iter().map(|&z| sigmoid(z)));
        if batch.rgb.iter().any(|v| !v.is_finite()) {
            let mut named: Vec<(&str, &[S])> = vec![("color input", &batch.input)];
            named.extend(
                layers
                    .iter()
                    .zip(&batch.activations)
                    .map(|(l, a)| (l.name, a.as_slice())),
            );
            return Err(Error::NonFinite {
                location: first_non_finite(&named).unwrap_or("color activation").to_string(),
            });
        }
        Ok(())
    }

    /// Backpropagates `d_rgb` (`rows x 3`) through the color network, accumulating weight
    /// gradients into `grads` and feature gradients into `d_density_out`.
    pub fn color_backward(
        &self,
        batch: &ColorBatch<S>,
        d_rgb: &[S],
        grads: &mut [S],
        d_density_out: &mut [S],
        scratch: &mut Vec<Vec<S>>,
    ) {
        let m = batch.rows.len();
        if m == 0 {
            return;
        }
        let layers = &self.layout.color;
        let depth = layers.len();
        scratch.resize_with(2, Vec::new);
        let (cur, next) = scratch.split_at_mut(1);
        let (cur, next) = (&mut cur[0], &mut next[0]);
        // sigmoid'
        cur.clear();
        cur.extend(batch.rgb.iter().zip(d_rgb).map(|(&y, &g)| g * y * (S::one() - y)));
        for li in (0..depth).rev() {
            let layer = &layers[li];
            let input: &[S] = if li == 0 {
                &batch.input
            } else {
                &batch.activations[li - 1]
            };
            let (gw, gb) = grads[layer.range()].split_at_mut(layer.fan_in * layer.fan_out);
            next.resize(m * layer.fan_in, S::zero());
            linear_backward(
                input,
                cur,
                m,
                layer.fan_in,
                layer.fan_out,
                &self.params[layer.weights()],
                gw,
                gb,
                Some(next),
            );
            if li > 0 {
                // ReLU' from the stored post-activation
                for (g, &a) in next.iter_mut().zip(input) {
                    if a <= S::zero() {
                        *g = S::zero();
                    }
                }
            }
            std::mem::swap(cur, next);
        }
        let cin = self.config.color_in();
        let dir = self.config.dir_dim;
        let fd = self.config.feature_dim;
        let dout = self.config.density_out();
        for (k, &r) in batch.rows.iter().enumerate() {
            let src = &cur[k * cin + dir..k * cin + dir + fd];
            let dst = &mut d_density_out[r as usize * dout + 1..(r as usize + 1) * dout];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        }
    }

    /// Backpropagates `d_sigma` plus the feature gradients already in `d_density_out`
    /// through the density network and into the hash table gradient.
    pub fn density_backward(
        &self,
        batch: &DensityBatch<S>,
        d_sigma: &[S],
        d_density_out: &mut [S],
        grads: &mut [S],
        scratch: &mut Vec<Vec<S>>,
    ) {
        let n = batch.len();
        if n == 0 {
            return;
        }
        let [d0, d1] = [&self.layout.density[0], &self.layout.density[1]];
        let dout = d1.fan_out;
        let lim = S::lit(DENSITY_CLAMP);
        for i in 0..n {
            let raw = batch.out[i * dout];
            let g = if raw > -lim && raw < lim {
                d_sigma[i] * batch.sigma[i]
            } else {
                S::zero()
            };
            d_density_out[i * dout] = d_density_out[i * dout] + g;
        }
        scratch.resize_with(2, Vec::new);
        let (a, b) = scratch.split_at_mut(1);
        let (d_hidden, d_enc) = (&mut a[0], &mut b[0]);
        d_hidden.resize(n * d1.fan_in, S::zero());
        {
            let (gw, gb) = grads[d1.range()].split_at_mut(d1.fan_in * d1.fan_out);
            linear_backward(
                &batch.hidden,
                d_density_out,
                n,
                d1.fan_in,
                d1.fan_out,
                &self.params[d1.weights()],
                gw,
                gb,
                Some(d_hidden),
            );
        }
        for (g, &h) in d_hidden.iter_mut().zip(&batch.hidden) {
            if h <= S::zero() {
                *g = S::zero();
            }
        }
        d_enc.resize(n * d0.fan_in, S::zero());
        {
            let (gw, gb) = grads[d0.range()].split_at_mut(d0.fan_in * d0.fan_out);
            linear_backward(
                &batch.encoded,
                d_hidden,
                n,
                d0.fan_in,
                d0.fan_out,
                &self.params[d0.weights()],
                gw,
                gb,
                Some(d_enc),
            );
        }
        let table_grad = &mut grads[self.layout.table.clone()];
        for (p, up) in batch.points.iter().zip(d_enc.chunks_exact(d0.fan_in)) {
            self.grid.backward_into(*p, up, table_grad);
        }
    }

    /// Evaluates the field at one point, returning the sample and the activations needed
    /// by [`TimestepField::field_backward`].
    pub fn field_forward(&self, x: Vec3<S>, d: Vec3<S>) -> Result<(FieldSample<S>, FieldCache<S>)> {
        let mut density = DensityBatch::default();
        self.density_forward(&[x], &mut density)?;
        let sh = sh_encode(d);
        let mut color = ColorBatch::default();
        self.color_forward(&density, &[0], &sh, &mut color)?;
        let sample = FieldSample {
            sigma: density.sigma[0],
            rgb: [color.rgb[0], color.rgb[1], color.rgb[2]],
        };
        Ok((sample, FieldCache { density, color }))
    }

    /// Accumulates `dL/dθ` for one cached evaluation into `grads`.
    pub fn field_backward(&self, cache: &FieldCache<S>, d_sigma: S, d_rgb: [S; 3], grads: &mut [S]) {
        assert_eq!(grads.len(), self.params.len());
        let mut d_out = vec![S::zero(); self.config.density_out()];
        let mut scratch = Vec::new();
        self.color_backward(&cache.color, &d_rgb, grads, &mut d_out, &mut scratch);
        self.density_backward(&cache.density, &[d_sigma], &mut d_out, grads, &mut scratch);
    }
}

/// Activations of one single-point evaluation.
#[derive(Clone, Debug, Default)]
pub struct FieldCache<S> {
    pub density: DensityBatch<S>,
    pub color: ColorBatch<S>,
}

/// Cached activations of a batched density pass.
#[derive(Clone, Debug, Default)]
pub struct DensityBatch<S> {
    pub points: Vec<Vec3<S>>,
    pub encoded: Vec<S>,
    /// Post-ReLU hidden layer.
    pub hidden: Vec<S>,
    /// Raw output: density logit followed by the geometric feature.
    pub out: Vec<S>,
    pub sigma: Vec<S>,
}

impl<S: Scalar> DensityBatch<S> {
    fn resize(&mut self, n: usize, enc: usize, hidden: usize, out: usize) {
        self.encoded.resize(n * enc, S::zero());
        self.hidden.resize(n * hidden, S::zero());
        self.out.resize(n * out, S::zero());
        self.sigma.resize(n, S::zero());
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    pub fn raw_density(&self, row: usize) -> S {
        let w = self.out.len() / self.sigma.len().max(1);
        self.out[row * w]
    }
}

/// Cached activations of a batched color pass.
#[derive(Clone, Debug, Default)]
pub struct ColorBatch<S> {
    /// Density rows the color rows were computed for.
    pub rows: Vec<u32>,
    pub input: Vec<S>,
    /// Post-ReLU hidden layers followed by the output logits.
    pub activations: Vec<Vec<S>>,
    pub rgb: Vec<S>,
}

#[inline]
fn relu<S: Scalar>(v: &mut [S]) {
    for x in v {
        if *x < S::zero() {
            *x = S::zero();
        }
    }
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(z: S) -> S {
    S::one() / (S::one() + (-z).exp())
}

fn first_non_finite<'a, S: Scalar>(named: &[(&'a str, &[S])]) -> Option<&'a str> {
    named
        .iter()
        .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
        .map(|(n, _)| *n)
}
