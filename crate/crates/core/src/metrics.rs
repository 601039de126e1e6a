//! Image quality metrics and evaluation reports.

use serde::{Deserialize, Serialize};

use crate::archive::ArchiveReader;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::image::RgbaImage;
use crate::renderer::{render_image, RenderParams};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

pub fn mse(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "image sizes differ: {} vs {} pixels",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / (3 * a.len()) as f64)
}

/// `10 log10(1 / MSE)` over all pixels and channels, capped at [`PSNR_CAP`].
pub fn psnr(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-0.5 * x * x / (SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter over valid positions only.
fn filter_valid(img: &[f64], width: usize, height: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (width - SSIM_WINDOW + 1, height - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * img[y * width + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Grayscale SSIM with an 11x11 Gaussian window (σ = 1.5), data range 1, averaged over
/// windows that fit entirely inside the image.
pub fn ssim(a: &[[f64; 3]], b: &[[f64; 3]], width: usize, height: usize) -> Result<f64> {
    if a.len() != width * height || b.len() != width * height {
        return Err(Error::InvalidArgument(format!(
            "pixel count does not match {width}x{height}"
        )));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "{width}x{height} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let k = gaussian_kernel();
    let x: Vec<f64> = a.iter().map(|&p| luma(p)).collect();
    let y: Vec<f64> = b.iter().map(|&p| luma(p)).collect();
    let product = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(&x, width, height, &k);
    let my = filter_valid(&y, width, height, &k);
    let mxx = filter_valid(&product(&x, &x), width, height, &k);
    let myy = filter_valid(&product(&y, &y), width, height, &k);
    let mxy = filter_valid(&product(&x, &y), width, height, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let vxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// RGB of an image composited over `background`.
pub fn composited(image: &RgbaImage, background: [f64; 3]) -> Vec<[f64; 3]> {
    image.composite(background)
}

/// Rendered RGB, which already includes the background seen through the field.
pub fn rendered_rgb(image: &RgbaImage) -> Vec<[f64; 3]> {
    image
        .pixels()
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub time_index: u32,
    pub camera_index: u32,
    pub psnr: f64,
    pub ssim: f64,
    /// Not computed; kept so reports line up with tables that carry the column.
    pub lpips: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: Vec<ImageMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_lpips: Option<f64>,
    /// Rendered frames per second over the whole evaluation.
    pub render_fps: f64,
}

impl EvalReport {
    pub fn new(images: Vec<ImageMetrics>, render_seconds: f64) -> Self {
        let n = images.len().max(1) as f64;
        let mean_psnr = images.iter().map(|m| m.psnr).sum::<f64>() / n;
        let mean_ssim = images.iter().map(|m| m.ssim).sum::<f64>() / n;
        let render_fps = if render_seconds > 0.0 {
            images.len() as f64 / render_seconds
        } else {
            0.0
        };
        Self {
            images,
            mean_psnr,
            mean_ssim,
            mean_lpips: None,
            render_fps,
        }
    }

    /// Mean PSNR and SSIM of one time index.
    pub fn per_time(&self, time_index: u32) -> Option<(f64, f64)> {
        let rows: Vec<_> = self.images.iter().filter(|m| m.time_index == time_index).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some((
            rows.iter().map(|m| m.psnr).sum::<f64>() / n,
            rows.iter().map(|m| m.ssim).sum::<f64>() / n,
        ))
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("time  camera     PSNR    SSIM  LPIPS\n");
        for m in &self.images {
            out += &format!(
                "{:>4}  {:>6}  {:>7.3}  {:>6.4}      -\n",
                m.time_index, m.camera_index, m.psnr, m.ssim
            );
        }
        out += &format!(
            "mean          {:>7.3}  {:>6.4}      -\n",
            self.mean_psnr, self.mean_ssim
        );
        out += &format!("render throughput: {:.2} frames/s\n", self.render_fps);
        out
    }
}

/// Renders every `(time, camera)` pair from the archive and scores it against the dataset's
/// ground truth composited over `params.background`.
pub fn evaluate(
    archive: &ArchiveReader,
    dataset: &Dataset,
    times: &[u32],
    cameras: &[u32],
    params: &RenderParams,
) -> Result<EvalReport> {
    if let Some(&t) = times.iter().find(|&&t| !archive.contains(t)) {
        return Err(Error::MissingTimestep(t));
    }
    let mut images = Vec::with_capacity(times.len() * cameras.len());
    let mut render_seconds = 0.0;
    for &t in times {
        let field = archive.read_timestep::<f32>(t)?;
        let truth = dataset.load_frame_set(t, cameras)?;
        for view in &truth.views {
            let camera = dataset.camera(t, view.camera_index)?;
            let start = std::time::Instant::now();
            let rendered = render_image(&field, &camera, params)?;
            render_seconds += start.elapsed().as_secs_f64();
            let pred = rendered_rgb(&rendered);
            let gt = composited(&view.image, params.background);
            let (w, h) = (camera.width as usize, camera.height as usize);
            images.push(ImageMetrics {
                time_index: t,
                camera_index: view.camera_index,
                psnr: psnr(&pred, &gt)?,
                ssim: ssim(&pred, &gt, w, h)?,
                lpips: None,
            });
            log::debug!(
                "eval t={t} cam={} psnr={:.3}",
                view.camera_index,
                images.last().map_or(0.0, |m| m.psnr)
            );
        }
    }
    Ok(EvalReport::new(images, render_seconds))
}

#[cfg(test)]
mod tests {
    use super::*;

    const W: usize = 19;
    const H: usize = 15;

    fn fixture(shift: bool) -> Vec<[f64; 3]> {
        let mut out = Vec::new();
        for y in 0..H {
            for x in 0..W {
                out.push(if shift {
                    [
                        ((3 * x + 5 * y + 2) % 17) as f64 / 16.0,
                        ((x * x + y) % 13) as f64 / 12.0 * 0.8 + 0.1,
                        ((x + 2 * y * y + 1) % 7) as f64 / 6.0,
                    ]
                } else {
                    [
                        ((3 * x + 5 * y) % 17) as f64 / 16.0,
                        ((x * x + y) % 13) as f64 / 12.0,
                        ((x + 2 * y * y) % 7) as f64 / 6.0,
                    ]
                });
            }
        }
        out
    }

    #[test]
    fn psnr_formula_and_cap() {
        let a = vec![[0.5; 3]; 4];
        let b = vec![[0.6; 3]; 4];
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!(psnr(&a, &b[..3]).is_err());
    }

    #[test]
    fn fixture_pair_matches_reference_oracles() {
        let (a, b) = (fixture(false), fixture(true));
        assert!((psnr(&a, &b).unwrap() - 10.34615412907075).abs() < 1e-9);
        assert!((ssim(&a, &b, W, H).unwrap() - 0.7689320836765259).abs() < 1e-6);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn ssim_identity_negative_and_crop() {
        let a = fixture(false);
        assert_eq!(ssim(&a, &a, W, H).unwrap(), 1.0);
        let neg: Vec<[f64; 3]> = a.iter().map(|p| p.map(|v| 1.0 - v)).collect();
        let s = ssim(&a, &neg, W, H).unwrap();
        assert!((s - -0.9496902559542864).abs() < 1e-6);
        let crop = |img: &[[f64; 3]]| -> Vec<[f64; 3]> {
            (2..H - 1)
                .flat_map(|y| (1..W - 3).map(move |x| img[y * W + x]))
                .collect()
        };
        let (ca, cb) = (crop(&a), crop(&fixture(true)));
        let s1 = ssim(&ca, &ca, W - 4, H - 3).unwrap();
        assert_eq!(s1, 1.0);
        assert!(ssim(&ca, &cb, W - 4, H - 3).unwrap() < 1.0);
        assert!(ssim(&a[..100], &a[..100], 10, 10).is_err());
    }

    #[test]
    fn psnr_falls_with_noise_amplitude() {
        use rand::{Rng, SeedableRng};
        let a = fixture(false);
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
            let noisy: Vec<[f64; 3]> = a
                .iter()
                .map(|p| p.map(|v| v + amp * rng.gen_range(-1.0..1.0)))
                .collect();
            let p = psnr(&a, &noisy).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn report_means_match_rows() {
        let rows = vec![
            ImageMetrics {
                time_index: 0,
                camera_index: 1,
                psnr: 20.0,
                ssim: 0.8,
                lpips: None,
            },
            ImageMetrics {
                time_index: 1,
                camera_index: 1,
                psnr: 30.0,
                ssim: 0.9,
                lpips: None,
            },
        ];
        let r = EvalReport::new(rows, 2.0);
        assert_eq!(r.mean_psnr, 25.0);
        assert!((r.mean_ssim - 0.85).abs() < 1e-15);
        assert_eq!(r.render_fps, 1.0);
        assert_eq!(r.per_time(1), Some((30.0, 0.9)));
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["mean_lpips"].is_null());
        assert!(r.to_table().contains("mean"));
    }
}
