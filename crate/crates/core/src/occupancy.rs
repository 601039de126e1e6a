//! Coarse occupancy grid used to skip empty space while training.
//!
//! The box is divided into `resolution³` cells. Every few iterations the field's density
//! is evaluated at one random point per cell and folded into a decaying running maximum;
//! cells whose value would block less than `opacity_threshold` of the light over one
//! sample spacing are marked empty and their samples are not evaluated.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::field::{DensityBatch, TimestepField};
use crate::geometry::Vec3;
use crate::scalar::Scalar;

const UPDATE_CHUNK: usize = 8192;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancyConfig {
    pub resolution: usize,
    /// Iterations between grid refreshes.
    pub update_every: usize,
    /// Skipping starts at this iteration; before it every sample is evaluated.
    pub warmup: usize,
    /// Per-refresh decay of the running maximum.
    pub decay: f64,
    pub opacity_threshold: f64,
}

impl Default for OccupancyConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            update_every: 16,
            warmup: 256,
            decay: 0.6,
            opacity_threshold: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OccupancyGrid {
    resolution: usize,
    half_extent: f64,
    decay: f32,
    sigma_threshold: f32,
    density: Vec<f32>,
    occupied: Vec<bool>,
}

impl OccupancyGrid {
    /// All cells start occupied. `step` is the typical sample spacing.
    pub fn new(config: &OccupancyConfig, half_extent: f64, step: f64) -> Self {
        let n = config.resolution.pow(3);
        let sigma_threshold = -(1.0 - config.opacity_threshold).ln() / step;
        Self {
            resolution: config.resolution,
            half_extent,
            decay: config.decay as f32,
            sigma_threshold: sigma_threshold as f32,
            density: vec![f32::NAN; n],
            occupied: vec![true; n],
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn sigma_threshold(&self) -> f64 {
        self.sigma_threshold as f64
    }

    #[inline]
    fn cell<S: Scalar>(&self, p: Vec3<S>) -> usize {
        let r = self.resolution;
        let mut idx = [0usize; 3];
        for (k, out) in idx.iter_mut().enumerate() {
            let u = (p.get(k).as_f64() + self.half_extent) / (2.0 * self.half_extent);
            *out = ((u * r as f64).floor().max(0.0) as usize).min(r - 1);
        }
        idx[0] + r * (idx[1] + r * idx[2])
    }

    #[inline]
    pub fn is_occupied<S: Scalar>(&self, p: Vec3<S>) -> bool {
        self.occupied[self.cell(p)]
    }

    pub fn occupied_fraction(&self) -> f64 {
        self.occupied.iter().filter(|&&o| o).count() as f64 / self.occupied.len() as f64
    }

    /// Re-evaluates the field at one random point in every cell.
    pub fn update<S: Scalar>(&mut self, field: &TimestepField<S>, rng: &mut ChaCha8Rng) -> Result<()> {
        let r = self.resolution;
        let cell = 2.0 * self.half_extent / r as f64;
        let mut points = Vec::with_capacity(UPDATE_CHUNK);
        let mut batch = DensityBatch::default();
        let total = r * r * r;
        let mut first = 0;
        while first < total {
            let last = (first + UPDATE_CHUNK).min(total);
            points.clear();
            for i in first..last {
                let (x, y, z) = (i % r, (i / r) % r, i / (r * r));
                let corner = |c: usize| -self.half_extent + c as f64 * cell;
                points.push(Vec3::new(
                    S::lit(corner(x) + rng.gen::<f64>() * cell),
                    S::lit(corner(y) + rng.gen::<f64>() * cell),
                    S::lit(corner(z) + rng.gen::<f64>() * cell),
                ));
            }
            field.density_forward(&points, &mut batch)?;
            for (k, i) in (first..last).enumerate() {
                let sigma = batch.sigma[k].as_f64() as f32;
                let old = self.density[i];
                let ema = if old.is_nan() {
                    sigma
                } else {
                    (old * self.decay).max(sigma)
                };
                self.density[i] = ema;
                self.occupied[i] = ema > self.sigma_threshold;
            }
            first = last;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{GridConfig, TableLayout};
    use crate::field::FieldConfig;
    use rand::SeedableRng;

    #[test]
    fn low_density_cells_are_released() {
        let cfg = FieldConfig::with_grid(GridConfig {
            levels: 2,
            channels: 2,
            table_size: 1 << 8,
            r_min: 2.0,
            r_max_factor: 2.0,
            half_extent: 2.0,
            layout: TableLayout::PerLevel,
        });
        let mut field = TimestepField::<f32>::init(cfg, 0, 1).unwrap();
        let occ_cfg = OccupancyConfig {
            resolution: 8,
            ..Default::default()
        };
        let mut grid = OccupancyGrid::new(&occ_cfg, 2.0, 4.0 / 64.0);
        assert_eq!(grid.occupied_fraction(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // a freshly initialized field has density ~1, well above the threshold
        grid.update(&field, &mut rng).unwrap();
        assert_eq!(grid.occupied_fraction(), 1.0);
        let out = field.layout().density[1].clone();
        for p in &mut field.params_mut()[out.range()] {
            *p = 0.0;
        }
        field.params_mut()[out.bias().start] = -15.0;
        for _ in 0..20 {
            grid.update(&field, &mut rng).unwrap();
        }
        assert_eq!(grid.occupied_fraction(), 0.0);
        assert!(!grid.is_occupied(Vec3::new(0.1f32, -1.9, 1.99)));
    }
}
