//! Multi-resolution hash-grid position encoding and spherical-harmonics direction encoding.

use std::sync::Once;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::scalar::Scalar;

const PRIME_Y: u32 = 2_654_435_761;
const PRIME_Z: u32 = 805_459_861;

/// How the `levels` grids share table storage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TableLayout {
    /// Every level owns a slice of `table_size` entries.
    PerLevel,
    /// All levels index one table of `table_size` entries.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub levels: usize,
    pub channels: usize,
    pub table_size: usize,
    pub r_min: f64,
    /// Finest resolution is `r_max_factor * half_extent`.
    pub r_max_factor: f64,
    pub half_extent: f64,
    pub layout: TableLayout,
}

impl GridConfig {
    pub fn r_max(&self) -> f64 {
        self.r_max_factor * self.half_extent
    }

    pub fn feature_dim(&self) -> usize {
        self.levels * self.channels
    }

    /// Number of table slots (each holding `channels` scalars).
    pub fn table_entries(&self) -> usize {
        match self.layout {
            TableLayout::PerLevel => self.levels * self.table_size,
            TableLayout::Shared => self.table_size,
        }
    }

    pub fn table_scalars(&self) -> usize {
        self.table_entries() * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels < 1 {
            return bad("grid needs at least one level".into());
        }
        if self.channels < 1 {
            return bad("grid needs at least one channel".into());
        }
        if !self.table_size.is_power_of_two() || self.table_size > 1 << 31 {
            return bad(format!("table size {} is not a power of two <= 2^31", self.table_size));
        }
        if !(self.half_extent > 0.0) {
            return bad(format!("half extent {} must be positive", self.half_extent));
        }
        if !(self.r_min >= 1.0) {
            return bad(format!("base resolution {} must be >= 1", self.r_min));
        }
        if !(self.r_max() >= self.r_min) {
            return bad(format!("finest resolution {} below base {}", self.r_max(), self.r_min));
        }
        Ok(())
    }

    /// Per-level growth factor `(r_max / r_min)^(1 / (L - 1))`.
    pub fn growth_factor(&self) -> f64 {
        if self.levels == 1 {
            1.0
        } else {
            (self.r_max() / self.r_min).powf(1.0 / (self.levels - 1) as f64)
        }
    }
}

/// Real-valued level resolutions `r_min * alpha^l`.
pub fn grid_levels(cfg: &GridConfig) -> Vec<f64> {
    let alpha = cfg.growth_factor();
    (0..cfg.levels).map(|l| cfg.r_min * alpha.powi(l as i32)).collect()
}

/// Integer lattice resolution for a real level resolution (floor, forgiving rounding noise).
pub fn integer_resolution(r: f64) -> u32 {
    let near = r.round();
    if (r - near).abs() < 1e-6 * r.max(1.0) {
        near as u32
    } else {
        r.floor() as u32
    }
}

/// Slot of lattice corner `v` within one level's table of `table_size` slots.
///
/// Levels whose `(R + 1)³` corners fit are indexed densely in row-major order, the rest
/// through the xor-of-primes spatial hash.
#[inline]
pub fn lattice_index(resolution: u32, v: [u32; 3], table_size: usize) -> usize {
    let side = resolution as u64 + 1;
    if side * side * side <= table_size as u64 {
        (v[0] as u64 + side * (v[1] as u64 + side * v[2] as u64)) as usize
    } else {
        hash_index(v, table_size)
    }
}

#[inline]
fn hash_index(v: [u32; 3], table_size: usize) -> usize {
    let h = v[0] ^ v[1].wrapping_mul(PRIME_Y) ^ v[2].wrapping_mul(PRIME_Z);
    (h as usize) & (table_size - 1)
}

#[derive(Clone, Copy, Debug)]
struct Level {
    resolution: u32,
    dense: bool,
    /// First slot of this level in the table (per-level layout) or rotation (shared).
    base: usize,
}

/// Precomputed level geometry for a [`GridConfig`].
#[derive(Clone, Debug)]
pub struct HashGrid {
    config: GridConfig,
    levels: Vec<Level>,
}

/// The eight corners and trilinear weights of one level lookup.
struct Corners<S> {
    slots: [usize; 8],
    weights: [S; 8],
}

impl HashGrid {
    pub fn new(config: GridConfig) -> Result<Self> {
        config.validate()?;
        let t = config.table_size;
        let stride = match config.layout {
            TableLayout::PerLevel => t,
            TableLayout::Shared => (t / config.levels).max(1),
        };
        let levels = grid_levels(&config)
            .into_iter()
            .enumerate()
            .map(|(l, r)| {
                let resolution = integer_resolution(r).max(1);
                let side = resolution as u64 + 1;
                Level {
                    resolution,
                    dense: side * side * side <= t as u64,
                    base: l * stride,
                }
            })
            .collect();
        Ok(Self { config, levels })
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn resolutions(&self) -> Vec<u32> {
        self.levels.iter().map(|l| l.resolution).collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    /// Whether level `l` uses collision-free dense indexing.
    pub fn is_dense(&self, l: usize) -> bool {
        self.levels[l].dense
    }

    /// Maps a box point to `[0, 1]³`, clamping points that stray outside.
    #[inline]
    fn normalize<S: Scalar>(&self, x: Vec3<S>) -> [S; 3] {
        let b = S::lit(self.config.half_extent);
        let two_b = b + b;
        let mut u = [S::zero(); 3];
        for (axis, out) in u.iter_mut().enumerate() {
            let c = x.get(axis);
            debug_assert!(
                c.abs() <= b * S::lit(1.0 + 1e-4),
                "position {c} outside box of half extent {b}"
            );
            *out = ((c + b) / two_b).max(S::zero()).min(S::one());
        }
        u
    }

    #[inline]
    fn corners<S: Scalar>(&self, level: &Level, u: &[S; 3]) -> Corners<S> {
        let r = level.resolution;
        let rs = S::lit(r as f64);
        let mut base = [0u32; 3];
        let mut frac = [S::zero(); 3];
        for k in 0..3 {
            let p = u[k] * rs;
            let cell = p.floor().to_u32().unwrap_or(0).min(r - 1);
            base[k] = cell;
            frac[k] = p - S::lit(cell as f64);
        }
        let t = self.config.table_size;
        let mut slots = [0usize; 8];
        let mut weights = [S::zero(); 8];
        for c in 0..8 {
            let mut v = base;
            let mut w = S::one();
            for k in 0..3 {
                if c >> k & 1 == 1 {
                    v[k] += 1;
                    w = w * frac[k];
                } else {
                    w = w * (S::one() - frac[k]);
                }
            }
            let idx = if level.dense {
                let side = (r + 1) as usize;
                v[0] as usize + side * (v[1] as usize + side * v[2] as usize)
            } else {
                hash_index(v, t)
            };
            slots[c] = match self.config.layout {
                TableLayout::PerLevel => level.base + idx,
                TableLayout::Shared => (idx + level.base) & (t - 1),
            };
            weights[c] = w;
        }
        Corners { slots, weights }
    }

    /// Writes the `levels * channels` feature vector of `x` into `out`.
    pub fn encode<S: Scalar>(&self, table: &[S], x: Vec3<S>, out: &mut [S]) {
        let ch = self.config.channels;
        debug_assert_eq!(table.len(), self.config.table_scalars());
        debug_assert_eq!(out.len(), self.feature_dim());
        let u = self.normalize(x);
        for (level, feat) in self.levels.iter().zip(out.chunks_exact_mut(ch)) {
            feat.iter_mut().for_each(|f| *f = S::zero());
            let cs = self.corners(level, &u);
            for (&slot, &w) in cs.slots.iter().zip(&cs.weights) {
                let entry = &table[slot * ch..slot * ch + ch];
                for (f, &e) in feat.iter_mut().zip(entry) {
                    *f = *f + w * e;
                }
            }
        }
    }

    /// Accumulates `upstream`-weighted corner contributions into the dense `grad` table.
    pub fn backward_into<S: Scalar>(&self, x: Vec3<S>, upstream: &[S], grad: &mut [S]) {
        let ch = self.config.channels;
        debug_assert_eq!(upstream.len(), self.feature_dim());
        let u = self.normalize(x);
        for (level, up) in self.levels.iter().zip(upstream.chunks_exact(ch)) {
            if up.iter().all(|g| g.is_zero()) {
                continue;
            }
            let cs = self.corners(level, &u);
            for (&slot, &w) in cs.slots.iter().zip(&cs.weights) {
                let entry = &mut grad[slot * ch..slot * ch + ch];
                for (e, &g) in entry.iter_mut().zip(up) {
                    *e = *e + w * g;
                }
            }
        }
    }

    /// Sparse `(table scalar index, contribution)` list for one lookup; zero terms are omitted.
    pub fn backward_sparse<S: Scalar>(&self, x: Vec3<S>, upstream: &[S]) -> Vec<(usize, S)> {
        let ch = self.config.channels;
        let u = self.normalize(x);
        let mut out = Vec::new();
        for (level, up) in self.levels.iter().zip(upstream.chunks_exact(ch)) {
            let cs = self.corners(level, &u);
            for (&slot, &w) in cs.slots.iter().zip(&cs.weights) {
                for (c, &g) in up.iter().enumerate() {
                    let v = w * g;
                    if !v.is_zero() {
                        out.push((slot * ch + c, v));
                    }
                }
            }
        }
        out
    }
}

/// Number of direction-encoding components (degrees 0 through 3).
pub const SH_DIM: usize = 16;

static NON_UNIT_WARNING: Once = Once::new();

/// Real spherical harmonics up to degree 3, ordered by `(l, m)` with `m` ascending.
pub fn sh_encode<S: Scalar>(d: Vec3<S>) -> [S; SH_DIM] {
    let n = d.norm();
    let d = if (n - S::one()).abs() > S::lit(1e-6) {
        NON_UNIT_WARNING.call_once(|| log::warn!("non-unit direction passed to sh_encode; normalizing"));
        d / n
    } else {
        d
    };
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let c = S::lit;
    [
        c(0.282_094_791_773_878_14),
        c(-0.488_602_511_902_919_9) * y,
        c(0.488_602_511_902_919_9) * z,
        c(-0.488_602_511_902_919_9) * x,
        c(1.092_548_430_592_079_2) * x * y,
        c(-1.092_548_430_592_079_2) * y * z,
        c(0.946_174_695_757_56) * zz - c(0.315_391_565_252_52),
        c(-1.092_548_430_592_079_2) * x * z,
        c(0.546_274_215_296_039_6) * (xx - yy),
        c(0.590_043_589_926_643_5) * y * (c(3.0) * xx - yy) * c(-1.0),
        c(2.890_611_442_640_554) * x * y * z,
        c(0.457_045_799_464_465_7) * y * (S::one() - c(5.0) * zz),
        c(0.373_176_332_590_115_4) * z * (c(5.0) * zz - c(3.0)),
        c(0.457_045_799_464_465_7) * x * (S::one() - c(5.0) * zz),
        c(1.445_305_721_320_277) * z * (xx - yy),
        c(0.590_043_589_926_643_5) * x * (c(3.0) * yy - xx),
    ]
}
