//! Time-archival radiance fields.
//!
//! One small radiance field is trained per time step from synchronized multi-view images,
//! stored in a random-access archive, and rendered from arbitrary virtual cameras.

// `!(x > 0.0)` style checks are how validation rejects NaN along with out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// tests spell out small matrix products index by index
#![cfg_attr(test, allow(clippy::needless_range_loop))]

pub mod archive;
pub mod dataset;
pub mod encoding;
pub mod error;
pub mod field;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod occupancy;
pub mod profiles;
pub mod renderer;
pub mod scalar;
pub mod scene_synth;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Vec3f = geometry::Vec3<f32>;
pub type Vec3d = geometry::Vec3<f64>;
pub type Field32 = field::TimestepField<f32>;
pub type Field64 = field::TimestepField<f64>;
