//! LiDAR snow removal with physics-guided pseudo-labels.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! - [`geom`], [`io`]: points, scans, label files;
//! - [`rangeproj`]: spherical range-image projection and its inverse;
//! - [`spatial`]: exact radius and k-NN queries;
//! - [`pseudolabel`]: rule-based snow pseudo-labels;
//! - [`baselines`]: ROR, SOR, DROR, LIOR and D-LIOR filters;
//! - [`nnet`] and [`losses`]: a small reverse-mode autodiff core, U-Net /
//!   U-Net++ snow-mask networks and the self-supervised objective;
//! - [`postprocess`]: sensing-geometry correction of predictions;
//! - [`eval`]: confusion metrics, F-beta, aggregation and timing;
//! - [`synth`]: deterministic synthetic snowy scenes with exact ground truth.

// `!(x > 0.0)` is how parameter checks reject NaN along with bad values, and
// the numeric kernels index several parallel buffers in one loop.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baselines;
pub mod error;
pub mod eval;
pub mod geom;
pub mod io;
pub mod losses;
pub mod nnet;
pub mod postprocess;
pub mod pseudolabel;
pub mod rangeproj;
pub mod spatial;
pub mod synth;

pub use error::{Error, Result};
pub use geom::{LabelSet, Point, PointCloud, Provenance, SensorMeta};
