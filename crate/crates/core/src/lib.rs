//! Chunk-parallel video diffusion with a global-token interface network.
//!
//! A clip is cut into voxel tokens, a small interface network reads
//! keyframes into a fixed set of global tokens at every diffusion step, and
//! a transformer denoiser processes temporal chunks independently against
//! those tokens. Overlapping chunk predictions are blended at sampling time.
//! The crate also carries an analytic FLOPs model and optical-flow
//! consistency metrics.
//!
//! The `parallel` feature (on by default) spreads chunk work over a rayon
//! pool; [`par::Execution::Sequential`] selects the single-threaded path at
//! runtime. Both paths produce bit-identical results.

pub mod diffusion;
pub mod dit;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod par;
pub mod patchio;
pub mod profiler;
pub mod vin;

pub use error::{Error, Result};
