//! Multi-scale, context-aware face detection built from first principles:
//! a small dense-tensor core with hand-written backward passes, per-pixel
//! L2-normalized multi-scale feature fusion, a region proposal network,
//! a body-context detection head, PR/AP evaluation, and a synthetic-data
//! training harness.

pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod context;
pub mod dataset;
pub mod detect;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod gradsuite;
pub mod head;
pub mod loss;
pub mod model;
pub mod ops;
pub mod optim;
pub mod pgm;
pub mod proposal;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
