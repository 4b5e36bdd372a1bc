//! Differentiable operations on [`Var`](crate::Var).
//!
//! Each op computes its value eagerly and records a backward closure that
//! captures exactly the arrays it needs.

mod conv;
mod elementwise;
mod linalg;
mod normalize;
mod reduce;
mod sample;
pub(crate) mod shape;

pub use conv::{conv_out_extent, ConvSpec};
pub use elementwise::sum_n;
pub use sample::{bilinear_sample_array, SampleMask};
