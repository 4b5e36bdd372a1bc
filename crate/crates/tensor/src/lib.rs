//! Dense arrays, a recording tape for reverse-mode differentiation, and the
//! handful of layers and utilities the reconstruction pipeline is built from.

mod array;
pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod nn;
pub mod ops;
pub mod optim;
mod param;
mod scalar;

pub use array::{broadcast_shape, DenseArray};
pub use error::{Result, TensorError};
pub use graph::{BackwardFn, Gradients, Graph, Var};
pub use ops::{bilinear_sample_array, conv_out_extent, ConvSpec, SampleMask};
pub use ops::sum_n;
pub use ops::shape::{concat, stack};
pub use optim::{Adam, AdamConfig, StepReport};
pub use param::{ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
