//! Minimal dense neural-network toolkit: strided matrix products, layer
//! kernels with hand-written backward passes, flat parameter storage and
//! optimizers.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
mod scalar;

pub use optim::{Optimizer, OptimizerKind, Schedule};
pub use params::{Init, Layout, Params, SegId, Segment};
pub use scalar::{gemm, MatMut, MatRef, Scalar};
