//! Dense numerical substrate: tensors, parameters, an eager autodiff tape,
//! finite-difference gradient checking and the checkpoint container.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
mod graph;
pub(crate) mod kernels;
mod params;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, NodeId, Segment, LAYER_NORM_EPS};
pub use params::{ParamGrads, ParamId, ParamStore};
pub(crate) use params::standard_normal;
pub use tensor::Tensor;
