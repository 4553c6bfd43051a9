//! Minimal CPU tensor library with tape-based reverse-mode autodiff, sized
//! for small 3D encoder–decoder segmentation networks.

pub mod error;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod param;
pub mod tensor;

pub use error::{NnError, Result};
pub use graph::{Graph, Var};
pub use param::ParamStore;
pub use tensor::Tensor;
