//! Minimal differentiable-computation kernel: tensors, a reverse-mode tape,
//! Adam, L-BFGS and a finite-difference checker.

pub mod gradcheck;
pub mod lbfgs;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, FdReport, ParamCheck};
pub use lbfgs::{minimize, LbfgsOptions, Minimum};
pub use params::{init_uniform, Adam, Gradients, ModelFile, ParamStore};
pub use tape::{forward_backward, Graph, Var};
pub use tensor::Tensor;
