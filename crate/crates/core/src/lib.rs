pub mod acopf;
pub mod autodiff;
pub mod dataset;
pub mod dc3;
pub mod family;
pub mod linalg;
pub mod nn;
pub mod qp;
pub mod reference;
pub mod tensor;
pub mod tensor_io;

pub use autodiff::{Tape, Var};
pub use family::{Dims, ProblemFamily};
pub use tensor::{Tensor, TensorError};
