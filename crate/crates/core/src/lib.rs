pub mod arch;
pub mod autograd;
pub mod data;
pub mod error;
pub mod harness;
pub mod init;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ConvKernel, Element, Precision, Shape, Tensor};
