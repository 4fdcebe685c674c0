pub mod curriculum;
pub mod error;
pub mod faces;
pub mod model;
pub mod probe;
pub mod retrieval;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{no_grad, Scalar, Tensor};
