pub mod attacks;
pub mod data;
pub mod error;
pub mod experiment;
pub mod init;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};
