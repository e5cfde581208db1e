pub mod attention;
pub mod data;
pub mod error;
pub mod gradient_suite;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Shape, Tape, Tensor, Var};
