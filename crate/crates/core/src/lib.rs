pub mod adam;
pub mod cells;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod linalg;
pub mod network;
pub mod ops;
pub mod par;
pub mod rescorer;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Precision, Real, Tensor};
