pub mod bcos;
pub mod data;
pub mod error;
pub mod hypercomplex;
pub mod models;
pub mod tensor;

pub use error::{HxError, Result};
pub use tensor::Tensor;
