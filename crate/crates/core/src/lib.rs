pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod features;
pub mod nn;
pub mod objectives;
pub mod seq2seq;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
