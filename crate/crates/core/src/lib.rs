pub mod data;
pub mod error;
pub mod graph;
pub mod hyperopt;
pub mod metrics;
pub mod model;
pub mod nsa;
pub mod params;
pub mod tabmixer;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
