pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod rng;
pub mod runconfig;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
