pub mod autodiff;
pub mod data;
pub mod detection;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
