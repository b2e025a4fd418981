pub mod autodiff;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod nn;
pub mod operators;
pub mod physics;
pub mod training;

pub use error::{Error, Result};
