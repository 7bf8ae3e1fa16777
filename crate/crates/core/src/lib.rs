//! Shallow networks whose hidden activation is the time-one flow of a neural ODE.

pub mod bounds;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod linalg;
pub mod nets;
pub mod spectral;
pub mod training;

pub use error::{Error, Result};
