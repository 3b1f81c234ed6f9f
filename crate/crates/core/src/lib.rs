//! Numerical laboratory for gradient concentration on modular
//! multiplication and high-frequency periodic targets.

pub mod error;
pub mod gram;
pub mod modcore;
pub mod nn;
pub mod numeric;
pub mod spectral;
pub mod sqdim;
pub mod waves;

pub use error::{Error, Result};
