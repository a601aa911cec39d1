pub mod data;
pub mod error;
pub mod kernel;
pub mod locfit;
pub mod numeric;
pub mod propensity;
pub mod psr;
pub mod rng;
pub mod simbench;

pub use error::{Error, Result};
