pub mod autodiff;
pub mod cli;
pub mod dataio;
pub mod dsp;
pub mod error;
pub mod models;
pub mod rng;
pub mod synthgen;
pub mod traineval;
pub mod verify;

pub use error::{Error, Result};
