pub mod comm;
pub mod error;
pub mod io;
pub mod numerics;
pub mod runner;
pub mod synth;
pub mod towers;

#[cfg(test)]
pub(crate) mod testkit;

pub use error::{Error, Result};
