pub mod autodiff;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
