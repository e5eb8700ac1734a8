pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod gradsuite;
pub mod losses;
pub mod nets;
pub mod objectives;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
