pub mod autodiff;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod prototype;
pub mod rng;
pub mod segnet;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
pub use prototype::IGNORE;
