pub mod cli;
pub mod data;
pub mod error;
pub mod figures;
pub mod kspace;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod optim;
pub mod seeds;
pub mod trainer;

pub use error::{Error, Result};
