//! Deep BSDE solver for coupled forward-backward SDEs with square-root diffusions.

pub mod adam;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod model;
pub mod net;
pub mod oracle;
pub mod paths;
pub mod report;
pub mod rollout;
pub mod trainer;

pub use error::{Error, Result};
