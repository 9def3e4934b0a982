pub mod analysis;
pub mod cli;
pub mod engine;
pub mod error;
pub mod flowcore;
pub mod ndmath;
pub mod nets;
pub mod objectives;
pub mod quadrature;
pub mod sampler;
pub mod stats;
pub mod tasks;

pub use error::{Error, Result};
