pub mod clustering;
pub mod error;
pub mod experiment;
pub mod fleet;
pub mod learner;
pub mod metrics;
pub mod moe;
pub mod policy;
pub mod runtime;
pub mod seed;
pub mod world;

pub use error::{Error, Result};
