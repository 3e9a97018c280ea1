pub mod error;
pub mod numcore;

pub use error::{Error, Result};
pub mod env;
pub mod policy;
pub mod adversary;
pub mod ppo;
pub mod baselines;
pub mod config;
pub mod evalkit;
pub mod pipeline;
