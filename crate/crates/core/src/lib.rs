pub mod diagnostics;
pub mod diversity;
pub mod envs;
pub mod error;
pub mod exec;
pub mod nets;
pub mod objectives;
pub mod optim;
pub mod report;
pub mod rng;
pub mod rollout;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Parallelism;
