//! Lock-free cross-shard transaction commit over a simulated network.

pub mod baselines;
pub mod bench;
pub mod dest;
pub mod error;
pub mod leader;
pub mod messages;
pub mod model;
pub mod sim;
pub mod verifier;
pub mod workload;

pub use error::{Error, Result};
pub use sim::{run, Protocol, RunConfig, RunOutput, RunReport};
pub use workload::{GenParams, Workload};
