//! Decentralized multi-agent reinforcement learning with value propagation.

pub mod consistency;
pub mod envs;
pub mod error;
pub mod graph;
pub mod harness;
pub mod neural;
pub mod optim;
pub mod agents;

pub use error::{Error, Result};
