//! Two-stage path selection for reasoning policies: group-relative policy
//! optimization followed by online preference optimization with a memory of
//! weak trajectories.

pub mod backend;
pub mod config;
pub mod dataset;
pub mod dpo;
pub mod error;
pub mod evalkit;
pub mod grpo;
pub mod jsonl;
pub mod nrm;
pub mod pipeline;
pub mod policy;
pub mod report;
pub mod reward;
pub mod rng;
pub mod synthenv;
pub mod types;

pub use error::{Error, Result};
