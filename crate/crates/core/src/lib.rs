//! Lossless BF16 expert compression, cache-affinity scheduling and
//! compression-aware cache planning for offloaded mixture-of-experts layers.

pub mod cache;
pub mod codec;
pub mod container;
pub mod error;
pub mod harness;
pub mod planner;
pub mod profile;
pub mod scheduler;
pub mod taskgraph;

pub use error::{Error, Result};
pub use profile::ExecutionProfile;
pub use taskgraph::{CompressionState, ExpertTask, IoModel};
