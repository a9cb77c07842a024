//! Runtime cache pools, rank-threshold dispatch and eviction.

mod plan;
mod pools;
mod stats;

pub use plan::{Dispatch, Pool, PoolPlan};
pub use pools::{CachePools, EvictionPolicy};
pub use stats::RuntimeStats;
