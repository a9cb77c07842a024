//! Offline cache planning from activation statistics.

mod cost;
mod grid;
mod hits;
mod rank;
mod selection;

pub use cost::{estimate_makespan, expected_cost, pool_intervals};
pub use grid::{capacities_for, grid_points, plan_pools};
pub use hits::{hit_distribution, joint_hit_probability, HitDistribution, HitPattern};
pub use rank::{build_rank_model, pool_layer_counts, RankModel, EPSILON};
pub use selection::{
    elementary_symmetric, fit_selection_probs, inclusion_probabilities, SelectionModel, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
