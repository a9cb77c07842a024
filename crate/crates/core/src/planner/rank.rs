use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp margin for marginal inclusion probabilities.
pub const EPSILON: f64 = 1e-6;

/// Marginal inclusion probability per popularity rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankModel {
    pub f: Vec<f64>,
    pub k: usize,
    /// Expert id holding each rank.
    pub experts: Vec<u32>,
}

impl RankModel {
    pub fn num_experts(&self) -> usize {
        self.f.len()
    }

    /// Uses `f` as given; it must sum to `k` and lie in [0, 1].
    pub fn from_marginals(f: Vec<f64>, k: usize) -> Result<Self> {
        check_marginals(&f, k)?;
        let experts = (0..f.len() as u32).collect();
        Ok(Self { f, k, experts })
    }
}

fn check_marginals(f: &[f64], k: usize) -> Result<()> {
    if f.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::invalid("marginals must lie in [0, 1]"));
    }
    let sum: f64 = f.iter().sum();
    if (sum - k as f64).abs() > 1e-9 {
        return Err(Error::invalid(format!("marginals sum to {sum}, expected {k}")));
    }
    Ok(())
}

/// Sums per-layer activation counts per expert id.
pub fn pool_layer_counts(layers: &[Vec<u64>]) -> Vec<u64> {
    let n = layers.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = vec![0; n];
    for layer in layers {
        for (o, c) in out.iter_mut().zip(layer) {
            *o += c;
        }
    }
    out
}

/// Rank model from activation counts indexed by expert id.
///
/// Marginals are proportional to counts and scaled to sum to `k`. Mass above
/// `1 − ε` is shared equally by the uncapped entries; entries still at zero
/// are raised to `min(ε, smallest positive entry)` and the uncapped entries
/// are rescaled to restore the sum.
pub fn build_rank_model(counts: &[u64], k: usize) -> Result<RankModel> {
    let total: u64 = counts.iter().sum();
    if counts.is_empty() || total == 0 {
        return Err(Error::invalid("activation history is empty"));
    }
    if k == 0 || k >= counts.len() {
        return Err(Error::invalid(format!("k = {k} must lie in 1..{}", counts.len())));
    }
    let mut experts: Vec<u32> = (0..counts.len() as u32).collect();
    experts.sort_by(|&a, &b| counts[b as usize].cmp(&counts[a as usize]).then(a.cmp(&b)));
    let mut f: Vec<f64> = experts.iter().map(|&e| k as f64 * counts[e as usize] as f64 / total as f64).collect();

    let hi = 1.0 - EPSILON;
    let mut capped = vec![false; f.len()];
    loop {
        let mut excess = 0.0;
        for (x, c) in f.iter_mut().zip(capped.iter_mut()) {
            if *x > hi {
                excess += *x - hi;
                *x = hi;
                *c = true;
            }
        }
        if excess <= 0.0 {
            break;
        }
        let free = capped.iter().filter(|c| !**c).count();
        let share = excess / free as f64;
        for (x, c) in f.iter_mut().zip(&capped) {
            if !c {
                *x += share;
            }
        }
    }

    if f.contains(&0.0) {
        let floor = f.iter().copied().filter(|&x| x > 0.0).fold(EPSILON, f64::min);
        for x in f.iter_mut().filter(|x| **x == 0.0) {
            *x = floor;
        }
        // rescaling the uncapped entries keeps their order
        let capped_mass: f64 = f.iter().zip(&capped).filter(|(_, c)| **c).map(|(x, _)| x).sum();
        let free_mass: f64 = f.iter().zip(&capped).filter(|(_, c)| !**c).map(|(x, _)| x).sum();
        let scale = (k as f64 - capped_mass) / free_mass;
        for (x, c) in f.iter_mut().zip(&capped) {
            if !c {
                *x *= scale;
            }
        }
    }
    let sum: f64 = f.iter().sum();
    let drift = k as f64 - sum;
    if drift.abs() > 1e-9 {
        return Err(Error::DegenerateModel(format!("rank model sums to {sum}, expected {k}")));
    }
    Ok(RankModel { f, k, experts })
}
