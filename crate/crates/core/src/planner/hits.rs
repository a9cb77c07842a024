use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distribution of the number of selected ranks in an interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitDistribution {
    pub phi: Vec<f64>,
}

impl HitDistribution {
    /// `Φ(h)`, zero outside the support.
    pub fn get(&self, h: usize) -> f64 {
        self.phi.get(h).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }
}

/// Poisson-binomial pmf over independent Bernoulli trials, updated in place
/// from the highest count down.
pub fn hit_distribution(q: &[f64]) -> HitDistribution {
    let mut phi = vec![0.0; q.len() + 1];
    phi[0] = 1.0;
    for (i, &p) in q.iter().enumerate() {
        for j in (1..=i + 1).rev() {
            phi[j] = phi[j] * (1.0 - p) + phi[j - 1] * p;
        }
        phi[0] *= 1.0 - p;
    }
    HitDistribution { phi }
}

/// Hits per pool in hierarchy order F, C, S, E.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HitPattern {
    pub h: [usize; 4],
}

impl HitPattern {
    pub fn new(h: [usize; 4]) -> Self {
        Self { h }
    }

    pub fn total(&self) -> usize {
        self.h.iter().sum()
    }

    /// Activated experts outside every pool, if the pattern is feasible for `k`.
    pub fn remaining(&self, k: usize) -> Option<usize> {
        k.checked_sub(self.total())
    }
}

/// `P(h)` under the size-`k` conditional law: `Φ_M(k_rem) / Φ_N(k) · ∏ Φ_p(h_p)`.
pub fn joint_hit_probability(
    h: &HitPattern,
    pools: &[HitDistribution; 4],
    rest: &HitDistribution,
    all: &HitDistribution,
    k: usize,
) -> Result<f64> {
    let norm = all.get(k);
    if norm.is_nan() || norm <= 0.0 {
        return Err(Error::DegenerateModel(format!("probability of exactly {k} selections is zero")));
    }
    let Some(k_rem) = h.remaining(k) else {
        return Ok(0.0);
    };
    let inside: f64 = h.h.iter().zip(pools).map(|(&hp, phi)| phi.get(hp)).product();
    Ok(rest.get(k_rem) * inside / norm)
}
