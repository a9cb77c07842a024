use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, PoolLabel, Result};
use crate::taskgraph::CompressionState;

/// Cache pools in hierarchy order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pool {
    F,
    C,
    S,
    E,
}

impl Pool {
    pub const ALL: [Pool; 4] = [Pool::F, Pool::C, Pool::S, Pool::E];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn state(self) -> CompressionState {
        match self {
            Pool::F => CompressionState::Full,
            Pool::C => CompressionState::Compressed,
            Pool::S => CompressionState::SmOnly,
            Pool::E => CompressionState::EOnly,
        }
    }

    pub fn label(self) -> PoolLabel {
        PoolLabel(["F", "C", "S", "E"][self.index()])
    }

    /// Resident bytes of one expert with `n` tensors of `elements` each.
    pub fn expert_bytes(self, n: usize, elements: u64, rho: f64) -> f64 {
        let ne = n as f64 * elements as f64;
        match self {
            Pool::F => 2.0 * ne,
            Pool::C => (1.0 + rho) * ne,
            Pool::S => ne,
            Pool::E => rho * ne,
        }
    }

    /// Parses a comma-separated subset such as `F,C,E`.
    pub fn parse_list(s: &str) -> Result<Vec<Pool>> {
        let mut out: Vec<Pool> = s.split(',').map(|p| p.trim().parse()).collect::<Result<_>>()?;
        out.sort();
        out.dedup();
        if out.is_empty() {
            return Err(Error::invalid("empty pool list"));
        }
        Ok(out)
    }
}

impl fmt::Display for Pool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label().0)
    }
}

impl FromStr for Pool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "F" => Ok(Pool::F),
            "C" => Ok(Pool::C),
            "S" => Ok(Pool::S),
            "E" => Ok(Pool::E),
            _ => Err(Error::invalid(format!("unknown pool '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dispatch {
    Pool(Pool),
    Evict,
}

/// Pool capacities in experts, memory ratios and the rank tolerance margin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolPlan {
    pub capacities: [usize; 4],
    pub gamma: [f64; 4],
    pub delta: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_cost: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl PoolPlan {
    /// `gamma` defaults to each pool's share of the total capacity.
    pub fn new(capacities: [usize; 4], delta: usize) -> Self {
        let total: usize = capacities.iter().sum();
        let gamma = if total == 0 { [0.0; 4] } else { capacities.map(|c| c as f64 / total as f64) };
        Self { capacities, gamma, delta, expected_cost: None, warning: None }
    }

    /// Margin of ⌈5%⌉ of the expert count.
    pub fn default_delta(num_experts: usize) -> usize {
        (num_experts * 5).div_ceil(100)
    }

    /// Plan that caches nothing.
    pub fn empty(num_experts: usize) -> Self {
        Self::new([0; 4], Self::default_delta(num_experts))
    }

    pub fn capacity(&self, pool: Pool) -> usize {
        self.capacities[pool.index()]
    }

    pub fn total_capacity(&self) -> usize {
        self.capacities.iter().sum()
    }

    /// `τ_p`: cumulative capacity up to and including `p`, plus the margin.
    pub fn thresholds(&self) -> [usize; 4] {
        let mut acc = 0;
        self.capacities.map(|c| {
            acc += c;
            acc + self.delta
        })
    }

    /// First non-empty pool whose threshold exceeds `rank`.
    pub fn dispatch(&self, rank: usize) -> Dispatch {
        let tau = self.thresholds();
        Pool::ALL
            .into_iter()
            .find(|p| self.capacity(*p) > 0 && rank < tau[p.index()])
            .map_or(Dispatch::Evict, Dispatch::Pool)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma.iter().any(|g| !(0.0..=1.0 + 1e-9).contains(g)) {
            return Err(Error::invalid("memory ratios must lie in [0, 1]"));
        }
        let sum: f64 = self.gamma.iter().sum();
        if sum > 0.0 && (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("memory ratios sum to {sum}, expected 1")));
        }
        Ok(())
    }

    /// Bytes needed if every pool is filled to capacity.
    pub fn footprint(&self, n: usize, elements: u64, rho: f64) -> f64 {
        Pool::ALL.iter().map(|p| self.capacity(*p) as f64 * p.expert_bytes(n, elements, rho)).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(s)?;
        plan.validate()?;
        Ok(plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dispatch_examples() {
        let plan = PoolPlan::new([2, 2, 2, 2], 1);
        assert_eq!(plan.thresholds(), [3, 5, 7, 9]);
        assert_eq!(plan.dispatch(0), Dispatch::Pool(Pool::F));
        assert_eq!(plan.dispatch(4), Dispatch::Pool(Pool::C));
        assert_eq!(plan.dispatch(8), Dispatch::Pool(Pool::E));
        assert_eq!(plan.dispatch(9), Dispatch::Evict);
    }

    #[test]
    fn dispatch_skips_empty_pools() {
        let plan = PoolPlan::new([0, 0, 3, 0], 1);
        assert_eq!(plan.dispatch(0), Dispatch::Pool(Pool::S));
        assert_eq!(plan.dispatch(3), Dispatch::Pool(Pool::S));
        assert_eq!(plan.dispatch(4), Dispatch::Evict);
        assert_eq!(PoolPlan::empty(8).dispatch(0), Dispatch::Evict);
    }

    #[test]
    fn dispatch_is_monotone() {
        let plan = PoolPlan::new([1, 0, 4, 2], 2);
        let order = |d: Dispatch| match d {
            Dispatch::Pool(p) => p.index(),
            Dispatch::Evict => 4,
        };
        for r in 0..20 {
            assert!(order(plan.dispatch(r)) <= order(plan.dispatch(r + 1)));
        }
    }

    #[test]
    fn default_delta_rounds_up() {
        assert_eq!(PoolPlan::default_delta(8), 1);
        assert_eq!(PoolPlan::default_delta(64), 4);
        assert_eq!(PoolPlan::default_delta(0), 0);
    }

    #[test]
    fn expert_sizes() {
        assert_eq!(Pool::F.expert_bytes(3, 100, 0.5), 600.0);
        assert_eq!(Pool::C.expert_bytes(3, 100, 0.5), 450.0);
        assert_eq!(Pool::S.expert_bytes(3, 100, 0.5), 300.0);
        assert_eq!(Pool::E.expert_bytes(3, 100, 0.5), 150.0);
    }

    #[test]
    fn json_roundtrip() {
        let plan = PoolPlan::new([1, 2, 3, 4], 1);
        let back = PoolPlan::from_json(&plan.to_json().unwrap()).unwrap();
        assert_eq!(back, plan);
        assert!(PoolPlan::from_json(r#"{"capacities":[1,0,0,0],"gamma":[0.5,0,0,0],"delta":0}"#).is_err());
    }

    #[test]
    fn pool_names() {
        assert_eq!(Pool::parse_list("e, F,c").unwrap(), vec![Pool::F, Pool::C, Pool::E]);
        assert!(Pool::parse_list("F,X").is_err());
    }
}
