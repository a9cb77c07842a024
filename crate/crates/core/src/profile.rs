use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Profiled latency and shape constants shared by the scheduler, the planner
/// and the simulator. All times are seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionProfile {
    /// Read latency of one SM-chunk.
    pub u: f64,
    /// Read latency of one E-chunk; `rho * u / k` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<f64>,
    /// Decompression latency of one E-chunk.
    pub c: f64,
    /// Compressed exponent size over raw exponent size.
    pub rho: f64,
    /// Exponent shards per tensor.
    pub k: usize,
    /// Decompression worker threads.
    pub l: usize,
    /// Tensors per expert.
    pub n: usize,
    /// Per-expert execution time overrides.
    #[serde(default)]
    pub p: BTreeMap<u32, f64>,
    /// Execution time of experts missing from `p`.
    #[serde(default)]
    pub p_default: f64,
    /// Extra execution time per routed token.
    #[serde(default)]
    pub p_per_token: f64,
    /// Tensor recovery time, per tensor.
    #[serde(default)]
    pub recovery: f64,
    /// Elements per tensor, used for byte-budget accounting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elements_per_tensor: Option<u64>,
}

impl ExecutionProfile {
    /// A profile with no expert execution time and the default `v`.
    pub fn new(u: f64, c: f64, rho: f64, k: usize, l: usize, n: usize) -> Self {
        Self {
            u,
            v: None,
            c,
            rho,
            k,
            l,
            n,
            p: BTreeMap::new(),
            p_default: 0.0,
            p_per_token: 0.0,
            recovery: 0.0,
            elements_per_tensor: None,
        }
    }

    pub fn with_p_default(mut self, p: f64) -> Self {
        self.p_default = p;
        self
    }

    pub fn with_expert_time(mut self, expert: u32, p: f64) -> Self {
        self.p.insert(expert, p);
        self
    }

    pub fn with_elements_per_tensor(mut self, e: u64) -> Self {
        self.elements_per_tensor = Some(e);
        self
    }

    /// E-chunk read latency.
    pub fn e_read(&self) -> f64 {
        self.v.unwrap_or(self.rho * self.u / self.k as f64)
    }

    /// Execution time for `expert` serving `tokens` tokens.
    pub fn expert_time(&self, expert: u32, tokens: u32) -> f64 {
        self.p.get(&expert).copied().unwrap_or(self.p_default) + self.p_per_token * tokens as f64
    }

    pub fn validate(&self) -> Result<()> {
        let finite_pos = |x: f64| x.is_finite() && x > 0.0;
        if !finite_pos(self.u) || !finite_pos(self.c) {
            return Err(Error::invalid("profile u and c must be positive"));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::invalid(format!("compression ratio {} outside (0, 1]", self.rho)));
        }
        if self.k == 0 || self.l == 0 || self.n == 0 {
            return Err(Error::invalid("profile k, l and n must be at least 1"));
        }
        if let Some(v) = self.v {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid("profile v must be non-negative"));
            }
        }
        let non_neg = |x: f64| x.is_finite() && x >= 0.0;
        if !self.p.values().all(|&p| non_neg(p))
            || !non_neg(self.p_default)
            || !non_neg(self.p_per_token)
            || !non_neg(self.recovery)
        {
            return Err(Error::invalid("execution and recovery times must be non-negative"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_e_read_is_proportional() {
        let p = ExecutionProfile::new(1.0, 0.3, 0.4, 2, 2, 1);
        assert!((p.e_read() - 0.2).abs() < 1e-15);
        assert!(p.validate().is_ok());
        let mut q = p.clone();
        q.v = Some(0.05);
        assert_eq!(q.e_read(), 0.05);
    }

    #[test]
    fn rejects_bad_constants() {
        let base = ExecutionProfile::new(1.0, 0.3, 0.4, 2, 2, 1);
        for bad in [
            ExecutionProfile { u: 0.0, ..base.clone() },
            ExecutionProfile { rho: 1.5, ..base.clone() },
            ExecutionProfile { k: 0, ..base.clone() },
            ExecutionProfile { p_default: -1.0, ..base.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn json_fields() {
        let json = r#"{"u":1.0,"c":0.3,"rho":0.4,"k":2,"l":2,"n":1,"p":{"3":0.7}}"#;
        let p: ExecutionProfile = serde_json::from_str(json).unwrap();
        assert_eq!(p.expert_time(3, 0), 0.7);
        assert_eq!(p.expert_time(4, 5), 0.0);
    }
}
