use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::profile::ExecutionProfile;
use crate::taskgraph::{critical_path, io_workload, ExpertTask, IoModel};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LowerBounds {
    pub i: f64,
    pub c_over_l: f64,
    pub p: f64,
    pub z: f64,
}

impl LowerBounds {
    pub fn max(&self) -> f64 {
        self.i.max(self.c_over_l).max(self.p).max(self.z)
    }
}

/// Lower bounds on the optimal makespan of `tasks`.
pub fn lower_bounds(tasks: &[ExpertTask], profile: &ExecutionProfile) -> LowerBounds {
    let i = tasks.iter().map(|t| io_workload(t.state, profile)).sum();
    let c = tasks.len() as f64 * profile.k as f64 * profile.c;
    let mut per_expert = BTreeMap::new();
    for t in tasks {
        per_expert.insert((t.key.layer, t.key.expert_id), t.p);
    }
    let z = tasks.iter().map(|t| critical_path(t.state, t.p, profile, IoModel::Separate)).fold(0.0, f64::max);
    LowerBounds { i, c_over_l: c / profile.l as f64, p: per_expert.values().sum(), z }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::ExpertKey;
    use crate::taskgraph::CompressionState::*;

    #[test]
    fn miss_and_e_only_example() {
        let p = ExecutionProfile::new(1.0, 0.3, 0.4, 2, 2, 1);
        let q =
            [ExpertTask::new(ExpertKey::new(0, 0, 0), Miss, 0.5), ExpertTask::new(ExpertKey::new(0, 1, 0), EOnly, 0.5)];
        let lb = lower_bounds(&q, &p);
        assert!((lb.i - 2.4).abs() < 1e-12);
        assert!((lb.c_over_l - 0.6).abs() < 1e-12);
        assert!((lb.p - 1.0).abs() < 1e-12);
        assert!((lb.z - 1.9).abs() < 1e-12);
        assert!((lb.max() - 2.4).abs() < 1e-12);
    }

    #[test]
    fn empty_is_zero() {
        let p = ExecutionProfile::new(1.0, 0.3, 0.4, 2, 2, 1);
        assert_eq!(lower_bounds(&[], &p), LowerBounds::default());
    }

    #[test]
    fn expert_counted_once() {
        let p = ExecutionProfile::new(1.0, 0.3, 0.4, 2, 2, 2);
        let q = [
            ExpertTask::new(ExpertKey::new(0, 3, 0), Compressed, 0.7),
            ExpertTask::new(ExpertKey::new(0, 3, 1), Compressed, 0.7),
        ];
        assert!((lower_bounds(&q, &p).p - 0.7).abs() < 1e-12);
    }
}
