use std::collections::BTreeMap;

use proptest::prelude::*;
use zmoe_core::cache::{EvictionPolicy, Pool, PoolPlan};
use zmoe_core::codec::{Bf16Buffer, Codec};
use zmoe_core::container::{pack_container, Container, ExpertKey};
use zmoe_core::harness::trace::activation_counts;
use zmoe_core::harness::{
    gen_trace, measure_profile, pipeline_bench, render, run_simulation, PipelineOptions, ReportFormat,
    SimulationConfig, SimulationReport, TraceSpec,
};
use zmoe_core::planner::{build_rank_model, fit_selection_probs, plan_pools, DEFAULT_MAX_ITER, DEFAULT_TOL};
use zmoe_core::scheduler::{schedule_tasks, simulate};
use zmoe_core::taskgraph::expert_tasks;
use zmoe_core::{CompressionState, IoModel};

fn experts(n: u32) -> BTreeMap<ExpertKey, Bf16Buffer> {
    let mut m = BTreeMap::new();
    let mut x = 0x9e37_79b9u32;
    for e in 0..n {
        for t in 0..2u16 {
            let words = (0..2048)
                .map(|_| {
                    x = x.wrapping_mul(747796405).wrapping_add(2891336453);
                    let exp = 124 - ((x >> 29) as u16 & 3);
                    ((x >> 8) as u16 & 0x807f) | (exp << 7)
                })
                .collect();
            m.insert(ExpertKey::new(0, e, t), Bf16Buffer::new(words));
        }
    }
    m
}

#[test]
fn pack_profile_plan_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.zmoe");
    let tensors = experts(8);
    pack_container(&tensors, 2, Codec::Order0, &path).unwrap();
    let c = Container::open(&path).unwrap();

    let mut profile = measure_profile(&c, 4, 2).unwrap();
    profile.p_default = 3.0 * profile.c;
    assert_eq!((profile.k, profile.n, profile.elements_per_tensor), (2, 2, Some(2048)));
    assert!(profile.rho > 0.1 && profile.rho < 0.5, "{}", profile.rho);

    let trace = gen_trace(&TraceSpec::new(8, 2, 400, 1.0, 5)).unwrap();
    let counts = activation_counts(&trace, 8).unwrap();
    let model = build_rank_model(&counts[0], 2).unwrap();
    let sel = fit_selection_probs(&model, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    let budget = (3.0 * Pool::F.expert_bytes(2, 2048, profile.rho)) as u64;
    let plan = plan_pools(&model, &sel, &Pool::ALL, budget, &profile, 0.25).unwrap();
    assert!(plan.footprint(2, 2048, profile.rho) <= budget as f64);

    let mut config = SimulationConfig::new(8);
    config.available = Some(c.experts().collect());
    let planned = run_simulation(&trace, &plan, &profile, &config).unwrap();
    let none = run_simulation(&trace, &PoolPlan::empty(8), &profile, &config).unwrap();
    assert!(planned.summary.mean_makespan < none.summary.mean_makespan);
    assert_eq!(planned.summary.hit_histogram.values().sum::<usize>(), planned.summary.steps);
    assert!(planned.summary.overlap_ratio >= 0.0 && planned.summary.overlap_ratio < 1.0);

    let back: SimulationReport = serde_json::from_str(&render(&planned, ReportFormat::Json).unwrap()).unwrap();
    assert_eq!(back, planned);

    let all: Vec<(u32, u32)> = c.experts().collect();
    let r = pipeline_bench(&c, &all, &profile, PipelineOptions::new(2, IoModel::Separate), Some(&tensors)).unwrap();
    assert!(r.bit_exact);
    assert_eq!(r.tensors, 16);
}

#[test]
fn budget_zero_is_the_all_miss_schedule() {
    let trace = gen_trace(&TraceSpec::new(6, 2, 30, 0.5, 1)).unwrap();
    let profile = zmoe_core::ExecutionProfile::new(1.0, 0.3, 0.4, 2, 2, 2).with_p_default(0.5);
    let report = run_simulation(&trace, &PoolPlan::empty(6), &profile, &SimulationConfig::new(6)).unwrap();
    for (rec, step) in trace.iter().zip(&report.steps) {
        let tasks: Vec<_> =
            rec.experts.iter().flat_map(|&(e, tok)| expert_tasks(0, e, CompressionState::Miss, 0.5, tok, 2)).collect();
        assert_eq!(step.makespan, schedule_tasks(&tasks, &profile).unwrap().makespan);
    }
}

#[test]
fn policies_differ_only_in_residency() {
    let trace = gen_trace(&TraceSpec::new(12, 2, 300, 1.3, 8)).unwrap();
    let profile = zmoe_core::ExecutionProfile::new(1.0, 0.3, 0.4, 2, 2, 1).with_p_default(0.2);
    let plan = PoolPlan::new([2, 1, 1, 2], 1);
    for policy in [EvictionPolicy::Frequency, EvictionPolicy::Fifo, EvictionPolicy::Lru, EvictionPolicy::Marking] {
        let mut cfg = SimulationConfig::new(12);
        cfg.policy = policy;
        let r = run_simulation(&trace, &plan, &profile, &cfg).unwrap();
        assert_eq!(r.steps.len(), 300);
        assert!(r.steps.iter().all(|s| s.makespan <= s.sequential_sum + 1e-12));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn empty_blocks_are_free(l in 1usize..4, k in 1usize..4) {
        let profile = zmoe_core::ExecutionProfile::new(1.0, 0.5, 0.5, k, l, 1);
        prop_assert_eq!(simulate(&[], &profile).unwrap().makespan, 0.0);
    }

    #[test]
    fn simulation_reports_are_reproducible(seed in 0u64..1000, skew in 0.0f64..2.5) {
        let trace = gen_trace(&TraceSpec::new(8, 2, 40, skew, seed)).unwrap();
        let profile = zmoe_core::ExecutionProfile::new(1.0, 0.4, 0.3, 2, 2, 1).with_p_default(0.1);
        let plan = PoolPlan::new([1, 1, 1, 1], 1);
        let a = render(&run_simulation(&trace, &plan, &profile, &SimulationConfig::new(8)).unwrap(), ReportFormat::Json).unwrap();
        let b = render(&run_simulation(&trace, &plan, &profile, &SimulationConfig::new(8)).unwrap(), ReportFormat::Json).unwrap();
        prop_assert_eq!(a, b);
    }
}
