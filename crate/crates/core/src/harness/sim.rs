use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::trace::TraceRecord;
use crate::cache::{CachePools, EvictionPolicy, PoolPlan, RuntimeStats};
use crate::error::{Error, Result};
use crate::profile::ExecutionProfile;
use crate::scheduler::{build_blocks_with, partition_tasks, simulate_with, Schedule};
use crate::taskgraph::{expert_tasks, CompressionState, IoModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub num_experts: usize,
    pub policy: EvictionPolicy,
    pub io_model: IoModel,
    /// Experts available in storage; `None` accepts every id below `num_experts`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub available: Option<BTreeSet<(u32, u32)>>,
}

impl SimulationConfig {
    pub fn new(num_experts: usize) -> Self {
        Self { num_experts, policy: EvictionPolicy::Frequency, io_model: IoModel::Separate, available: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub layer: u32,
    pub step: u32,
    pub makespan: f64,
    pub charge: f64,
    pub io_busy: f64,
    pub sequential_sum: f64,
    pub overlap_ratio: f64,
    /// Activated experts per state: F, C, S, E, M.
    pub hits: [usize; 5],
    pub tasks: usize,
    /// Tasks with at least two distinct compression states.
    pub mixed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub steps: usize,
    pub mean_makespan: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max_makespan: f64,
    pub total_makespan: f64,
    pub total_charge: f64,
    pub io_busy_fraction: f64,
    pub overlap_ratio: f64,
    pub tokens: u64,
    /// Steps per hit pattern, keyed `F{}C{}S{}E{}M{}`.
    pub hit_histogram: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub config: SimulationConfig,
    pub profile: ExecutionProfile,
    pub plan: PoolPlan,
    pub summary: Summary,
    pub steps: Vec<StepReport>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn state_slot(s: CompressionState) -> usize {
    match s {
        CompressionState::Full => 0,
        CompressionState::Compressed => 1,
        CompressionState::SmOnly => 2,
        CompressionState::EOnly => 3,
        CompressionState::Miss => 4,
    }
}

/// Trace-driven simulation: per record, look up residency, schedule the
/// reconstruction tasks, then update statistics and pools. Each layer keeps
/// its own pools under the shared plan.
pub fn run_simulation(
    trace: &[TraceRecord],
    plan: &PoolPlan,
    profile: &ExecutionProfile,
    config: &SimulationConfig,
) -> Result<SimulationReport> {
    run_simulation_observed(trace, plan, profile, config, |_, _, _| Ok(()))
}

/// [`run_simulation`] that hands every step's schedule and the layer's pools
/// (after the update) to `observe`.
pub fn run_simulation_observed(
    trace: &[TraceRecord],
    plan: &PoolPlan,
    profile: &ExecutionProfile,
    config: &SimulationConfig,
    mut observe: impl FnMut(&TraceRecord, &Schedule, &CachePools) -> Result<()>,
) -> Result<SimulationReport> {
    profile.validate()?;
    plan.validate()?;
    let mut layers: BTreeMap<u32, (CachePools, RuntimeStats)> = BTreeMap::new();
    let mut steps = Vec::with_capacity(trace.len());
    let mut tokens = 0u64;

    for rec in trace {
        rec.validate()?;
        let (pools, stats) = layers
            .entry(rec.layer)
            .or_insert_with(|| (CachePools::new(plan.clone(), config.policy), RuntimeStats::new(config.num_experts)));
        let mut tasks = Vec::new();
        let mut resident = Vec::new();
        let mut hits = [0usize; 5];
        for &(e, tok) in &rec.experts {
            if e as usize >= config.num_experts
                || config.available.as_ref().is_some_and(|a| !a.contains(&(rec.layer, e)))
            {
                return Err(Error::NotFound(format!("expert {e} of layer {} is not in storage", rec.layer)));
            }
            tokens += u64::from(tok);
            let state = pools.lookup_state(e);
            hits[state_slot(state)] += 1;
            let p = profile.expert_time(e, tok);
            if state == CompressionState::Full {
                resident.push((e, p));
            } else {
                tasks.extend(expert_tasks(rec.layer, e, state, p, tok, profile.n));
            }
        }
        let mixed = tasks.len() >= 2 && tasks.iter().any(|t| t.state != tasks[0].state);
        let (one, two) = partition_tasks(&tasks);
        let blocks = build_blocks_with(&one, &two, profile, config.io_model);
        let schedule = simulate_with(&blocks, profile, &resident, config.io_model)?;
        if schedule.makespan > schedule.sequential_sum + 1e-9 * (1.0 + schedule.sequential_sum) {
            return Err(Error::Internal(format!(
                "layer {} step {}: makespan {} exceeds sequential sum {}",
                rec.layer, rec.step, schedule.makespan, schedule.sequential_sum
            )));
        }
        let overlap_ratio = if schedule.sequential_sum > 0.0 {
            (1.0 - schedule.makespan / schedule.sequential_sum).max(0.0)
        } else {
            0.0
        };

        for &(e, tok) in &rec.experts {
            stats.record_activation(e, u64::from(tok.max(1)))?;
        }
        for &(e, _) in &rec.experts {
            pools.touch(e);
            pools.on_activation(e, stats)?;
        }
        observe(rec, &schedule, pools)?;

        steps.push(StepReport {
            layer: rec.layer,
            step: rec.step,
            makespan: schedule.makespan,
            charge: schedule.charge,
            io_busy: schedule.io_busy,
            sequential_sum: schedule.sequential_sum,
            overlap_ratio,
            hits,
            tasks: tasks.len(),
            mixed,
        });
    }

    let summary = summarize(&steps, tokens);
    Ok(SimulationReport { config: config.clone(), profile: profile.clone(), plan: plan.clone(), summary, steps })
}

fn summarize(steps: &[StepReport], tokens: u64) -> Summary {
    let mut sorted: Vec<f64> = steps.iter().map(|s| s.makespan).collect();
    sorted.sort_by(f64::total_cmp);
    let total: f64 = sorted.iter().sum();
    let io: f64 = steps.iter().map(|s| s.io_busy).sum();
    let seq: f64 = steps.iter().map(|s| s.sequential_sum).sum();
    let mut hist = BTreeMap::new();
    for s in steps {
        let [f, c, sm, e, m] = s.hits;
        *hist.entry(format!("F{f}C{c}S{sm}E{e}M{m}")).or_default() += 1;
    }
    let n = steps.len().max(1) as f64;
    Summary {
        steps: steps.len(),
        mean_makespan: total / n,
        p50: percentile(&sorted, 0.5),
        p90: percentile(&sorted, 0.9),
        p99: percentile(&sorted, 0.99),
        max_makespan: sorted.last().copied().unwrap_or(0.0),
        total_makespan: total,
        total_charge: steps.iter().map(|s| s.charge).sum(),
        io_busy_fraction: if total > 0.0 { io / total } else { 0.0 },
        overlap_ratio: if seq > 0.0 { (1.0 - total / seq).max(0.0) } else { 0.0 },
        tokens,
        hit_histogram: hist,
    }
}

/// One latency/throughput row of the eviction and planner ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub policy: EvictionPolicy,
    pub planner: bool,
    pub mean_makespan: f64,
    pub p99: f64,
    /// Tokens per simulated second.
    pub throughput: f64,
}

/// Runs every eviction policy with the planned layout and with a baseline
/// layout that spends the whole budget on full experts.
pub fn ablation(
    trace: &[TraceRecord],
    planned: &PoolPlan,
    baseline: &PoolPlan,
    profile: &ExecutionProfile,
    config: &SimulationConfig,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (planner, plan) in [(true, planned), (false, baseline)] {
        for policy in [EvictionPolicy::Frequency, EvictionPolicy::Fifo, EvictionPolicy::Lru, EvictionPolicy::Marking] {
            let cfg = SimulationConfig { policy, ..config.clone() };
            let r = run_simulation(trace, plan, profile, &cfg)?;
            let s = &r.summary;
            rows.push(AblationRow {
                policy,
                planner,
                mean_makespan: s.mean_makespan,
                p99: s.p99,
                throughput: if s.total_makespan > 0.0 { s.tokens as f64 / s.total_makespan } else { f64::INFINITY },
            });
        }
    }
    Ok(rows)
}

/// Full-expert-only layout using the same byte budget.
pub fn full_only_plan(budget: u64, num_experts: usize, profile: &ExecutionProfile) -> Result<PoolPlan> {
    let elements = profile.elements_per_tensor.ok_or_else(|| Error::invalid("profile lacks elements_per_tensor"))?;
    let bytes = crate::cache::Pool::F.expert_bytes(profile.n, elements, profile.rho);
    let cap = ((budget as f64 / bytes).floor() as usize).min(num_experts);
    let mut plan = PoolPlan::new([cap, 0, 0, 0], PoolPlan::default_delta(num_experts));
    plan.gamma = [1.0, 0.0, 0.0, 0.0];
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::trace::{gen_trace, TraceSpec};
    use crate::scheduler::schedule_tasks;

    fn profile() -> ExecutionProfile {
        ExecutionProfile::new(1.0, 0.3, 0.4, 2, 2, 2).with_p_default(0.5).with_elements_per_tensor(64)
    }

    #[test]
    fn all_full_is_pure_compute() {
        let trace = gen_trace(&TraceSpec::new(8, 2, 50, 1.0, 4)).unwrap();
        let plan = PoolPlan::new([8, 0, 0, 0], 0);
        let r = run_simulation(&trace, &plan, &profile(), &SimulationConfig::new(8)).unwrap();
        // the first sighting of each expert is a miss; afterwards everything is resident
        for s in r.steps.iter().filter(|s| s.hits[0] == 2) {
            assert!((s.makespan - 1.0).abs() < 1e-12);
            assert_eq!(s.io_busy, 0.0);
        }
        assert!(r.steps.iter().filter(|s| s.hits[0] == 2).count() > 40);
    }

    #[test]
    fn zero_budget_matches_all_miss_schedule() {
        let trace = gen_trace(&TraceSpec::new(8, 2, 20, 1.0, 5)).unwrap();
        let prof = profile();
        let r = run_simulation(&trace, &PoolPlan::empty(8), &prof, &SimulationConfig::new(8)).unwrap();
        for (rec, s) in trace.iter().zip(&r.steps) {
            assert_eq!(s.hits[4], rec.experts.len());
            let tasks: Vec<_> = rec
                .experts
                .iter()
                .flat_map(|&(e, t)| expert_tasks(0, e, CompressionState::Miss, prof.expert_time(e, t), t, prof.n))
                .collect();
            assert_eq!(s.makespan, schedule_tasks(&tasks, &prof).unwrap().makespan);
        }
    }

    #[test]
    fn mixed_steps_overlap() {
        let trace = gen_trace(&TraceSpec::new(16, 4, 200, 1.2, 6)).unwrap();
        let plan = PoolPlan::new([2, 2, 2, 4], 1);
        let r = run_simulation(&trace, &plan, &profile(), &SimulationConfig::new(16)).unwrap();
        let mixed: Vec<_> = r.steps.iter().filter(|s| s.mixed).collect();
        assert!(!mixed.is_empty());
        assert!(mixed.iter().all(|s| s.overlap_ratio > 0.0));
        assert_eq!(r.summary.hit_histogram.values().sum::<usize>(), r.steps.len());
        assert!(r.summary.p50 <= r.summary.p90 && r.summary.p90 <= r.summary.p99);
    }

    #[test]
    fn unknown_expert_is_not_found() {
        let trace = vec![TraceRecord { layer: 0, step: 0, experts: vec![(3, 1)] }];
        let mut cfg = SimulationConfig::new(8);
        cfg.available = Some([(0, 1)].into_iter().collect());
        let err = run_simulation(&trace, &PoolPlan::empty(8), &profile(), &cfg).unwrap_err();
        assert!(matches!(err, Error::NotFound(_)));
    }

    #[test]
    fn ablation_has_all_rows() {
        let trace = gen_trace(&TraceSpec::new(8, 2, 30, 1.0, 7)).unwrap();
        let prof = profile();
        let base = full_only_plan(1024, 8, &prof).unwrap();
        assert_eq!(base.capacities[0], 4);
        let rows = ablation(&trace, &PoolPlan::new([1, 1, 1, 2], 1), &base, &prof, &SimulationConfig::new(8)).unwrap();
        assert_eq!(rows.len(), 8);
        assert!(rows.iter().all(|r| r.throughput > 0.0));
    }

    #[test]
    fn percentiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.5), 2.0);
        assert_eq!(percentile(&v, 0.99), 4.0);
        assert_eq!(percentile(&[], 0.5), 0.0);
    }
}
