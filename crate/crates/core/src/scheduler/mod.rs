//! Block construction, simulation, lower bounds and an exhaustive oracle.

mod blocks;
mod bounds;
pub mod engine;
mod oracle;

use serde::{Deserialize, Serialize};

pub use blocks::{build_blocks, build_blocks_with, is_compute_dominant, partition_tasks, priority_cmp};
pub use bounds::{lower_bounds, LowerBounds};
pub use engine::{IoOp, Lane, OpKind, TimelineEntry};
pub use oracle::{brute_force_opt, OracleLimits};

use crate::error::Result;
use crate::profile::ExecutionProfile;
use crate::taskgraph::{ExpertTask, IoModel};

/// Ordered tasks of one block plus the lane completion times of the block
/// simulated on its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub tasks: Vec<ExpertTask>,
    pub io_end: f64,
    pub worker_ends: Vec<f64>,
}

impl Block {
    pub fn new(tasks: Vec<ExpertTask>, profile: &ExecutionProfile, model: IoModel) -> Self {
        let out = simulate_tasks(&tasks, profile, model);
        Self { tasks, io_end: out.io_end, worker_ends: out.worker_ends }
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub blocks: Vec<Vec<String>>,
    pub timeline: Vec<TimelineEntry>,
    pub makespan: f64,
    /// Sum of worker idle gaps right before each decompression.
    pub charge: f64,
    pub idle_gaps: Vec<f64>,
    /// Per-op charge restricted to the window opened by the task's own E-chunk I/O.
    pub charged_gaps: Vec<f64>,
    pub io_busy: f64,
    pub worker_busy: Vec<f64>,
    pub sequential_sum: f64,
}

impl Schedule {
    /// Time during which the I/O lane and at least one worker are both busy.
    pub fn overlap(&self) -> f64 {
        let mut io: Vec<(f64, f64)> = Vec::new();
        let mut work: Vec<(f64, f64)> = Vec::new();
        for e in &self.timeline {
            if e.end <= e.start {
                continue;
            }
            match e.lane {
                Lane::Io => io.push((e.start, e.end)),
                Lane::Worker(_) => work.push((e.start, e.end)),
                _ => {}
            }
        }
        let io = merge(io);
        let work = merge(work);
        let (mut i, mut j, mut total) = (0, 0, 0.0);
        while i < io.len() && j < work.len() {
            let lo = io[i].0.max(work[j].0);
            let hi = io[i].1.min(work[j].1);
            if hi > lo {
                total += hi - lo;
            }
            if io[i].1 < work[j].1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        total
    }
}

fn merge(mut v: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(v.len());
    for (s, e) in v {
        match out.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

fn task_label(t: &ExpertTask) -> String {
    format!("L{}E{}T{}:{}", t.key.layer, t.key.expert_id, t.key.tensor_index, t.state.short_name())
}

/// Flattens blocks into the simulator's I/O order and priority list.
fn flatten(blocks: &[Block], k: usize, model: IoModel) -> (Vec<ExpertTask>, Vec<IoOp>, Vec<usize>) {
    let mut tasks = Vec::new();
    let mut io = Vec::new();
    for b in blocks {
        let base = tasks.len();
        tasks.extend(b.tasks.iter().cloned());
        let order: Vec<usize> = (base..tasks.len()).collect();
        io.extend(engine::e_first_io_order(&tasks, &order, k, model));
    }
    let priority = (0..tasks.len()).collect();
    (tasks, io, priority)
}

pub(crate) fn simulate_tasks(tasks: &[ExpertTask], profile: &ExecutionProfile, model: IoModel) -> engine::SimOutcome {
    let order: Vec<usize> = (0..tasks.len()).collect();
    let io = engine::e_first_io_order(tasks, &order, profile.k, model);
    engine::run(tasks, &io, &order, &[], profile, model)
}

/// Simulates blocks sequentially with the default I/O model and no resident experts.
pub fn simulate(blocks: &[Block], profile: &ExecutionProfile) -> Result<Schedule> {
    simulate_with(blocks, profile, &[], IoModel::Separate)
}

/// Simulates blocks; `resident` lists fully cached experts as `(expert_id, p)`.
pub fn simulate_with(
    blocks: &[Block],
    profile: &ExecutionProfile,
    resident: &[(u32, f64)],
    model: IoModel,
) -> Result<Schedule> {
    profile.validate()?;
    let (tasks, io, priority) = flatten(blocks, profile.k, model);
    let out = engine::run(&tasks, &io, &priority, resident, profile, model);
    let idle_gaps = out.timeline.iter().filter_map(|e| e.idle_before).collect();
    let charged_gaps = out.timeline.iter().filter_map(|e| e.charged).collect();
    Ok(Schedule {
        blocks: blocks.iter().map(|b| b.tasks.iter().map(task_label).collect()).collect(),
        timeline: out.timeline,
        makespan: out.makespan,
        charge: out.charge,
        idle_gaps,
        charged_gaps,
        io_busy: out.io_busy,
        worker_busy: out.worker_busy,
        sequential_sum: out.sequential_sum,
    })
}

/// Partitions, builds blocks and simulates in one call.
pub fn schedule_tasks(tasks: &[ExpertTask], profile: &ExecutionProfile) -> Result<Schedule> {
    profile.validate()?;
    let (one, two) = partition_tasks(tasks);
    let blocks = build_blocks(&one, &two, profile);
    simulate(&blocks, profile)
}
