//! Deterministic list simulation of one I/O lane, `L` decompression workers,
//! a recovery stream and a serial expert-execution lane.
//!
//! The I/O lane runs reads back to back in the given order. Workers are
//! work-conserving: whenever a worker is free and a decompression is ready,
//! the highest-priority ready decompression starts on the lowest-index free
//! worker. Recovery and execution are serial lanes served in priority order
//! among ready items.

use serde::{Deserialize, Serialize};

use crate::profile::ExecutionProfile;
use crate::taskgraph::{ExpertTask, IoModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "lane", content = "index")]
pub enum Lane {
    Io,
    Worker(usize),
    Recovery,
    Exec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    ERead,
    SmRead,
    Decompress,
    EReadDecompress,
    Recover,
    Execute,
}

/// One I/O lane operation: an E-chunk or SM-chunk read of task `task`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IoOp {
    EChunk { task: usize, shard: usize },
    SmChunk { task: usize },
}

impl IoOp {
    pub fn task(self) -> usize {
        match self {
            IoOp::EChunk { task, .. } | IoOp::SmChunk { task } => task,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEntry {
    #[serde(flatten)]
    pub lane: Lane,
    pub op: OpKind,
    pub expert: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tensor: Option<u16>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shard: Option<usize>,
    pub start: f64,
    pub end: f64,
    /// Worker idle time right before a decompression.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub idle_before: Option<f64>,
    /// Part of `idle_before` that falls after the task's first E-chunk read began.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub charged: Option<f64>,
}

/// Raw outcome of one simulation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimOutcome {
    pub timeline: Vec<TimelineEntry>,
    pub makespan: f64,
    pub charge: f64,
    pub io_end: f64,
    pub io_busy: f64,
    /// Completion time of each worker's last op (0 when unused).
    pub worker_ends: Vec<f64>,
    pub worker_busy: Vec<f64>,
    /// Sum of every op duration.
    pub sequential_sum: f64,
}

#[inline]
fn le(a: f64, b: f64) -> bool {
    a <= b + 1e-12 * (1.0 + b.abs())
}

/// Serial non-delay list schedule: `items` are `(ready, duration)` in
/// priority order. Returns start times.
fn serial_list(items: &[(f64, f64)]) -> Vec<f64> {
    let mut starts = vec![f64::NAN; items.len()];
    let mut pending: Vec<usize> = (0..items.len()).collect();
    let mut free = 0.0f64;
    while !pending.is_empty() {
        let min_ready = pending.iter().map(|&i| items[i].0).fold(f64::INFINITY, f64::min);
        let t = free.max(min_ready);
        let pos = pending.iter().position(|&i| le(items[i].0, t)).unwrap();
        let i = pending.remove(pos);
        starts[i] = t;
        free = t + items[i].1;
    }
    starts
}

/// Runs the simulation.
///
/// `priority` lists task indices from highest to lowest priority and must be
/// a permutation of `0..tasks.len()`. `io_order` must contain every read the
/// tasks need under `model` exactly once. `resident` experts need no
/// reconstruction and are executable at time zero.
pub fn run(
    tasks: &[ExpertTask],
    io_order: &[IoOp],
    priority: &[usize],
    resident: &[(u32, f64)],
    profile: &ExecutionProfile,
    model: IoModel,
) -> SimOutcome {
    run_inner(tasks, io_order, priority, resident, profile, model, true)
}

/// Same as [`run`] without recording the timeline.
pub fn makespan(tasks: &[ExpertTask], io_order: &[IoOp], priority: &[usize], profile: &ExecutionProfile) -> f64 {
    run_inner(tasks, io_order, priority, &[], profile, IoModel::Separate, false).makespan
}

fn run_inner(
    tasks: &[ExpertTask],
    io_order: &[IoOp],
    priority: &[usize],
    resident: &[(u32, f64)],
    profile: &ExecutionProfile,
    model: IoModel,
    record: bool,
) -> SimOutcome {
    let k = profile.k;
    let lanes = profile.l;
    let v = profile.e_read();
    let mut out = SimOutcome { worker_ends: vec![0.0; lanes], worker_busy: vec![0.0; lanes], ..Default::default() };

    // I/O lane: reads have no predecessors, so they run back to back.
    let mut e_ready = vec![0.0f64; tasks.len() * k];
    let mut sm_ready = vec![0.0f64; tasks.len()];
    let mut e_first = vec![f64::NAN; tasks.len()];
    let mut t = 0.0;
    for &op in io_order {
        let (dur, kind, shard) = match op {
            IoOp::EChunk { shard, .. } => (v, OpKind::ERead, Some(shard)),
            IoOp::SmChunk { .. } => (profile.u, OpKind::SmRead, None),
        };
        let task = &tasks[op.task()];
        out.emit(
            record,
            TimelineEntry {
                lane: Lane::Io,
                op: kind,
                expert: task.key.expert_id,
                tensor: Some(task.key.tensor_index),
                shard,
                start: t,
                end: t + dur,
                idle_before: None,
                charged: None,
            },
        );
        t += dur;
        match op {
            IoOp::EChunk { task, shard } => {
                e_ready[task * k + shard] = t;
                if e_first[task].is_nan() {
                    e_first[task] = t - dur;
                }
            }
            IoOp::SmChunk { task } => sm_ready[task] = t,
        }
    }
    out.io_end = t;
    out.io_busy = t;

    // Decompression ops in priority order: (task, shard, ready, duration).
    let fused = model == IoModel::Consolidated;
    let mut pending: Vec<(usize, usize, f64, f64)> = Vec::with_capacity(tasks.len() * k);
    for &ti in priority {
        let e_io = tasks[ti].state.needs_e_io();
        for s in 0..k {
            let (ready, dur) = match (e_io, fused) {
                (true, false) => (e_ready[ti * k + s], profile.c),
                (true, true) => (0.0, v + profile.c),
                (false, _) => (0.0, profile.c),
            };
            pending.push((ti, s, ready, dur));
        }
    }
    let mut free = vec![0.0f64; lanes];
    let mut decomp_done = vec![0.0f64; tasks.len()];
    while !pending.is_empty() {
        let t_free = free.iter().copied().fold(f64::INFINITY, f64::min);
        let t_ready = pending.iter().map(|p| p.2).fold(f64::INFINITY, f64::min);
        let now = t_free.max(t_ready);
        let pos = pending.iter().position(|p| le(p.2, now)).unwrap();
        let (ti, s, _, dur) = pending.remove(pos);
        let w = free.iter().position(|&f| le(f, now)).unwrap();
        let idle = (now - free[w]).max(0.0);
        let charged = if e_first[ti].is_nan() { idle } else { idle.min(now - e_first[ti]).max(0.0) };
        free[w] = now + dur;
        out.worker_busy[w] += dur;
        out.charge += idle;
        decomp_done[ti] = decomp_done[ti].max(now + dur);
        let e_io = tasks[ti].state.needs_e_io();
        out.emit(
            record,
            TimelineEntry {
                lane: Lane::Worker(w),
                op: if fused && e_io { OpKind::EReadDecompress } else { OpKind::Decompress },
                expert: tasks[ti].key.expert_id,
                tensor: Some(tasks[ti].key.tensor_index),
                shard: Some(s),
                start: now,
                end: now + dur,
                idle_before: Some(idle),
                charged: Some(charged),
            },
        );
    }
    out.worker_ends = free;

    // Recovery stream.
    let rec_items: Vec<(f64, f64)> =
        priority.iter().map(|&ti| (sm_ready[ti].max(decomp_done[ti]), profile.recovery)).collect();
    let rec_starts = serial_list(&rec_items);
    let mut recovered = vec![0.0f64; tasks.len()];
    for (slot, &ti) in priority.iter().enumerate() {
        let start = rec_starts[slot];
        recovered[ti] = start + profile.recovery;
        out.emit(
            record,
            TimelineEntry {
                lane: Lane::Recovery,
                op: OpKind::Recover,
                expert: tasks[ti].key.expert_id,
                tensor: Some(tasks[ti].key.tensor_index),
                shard: None,
                start,
                end: start + profile.recovery,
                idle_before: None,
                charged: None,
            },
        );
    }

    // Execution lane: residents first, then experts by first appearance in priority.
    let mut experts: Vec<(u32, u32, f64, f64)> = resident.iter().map(|&(e, p)| (u32::MAX, e, 0.0, p)).collect();
    // (layer, expert, ready, p); residents carry a sentinel layer so they never merge with tasks.
    for &ti in priority {
        let key = tasks[ti].key;
        match experts.iter_mut().find(|x| x.0 == key.layer && x.1 == key.expert_id) {
            Some(x) => x.2 = x.2.max(recovered[ti]),
            None => experts.push((key.layer, key.expert_id, recovered[ti], tasks[ti].p)),
        }
    }
    let exec_items: Vec<(f64, f64)> = experts.iter().map(|x| (x.2, x.3)).collect();
    let exec_starts = serial_list(&exec_items);
    for (x, &start) in experts.iter().zip(&exec_starts) {
        out.emit(
            record,
            TimelineEntry {
                lane: Lane::Exec,
                op: OpKind::Execute,
                expert: x.1,
                tensor: None,
                shard: None,
                start,
                end: start + x.3,
                idle_before: None,
                charged: None,
            },
        );
    }

    out
}

impl SimOutcome {
    fn emit(&mut self, record: bool, entry: TimelineEntry) {
        self.makespan = self.makespan.max(entry.end);
        self.sequential_sum += entry.end - entry.start;
        if record {
            self.timeline.push(entry);
        }
    }
}

/// Reads each task needs, E-chunks first then SM-chunks, both in the given order.
pub fn e_first_io_order(tasks: &[ExpertTask], order: &[usize], k: usize, model: IoModel) -> Vec<IoOp> {
    let mut io = Vec::new();
    if model == IoModel::Separate {
        for &ti in order {
            if tasks[ti].state.needs_e_io() {
                io.extend((0..k).map(|shard| IoOp::EChunk { task: ti, shard }));
            }
        }
    }
    for &ti in order {
        if tasks[ti].state.needs_sm_io() {
            io.push(IoOp::SmChunk { task: ti });
        }
    }
    io
}
