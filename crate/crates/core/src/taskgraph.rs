//! Compression states and the per-tensor reconstruction DAGs they induce.

use serde::{Deserialize, Serialize};

use crate::container::ExpertKey;
use crate::error::{Error, Result};
use crate::profile::ExecutionProfile;

/// Residency of one expert's tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CompressionState {
    /// Reconstructed tensors are cached.
    Full,
    /// Both SM-chunks and E-chunks are cached.
    Compressed,
    /// Only SM-chunks are cached.
    SmOnly,
    /// Only E-chunks are cached.
    EOnly,
    /// Nothing is cached.
    Miss,
}

impl CompressionState {
    pub const ALL: [CompressionState; 5] = [
        CompressionState::Full,
        CompressionState::Compressed,
        CompressionState::SmOnly,
        CompressionState::EOnly,
        CompressionState::Miss,
    ];

    /// SM-chunk has to come from storage (Type-I task).
    pub fn needs_sm_io(self) -> bool {
        matches!(self, CompressionState::Miss | CompressionState::EOnly)
    }

    /// E-chunks have to come from storage.
    pub fn needs_e_io(self) -> bool {
        matches!(self, CompressionState::Miss | CompressionState::SmOnly)
    }

    pub fn needs_reconstruction(self) -> bool {
        self != CompressionState::Full
    }

    pub fn short_name(self) -> &'static str {
        match self {
            CompressionState::Full => "F",
            CompressionState::Compressed => "C",
            CompressionState::SmOnly => "S",
            CompressionState::EOnly => "E",
            CompressionState::Miss => "M",
        }
    }
}

/// Where E-chunk reads execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IoModel {
    /// E-chunk reads are separate ops on the I/O lane.
    #[default]
    Separate,
    /// Each E-chunk read is fused with its decompression on a worker.
    Consolidated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    ERead,
    Decompress,
    EReadDecompress,
    SmRead,
    Recover,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DagNode {
    pub kind: NodeKind,
    pub shard_index: Option<usize>,
    pub cost: f64,
}

/// Operation DAG of one tensor reconstruction task. Edges are `(from, to)`
/// indices into `nodes`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskDag {
    pub nodes: Vec<DagNode>,
    pub edges: Vec<(usize, usize)>,
}

impl TaskDag {
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Topological order of the nodes, or an internal error if a cycle exists.
    pub fn topo_order(&self) -> Result<Vec<usize>> {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        for &(_, to) in &self.edges {
            indeg[to] += 1;
        }
        let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop() {
            order.push(i);
            for &(from, to) in &self.edges {
                if from == i {
                    indeg[to] -= 1;
                    if indeg[to] == 0 {
                        ready.push(to);
                    }
                }
            }
        }
        if order.len() != n {
            return Err(Error::Internal("reconstruction DAG has a cycle".into()));
        }
        Ok(order)
    }

    /// Nodes without outgoing edges.
    pub fn sinks(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| !self.edges.iter().any(|&(from, _)| from == i)).collect()
    }

    pub fn count(&self, kind: NodeKind) -> usize {
        self.nodes.iter().filter(|n| n.kind == kind).count()
    }
}

/// Topology of a tensor task: one consolidated read+decompress node per
/// shard when E-chunks come from storage, plain decompress nodes when they
/// are cached, one SM read when the SM-chunk is not cached, and a final
/// recovery node. Costs are zero; see [`costed_dag`].
pub fn build_dag(state: CompressionState, k: usize) -> TaskDag {
    let shard_kind = if state.needs_e_io() { NodeKind::EReadDecompress } else { NodeKind::Decompress };
    assemble(state, k, |_| vec![(shard_kind, 0.0)], 0.0, 0.0)
}

/// Op-level DAG with costs from `profile`. Under [`IoModel::Separate`] an
/// E-chunk read is its own node feeding the decompress node.
pub fn costed_dag(state: CompressionState, profile: &ExecutionProfile, model: IoModel) -> TaskDag {
    let v = profile.e_read();
    let c = profile.c;
    let e_io = state.needs_e_io();
    assemble(
        state,
        profile.k,
        |_| match (e_io, model) {
            (true, IoModel::Separate) => vec![(NodeKind::ERead, v), (NodeKind::Decompress, c)],
            (true, IoModel::Consolidated) => vec![(NodeKind::EReadDecompress, v + c)],
            (false, _) => vec![(NodeKind::Decompress, c)],
        },
        profile.u,
        profile.recovery,
    )
}

fn assemble(
    state: CompressionState,
    k: usize,
    shard_chain: impl Fn(usize) -> Vec<(NodeKind, f64)>,
    sm_cost: f64,
    recover_cost: f64,
) -> TaskDag {
    let mut dag = TaskDag::default();
    if !state.needs_reconstruction() {
        return dag;
    }
    let mut tails = Vec::new();
    for s in 0..k {
        let mut prev = None;
        for (kind, cost) in shard_chain(s) {
            let id = dag.nodes.len();
            dag.nodes.push(DagNode { kind, shard_index: Some(s), cost });
            if let Some(p) = prev {
                dag.edges.push((p, id));
            }
            prev = Some(id);
        }
        tails.extend(prev);
    }
    if state.needs_sm_io() {
        tails.push(dag.nodes.len());
        dag.nodes.push(DagNode { kind: NodeKind::SmRead, shard_index: None, cost: sm_cost });
    }
    let recover = dag.nodes.len();
    dag.nodes.push(DagNode { kind: NodeKind::Recover, shard_index: None, cost: recover_cost });
    dag.edges.extend(tails.into_iter().map(|t| (t, recover)));
    dag
}

/// One tensor reconstruction job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertTask {
    pub key: ExpertKey,
    pub state: CompressionState,
    /// Execution time of the owning expert, shared by all of its tensors.
    pub p: f64,
    pub token_count: u32,
}

impl ExpertTask {
    pub fn new(key: ExpertKey, state: CompressionState, p: f64) -> Self {
        Self { key, state, p, token_count: 0 }
    }

    pub fn expert_id(&self) -> u32 {
        self.key.expert_id
    }

    pub fn is_type_one(&self) -> bool {
        self.state.needs_sm_io()
    }
}

/// Builds the tasks of one expert: one per tensor, all sharing state and `p`.
/// Full experts produce no tasks.
pub fn expert_tasks(
    layer: u32,
    expert_id: u32,
    state: CompressionState,
    p: f64,
    tokens: u32,
    n: usize,
) -> Vec<ExpertTask> {
    if !state.needs_reconstruction() {
        return Vec::new();
    }
    (0..n)
        .map(|t| ExpertTask { key: ExpertKey::new(layer, expert_id, t as u16), state, p, token_count: tokens })
        .collect()
}

/// Storage I/O seconds needed by one tensor in `state`.
pub fn io_workload(state: CompressionState, profile: &ExecutionProfile) -> f64 {
    let sm = if state.needs_sm_io() { profile.u } else { 0.0 };
    let e = if state.needs_e_io() { profile.k as f64 * profile.e_read() } else { 0.0 };
    sm + e
}

/// Least completion time of a single task run alone on one I/O lane and
/// `min(K, L)` workers, including the expert's execution time.
///
/// Under the separate I/O model the shards are read in index order and the
/// SM read may sit anywhere among them; the best position is taken.
/// Decompressions of equal length are list-scheduled in release order, which
/// is optimal for identical jobs on identical workers.
pub fn critical_path(state: CompressionState, p: f64, profile: &ExecutionProfile, model: IoModel) -> f64 {
    if !state.needs_reconstruction() {
        return p;
    }
    let k = profile.k;
    let workers = k.min(profile.l).max(1);
    let u = if state.needs_sm_io() { profile.u } else { 0.0 };
    let best = match (model, state.needs_e_io()) {
        (IoModel::Consolidated, e_io) => {
            let op = profile.c + if e_io { profile.e_read() } else { 0.0 };
            let rounds = k.div_ceil(workers) as f64;
            u.max(rounds * op)
        }
        (IoModel::Separate, false) => u.max(greedy_finish(&vec![0.0; k], workers, profile.c)),
        (IoModel::Separate, true) => {
            let v = profile.e_read();
            (0..=k)
                .map(|sm_after| {
                    let mut t = 0.0;
                    let mut releases = Vec::with_capacity(k);
                    let mut sm_end = 0.0;
                    for s in 0..=k {
                        if s == sm_after && u > 0.0 {
                            t += u;
                            sm_end = t;
                        }
                        if s < k {
                            t += v;
                            releases.push(t);
                        }
                    }
                    sm_end.max(greedy_finish(&releases, workers, profile.c))
                })
                .fold(f64::INFINITY, f64::min)
        }
    };
    best + profile.recovery + p
}

/// Closed-form critical path `rho*u*[E io] + max(K*c/min(K,L), u*[SM io]) + p`.
/// Equals [`critical_path`] under the separate model whenever `L >= K` or
/// no E-chunk is read from storage; otherwise it can exceed the true least time.
pub fn critical_path_closed_form(state: CompressionState, p: f64, profile: &ExecutionProfile) -> f64 {
    if !state.needs_reconstruction() {
        return p;
    }
    let k = profile.k as f64;
    let e = if state.needs_e_io() { k * profile.e_read() } else { 0.0 };
    let sm = if state.needs_sm_io() { profile.u } else { 0.0 };
    let decomp = k * profile.c / profile.k.min(profile.l) as f64;
    e + decomp.max(sm) + profile.recovery + p
}

/// Makespan of equal-length jobs released at sorted times on `workers` machines.
fn greedy_finish(releases: &[f64], workers: usize, len: f64) -> f64 {
    let mut free = vec![0.0f64; workers];
    let mut end = 0.0f64;
    for &r in releases {
        let (i, _) = free.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        let start = free[i].max(r);
        free[i] = start + len;
        end = end.max(free[i]);
    }
    end
}

#[cfg(test)]
mod tests {
    use super::*;
    use CompressionState::*;

    fn profile() -> ExecutionProfile {
        ExecutionProfile::new(1.0, 0.3, 0.4, 2, 2, 1)
    }

    #[test]
    fn miss_dag_shape() {
        let dag = build_dag(Miss, 2);
        assert_eq!(dag.nodes.len(), 4);
        assert_eq!(dag.count(NodeKind::EReadDecompress), 2);
        assert_eq!(dag.count(NodeKind::SmRead), 1);
        let recover = dag.nodes.iter().position(|n| n.kind == NodeKind::Recover).unwrap();
        assert_eq!(dag.edges.iter().filter(|e| e.1 == recover).count(), 3);
    }

    #[test]
    fn full_and_compressed_dags() {
        assert!(build_dag(Full, 8).is_empty());
        let dag = build_dag(Compressed, 3);
        assert_eq!(dag.count(NodeKind::Decompress), 3);
        assert_eq!(dag.count(NodeKind::SmRead) + dag.count(NodeKind::ERead) + dag.count(NodeKind::EReadDecompress), 0);
        let e = build_dag(EOnly, 2);
        assert_eq!((e.count(NodeKind::Decompress), e.count(NodeKind::SmRead)), (2, 1));
        let s = build_dag(SmOnly, 2);
        assert_eq!((s.count(NodeKind::EReadDecompress), s.count(NodeKind::SmRead)), (2, 0));
    }

    #[test]
    fn dags_are_acyclic_with_unique_recover_sink() {
        let p = profile();
        for state in CompressionState::ALL {
            for k in 1..5 {
                let dags = [
                    build_dag(state, k),
                    costed_dag(state, &ExecutionProfile { k, ..p.clone() }, IoModel::Separate),
                    costed_dag(state, &ExecutionProfile { k, ..p.clone() }, IoModel::Consolidated),
                ];
                for dag in dags {
                    assert_eq!(dag.topo_order().unwrap().len(), dag.nodes.len());
                    if !dag.is_empty() {
                        let sinks = dag.sinks();
                        assert_eq!(sinks.len(), 1);
                        assert_eq!(dag.nodes[sinks[0]].kind, NodeKind::Recover);
                    }
                }
            }
        }
    }

    #[test]
    fn cycle_is_reported() {
        let mut dag = build_dag(Miss, 1);
        dag.edges.push((2, 0));
        assert!(matches!(dag.topo_order(), Err(Error::Internal(_))));
    }

    #[test]
    fn separate_model_splits_reads() {
        let dag = costed_dag(Miss, &profile(), IoModel::Separate);
        assert_eq!(dag.count(NodeKind::ERead), 2);
        assert_eq!(dag.count(NodeKind::Decompress), 2);
        let io: f64 =
            dag.nodes.iter().filter(|n| matches!(n.kind, NodeKind::ERead | NodeKind::SmRead)).map(|n| n.cost).sum();
        assert!((io - io_workload(Miss, &profile())).abs() < 1e-12);
    }

    #[test]
    fn io_workload_examples() {
        let p = profile();
        assert!((io_workload(Miss, &p) - 1.4).abs() < 1e-12);
        assert_eq!(io_workload(Compressed, &p), 0.0);
        assert!((io_workload(SmOnly, &p) - 0.4).abs() < 1e-12);
        assert_eq!(io_workload(EOnly, &p), 1.0);
        assert_eq!(io_workload(Full, &p), 0.0);
    }

    #[test]
    fn critical_path_examples() {
        let p = profile();
        assert!((critical_path(Miss, 0.5, &p, IoModel::Separate) - 1.9).abs() < 1e-12);
        assert!((critical_path(EOnly, 0.5, &p, IoModel::Separate) - 1.5).abs() < 1e-12);
        assert!((critical_path(Compressed, 0.0, &p, IoModel::Separate) - 0.3).abs() < 1e-12);
        assert!((critical_path_closed_form(Miss, 0.5, &p) - 1.9).abs() < 1e-12);
    }

    #[test]
    fn closed_form_agrees_when_workers_cover_shards() {
        for state in CompressionState::ALL {
            for (k, l) in [(1, 1), (1, 2), (2, 2), (2, 4), (3, 3)] {
                for c in [0.05, 0.3, 1.0] {
                    let p = ExecutionProfile { k, l, c, ..profile() };
                    let a = critical_path(state, 0.2, &p, IoModel::Separate);
                    let b = critical_path_closed_form(state, 0.2, &p);
                    assert!((a - b).abs() < 1e-12, "{state:?} k={k} l={l} c={c}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn closed_form_overestimates_with_few_workers() {
        let p = ExecutionProfile { c: 0.6, l: 1, ..profile() };
        let exact = critical_path(Miss, 0.0, &p, IoModel::Separate);
        assert!((exact - 1.4).abs() < 1e-12);
        assert!(critical_path_closed_form(Miss, 0.0, &p) > exact + 0.1);
    }

    #[test]
    fn expert_tasks_share_state() {
        let tasks = expert_tasks(0, 7, EOnly, 0.4, 3, 3);
        assert_eq!(tasks.len(), 3);
        assert!(tasks.iter().all(|t| t.state == EOnly && t.p == 0.4 && t.expert_id() == 7));
        assert!(expert_tasks(0, 7, Full, 0.4, 3, 3).is_empty());
    }
}
