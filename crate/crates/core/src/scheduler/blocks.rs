use std::cmp::Ordering;
use std::collections::VecDeque;

use super::{simulate_tasks, Block};
use crate::profile::ExecutionProfile;
use crate::taskgraph::{ExpertTask, IoModel};

const EPS: f64 = 1e-12;

/// Priority order: p descending, then layer, expert and tensor ascending.
pub fn priority_cmp(a: &ExpertTask, b: &ExpertTask) -> Ordering {
    b.p.total_cmp(&a.p)
        .then(a.key.layer.cmp(&b.key.layer))
        .then(a.key.expert_id.cmp(&b.key.expert_id))
        .then(a.key.tensor_index.cmp(&b.key.tensor_index))
}

/// Splits tasks into those that must load SM-chunks and the rest, each in
/// priority order.
pub fn partition_tasks(tasks: &[ExpertTask]) -> (Vec<ExpertTask>, Vec<ExpertTask>) {
    let (mut one, mut two): (Vec<_>, Vec<_>) = tasks.iter().cloned().partition(ExpertTask::is_type_one);
    one.sort_by(priority_cmp);
    two.sort_by(priority_cmp);
    (one, two)
}

pub fn build_blocks(sigma_one: &[ExpertTask], sigma_two: &[ExpertTask], profile: &ExecutionProfile) -> Vec<Block> {
    build_blocks_with(sigma_one, sigma_two, profile, IoModel::Separate)
}

pub fn build_blocks_with(
    sigma_one: &[ExpertTask],
    sigma_two: &[ExpertTask],
    profile: &ExecutionProfile,
    model: IoModel,
) -> Vec<Block> {
    let mut one: VecDeque<ExpertTask> = sigma_one.iter().cloned().collect();
    let mut two: VecDeque<ExpertTask> = sigma_two.iter().cloned().collect();
    let mut blocks = Vec::new();

    while let Some(base) = one.pop_front() {
        let mut block = vec![base];
        while !dominant(&block, profile, model) {
            let Some(next) = two.pop_front().or_else(|| one.pop_front()) else {
                break;
            };
            let pos = insertion_point(&block, &next, profile, model);
            block.insert(pos, next);
        }
        blocks.push(Block::new(block, profile, model));
    }
    if !two.is_empty() {
        blocks.push(Block::new(two.into_iter().collect(), profile, model));
    }
    blocks
}

fn charge(tasks: &[ExpertTask], profile: &ExecutionProfile, model: IoModel) -> f64 {
    simulate_tasks(tasks, profile, model).charge
}

/// Earliest position that adds no worker idle time, else the slot after the
/// last same-class task with at least the same p.
fn insertion_point(block: &[ExpertTask], task: &ExpertTask, profile: &ExecutionProfile, model: IoModel) -> usize {
    let base = charge(block, profile, model);
    let mut trial = Vec::with_capacity(block.len() + 1);
    for pos in 0..=block.len() {
        trial.clear();
        trial.extend_from_slice(&block[..pos]);
        trial.push(task.clone());
        trial.extend_from_slice(&block[pos..]);
        if charge(&trial, profile, model) <= base + EPS {
            return pos;
        }
    }
    let has_two = block.iter().any(|t| !t.is_type_one());
    block.iter().rposition(|t| t.is_type_one() != has_two && t.p >= task.p).map_or(block.len(), |i| i + 1)
}

fn dominant(tasks: &[ExpertTask], profile: &ExecutionProfile, model: IoModel) -> bool {
    let out = simulate_tasks(tasks, profile, model);
    dominance_check(out.io_end, &out.worker_ends, profile)
}

fn dominance_check(io_end: f64, worker_ends: &[f64], profile: &ExecutionProfile) -> bool {
    let mut ends = worker_ends.to_vec();
    ends.sort_by(f64::total_cmp);
    let step = profile.rho / profile.k as f64 * profile.u;
    (1..=profile.l.min(profile.k)).all(|l| ends[l - 1] - io_end >= l as f64 * step - EPS)
}

/// Whether decompression lags the I/O lane enough for every worker prefix.
pub fn is_compute_dominant(block: &Block, profile: &ExecutionProfile) -> bool {
    dominance_check(block.io_end, &block.worker_ends, profile)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::ExpertKey;
    use crate::taskgraph::CompressionState::{self, *};

    fn t(expert: u32, tensor: u16, state: CompressionState, p: f64) -> ExpertTask {
        ExpertTask::new(ExpertKey::new(0, expert, tensor), state, p)
    }

    fn keys(v: &[ExpertTask]) -> Vec<(u32, u16)> {
        v.iter().map(|t| (t.key.expert_id, t.key.tensor_index)).collect()
    }

    #[test]
    fn partition_by_sm_need() {
        let (one, two) = partition_tasks(&[t(0, 0, SmOnly, 1.0), t(1, 0, Miss, 1.0)]);
        assert_eq!(keys(&one), vec![(1, 0)]);
        assert_eq!(keys(&two), vec![(0, 0)]);
        let (one, _) = partition_tasks(&[t(0, 0, Compressed, 1.0)]);
        assert!(one.is_empty());
    }

    #[test]
    fn partition_groups_experts() {
        let q = [t(2, 1, Miss, 3.0), t(1, 1, Miss, 5.0), t(2, 0, Miss, 3.0), t(1, 0, Miss, 5.0)];
        let (one, _) = partition_tasks(&q);
        assert_eq!(keys(&one), vec![(1, 0), (1, 1), (2, 0), (2, 1)]);
    }

    fn prof() -> ExecutionProfile {
        ExecutionProfile::new(1.0, 0.3, 0.4, 2, 2, 1)
    }

    #[test]
    fn single_type_one_block() {
        let blocks = build_blocks(&[t(0, 0, Miss, 0.5)], &[], &prof());
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].len(), 1);
    }

    #[test]
    fn only_type_two_makes_one_block() {
        let two = [t(0, 0, Compressed, 0.9), t(1, 0, SmOnly, 0.5)];
        let blocks = build_blocks(&[], &two, &prof());
        assert_eq!(blocks.len(), 1);
        assert_eq!(keys(&blocks[0].tasks), vec![(0, 0), (1, 0)]);
    }

    #[test]
    fn io_bound_regime_is_one_block() {
        // c < rho*u: no block can become compute-dominant
        let p = ExecutionProfile::new(1.0, 0.1, 0.5, 2, 2, 1);
        let q: Vec<ExpertTask> =
            (0..6).map(|e| t(e, 0, [Miss, EOnly, SmOnly, Compressed][e as usize % 4], 1.0 - 0.1 * e as f64)).collect();
        let (one, two) = partition_tasks(&q);
        let blocks = build_blocks(&one, &two, &p);
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].len(), 6);
    }

    #[test]
    fn empty_input_no_blocks() {
        assert!(build_blocks(&[], &[], &prof()).is_empty());
    }

    #[test]
    fn dominance_examples() {
        let p = ExecutionProfile::new(1.0, 10.0, 1.0, 1, 1, 1);
        let b = Block::new(vec![t(0, 0, Compressed, 0.0)], &p, IoModel::Separate);
        assert_eq!(b.io_end, 0.0);
        assert!(is_compute_dominant(&b, &p));

        let b = Block { tasks: vec![], io_end: 0.0, worker_ends: vec![0.0] };
        assert!(!is_compute_dominant(&b, &p));

        let slow_io = ExecutionProfile::new(1.0, 0.2, 0.5, 2, 2, 1);
        let b = Block::new(vec![t(0, 0, Miss, 0.0)], &slow_io, IoModel::Separate);
        assert!(!is_compute_dominant(&b, &slow_io));
    }

    #[test]
    fn compute_heavy_blocks_split() {
        // decompression dwarfs I/O so each Type-I task closes its own block
        let p = ExecutionProfile::new(0.1, 5.0, 0.5, 2, 2, 1);
        let q = [t(0, 0, EOnly, 1.0), t(1, 0, EOnly, 0.5)];
        let (one, two) = partition_tasks(&q);
        let blocks = build_blocks(&one, &two, &p);
        assert_eq!(blocks.len(), 2);
        assert!(blocks.iter().all(|b| b.tasks[0].is_type_one()));
    }
}
