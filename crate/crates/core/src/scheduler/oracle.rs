//! Exhaustive search for the optimal makespan of small instances.
//!
//! A schedule is an I/O order plus a worker priority list; the simulator then
//! runs it work-conserving. The search enumerates every I/O order (up to
//! relabelling of identical tasks and of shards within a task) and every
//! priority list, pruning I/O prefixes whose lower bound cannot beat the
//! incumbent.

use super::bounds::lower_bounds;
use super::engine::{self, IoOp};
use crate::error::{Error, Result};
use crate::profile::ExecutionProfile;
use crate::taskgraph::{ExpertTask, IoModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleLimits {
    pub max_tasks: usize,
    pub max_k: usize,
    pub max_l: usize,
}

impl Default for OracleLimits {
    fn default() -> Self {
        Self { max_tasks: 4, max_k: 2, max_l: 2 }
    }
}

/// Minimum makespan over all priority-list schedules of `tasks`.
pub fn brute_force_opt(tasks: &[ExpertTask], profile: &ExecutionProfile, limits: OracleLimits) -> Result<f64> {
    profile.validate()?;
    if tasks.len() > limits.max_tasks || profile.k > limits.max_k || profile.l > limits.max_l {
        return Err(Error::TooLarge(format!(
            "{} tasks, K={}, L={} exceeds limits {:?}",
            tasks.len(),
            profile.k,
            profile.l,
            limits
        )));
    }
    if tasks.is_empty() {
        return Ok(0.0);
    }
    let mut search = Search::new(tasks, profile, true);
    search.dfs();
    let lb = lower_bounds(tasks, profile).max();
    if search.best < lb - 1e-9 * (1.0 + lb) {
        return Err(Error::Internal(format!("oracle value {} below lower bound {lb}", search.best)));
    }
    Ok(search.best)
}

struct Search<'a> {
    tasks: &'a [ExpertTask],
    profile: &'a ExecutionProfile,
    perms: Vec<Vec<usize>>,
    /// Index of the previous task interchangeable with this one.
    twin_of: Vec<Option<usize>>,
    /// Task index to expert slot.
    expert_of: Vec<usize>,
    expert_p: Vec<f64>,
    // mutable DFS state
    order: Vec<IoOp>,
    shards_read: Vec<usize>,
    sm_read: Vec<bool>,
    e_end: Vec<f64>,
    sm_end: Vec<f64>,
    total_ops: usize,
    best: f64,
    static_lb: f64,
    prune: bool,
}

impl<'a> Search<'a> {
    fn new(tasks: &'a [ExpertTask], profile: &'a ExecutionProfile, prune: bool) -> Self {
        let n = tasks.len();
        let mut expert_keys: Vec<(u32, u32)> = Vec::new();
        let mut expert_of = Vec::with_capacity(n);
        let mut expert_p = Vec::new();
        for t in tasks {
            let key = (t.key.layer, t.key.expert_id);
            let slot = match expert_keys.iter().position(|&k| k == key) {
                Some(s) => s,
                None => {
                    expert_keys.push(key);
                    expert_p.push(t.p);
                    expert_keys.len() - 1
                }
            };
            expert_of.push(slot);
        }
        let group_size = |slot: usize| expert_of.iter().filter(|&&s| s == slot).count();
        let twin_of = (0..n)
            .map(|j| {
                (0..j).rev().find(|&i| {
                    tasks[i].state == tasks[j].state
                        && (expert_of[i] == expert_of[j]
                            || (group_size(expert_of[i]) == 1
                                && group_size(expert_of[j]) == 1
                                && tasks[i].p.to_bits() == tasks[j].p.to_bits()))
                })
            })
            .collect();
        let total_ops = tasks
            .iter()
            .map(|t| usize::from(t.state.needs_sm_io()) + if t.state.needs_e_io() { profile.k } else { 0 })
            .sum();

        let mut by_priority: Vec<usize> = (0..n).collect();
        by_priority.sort_by(|&a, &b| super::priority_cmp(&tasks[a], &tasks[b]));
        let io = engine::e_first_io_order(tasks, &by_priority, profile.k, IoModel::Separate);
        let best = engine::makespan(tasks, &io, &by_priority, profile);

        Self {
            tasks,
            profile,
            perms: permutations(n),
            twin_of,
            expert_of,
            expert_p,
            order: Vec::with_capacity(total_ops),
            shards_read: vec![0; n],
            sm_read: vec![false; n],
            e_end: vec![0.0; n * profile.k],
            sm_end: vec![0.0; n],
            total_ops,
            best,
            static_lb: lower_bounds(tasks, profile).max(),
            prune,
        }
    }

    fn started(&self, j: usize) -> bool {
        self.shards_read[j] > 0 || self.sm_read[j]
    }

    fn dfs(&mut self) {
        let now = self.now();
        if self.prune && (self.best <= self.static_lb + 1e-12 || self.prefix_bound(now) >= self.best - 1e-12) {
            return;
        }
        if self.order.len() == self.total_ops {
            for perm in &self.perms {
                let m = engine::makespan(self.tasks, &self.order, perm, self.profile);
                if m < self.best {
                    self.best = m;
                }
            }
            return;
        }
        let k = self.profile.k;
        let v = self.profile.e_read();
        for j in 0..self.tasks.len() {
            if !self.started(j) {
                if let Some(i) = self.twin_of[j] {
                    if !self.started(i) {
                        continue;
                    }
                }
            }
            let state = self.tasks[j].state;
            if state.needs_e_io() && self.shards_read[j] < k {
                let shard = self.shards_read[j];
                self.order.push(IoOp::EChunk { task: j, shard });
                self.shards_read[j] += 1;
                self.e_end[j * k + shard] = now + v;
                self.dfs();
                self.shards_read[j] -= 1;
                self.order.pop();
            }
            if state.needs_sm_io() && !self.sm_read[j] {
                self.order.push(IoOp::SmChunk { task: j });
                self.sm_read[j] = true;
                self.sm_end[j] = now + self.profile.u;
                self.dfs();
                self.sm_read[j] = false;
                self.order.pop();
            }
        }
    }

    fn now(&self) -> f64 {
        let v = self.profile.e_read();
        self.order
            .iter()
            .map(|op| match op {
                IoOp::EChunk { .. } => v,
                IoOp::SmChunk { .. } => self.profile.u,
            })
            .sum()
    }

    /// Lower bound on any completion of the current I/O prefix.
    fn prefix_bound(&self, now: f64) -> f64 {
        let p = self.profile;
        let k = p.k;
        let v = p.e_read();
        let mut release = vec![0.0f64; self.expert_p.len()];
        let mut remaining_io = 0.0;
        // whichever task owns the last read still has to run its expert afterwards
        let mut tail = f64::INFINITY;
        for (j, t) in self.tasks.iter().enumerate() {
            let pending_sm = t.state.needs_sm_io() && !self.sm_read[j];
            let pending_e = t.state.needs_e_io() && self.shards_read[j] < k;
            if pending_sm || pending_e {
                let after = if pending_e && !pending_sm { p.c } else { 0.0 };
                tail = tail.min(after + p.recovery + self.expert_p[self.expert_of[j]]);
            }
            let mut ready = p.c;
            if t.state.needs_sm_io() {
                if self.sm_read[j] {
                    ready = ready.max(self.sm_end[j]);
                } else {
                    ready = ready.max(now + p.u);
                    remaining_io += p.u;
                }
            }
            if t.state.needs_e_io() {
                let done = self.shards_read[j];
                for s in 0..done {
                    ready = ready.max(self.e_end[j * k + s] + p.c);
                }
                if done < k {
                    ready = ready.max(now + (k - done) as f64 * v + p.c);
                    remaining_io += (k - done) as f64 * v;
                }
            }
            let slot = self.expert_of[j];
            release[slot] = release[slot].max(ready + p.recovery);
        }
        let mut experts: Vec<(f64, f64)> = release.into_iter().zip(self.expert_p.iter().copied()).collect();
        experts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let exec_end = experts.iter().fold(0.0f64, |t, &(r, p)| t.max(r) + p);
        let io_end = if tail.is_finite() { now + remaining_io + tail } else { now };
        exec_end.max(io_end).max(self.worker_bound(now))
    }

    /// Parallel-machine bound on the decompressions given their earliest releases.
    fn worker_bound(&self, now: f64) -> f64 {
        let p = self.profile;
        let k = p.k;
        let v = p.e_read();
        let mut releases = Vec::with_capacity(self.tasks.len() * k);
        let mut unread = 0usize;
        for (j, t) in self.tasks.iter().enumerate() {
            if t.state.needs_e_io() {
                let done = self.shards_read[j];
                releases.extend((0..done).map(|s| self.e_end[j * k + s]));
                unread += k - done;
            } else {
                releases.extend(std::iter::repeat(0.0).take(k));
            }
        }
        releases.extend((1..=unread).map(|i| now + i as f64 * v));
        releases.sort_by(|a, b| b.total_cmp(a));
        let tail = self.expert_p.iter().copied().fold(f64::INFINITY, f64::min) + p.recovery;
        let lanes = p.l as f64;
        releases.iter().enumerate().map(|(i, &r)| r + ((i + 1) as f64 / lanes).ceil() * p.c).fold(0.0, f64::max) + tail
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::ExpertKey;
    use crate::scheduler::schedule_tasks;
    use crate::taskgraph::{critical_path, CompressionState::*};

    fn prof() -> ExecutionProfile {
        ExecutionProfile::new(1.0, 0.3, 0.4, 2, 2, 1)
    }

    #[test]
    fn single_task_equals_critical_path() {
        let p = prof();
        for state in [Miss, Compressed, SmOnly, EOnly] {
            let q = [ExpertTask::new(ExpertKey::new(0, 0, 0), state, 0.5)];
            let opt = brute_force_opt(&q, &p, OracleLimits::default()).unwrap();
            let z = critical_path(state, 0.5, &p, IoModel::Separate);
            assert!((opt - z).abs() < 1e-12, "{state:?}: {opt} vs {z}");
        }
    }

    #[test]
    fn sandwich_on_example() {
        let p = prof();
        let q =
            [ExpertTask::new(ExpertKey::new(0, 0, 0), Miss, 0.5), ExpertTask::new(ExpertKey::new(0, 1, 0), EOnly, 0.5)];
        let opt = brute_force_opt(&q, &p, OracleLimits::default()).unwrap();
        let alg = schedule_tasks(&q, &p).unwrap().makespan;
        assert!(opt >= 2.4 - 1e-12);
        assert!(opt <= alg + 1e-12);
    }

    #[test]
    fn too_large_rejected() {
        let q: Vec<ExpertTask> = (0..5).map(|e| ExpertTask::new(ExpertKey::new(0, e, 0), Miss, 0.1)).collect();
        assert!(matches!(brute_force_opt(&q, &prof(), OracleLimits::default()), Err(Error::TooLarge(_))));
        let wide = ExecutionProfile::new(1.0, 0.3, 0.4, 4, 2, 1);
        assert!(matches!(brute_force_opt(&q[..1], &wide, OracleLimits::default()), Err(Error::TooLarge(_))));
    }

    #[test]
    fn empty_is_zero() {
        assert_eq!(brute_force_opt(&[], &prof(), OracleLimits::default()).unwrap(), 0.0);
    }

    proptest::proptest! {
        #[test]
        fn pruning_keeps_the_optimum(
            states in proptest::collection::vec(0usize..4, 1..4),
            ps in proptest::collection::vec(0.0f64..1.5, 3),
            same_expert in proptest::bool::ANY,
            (u, c, rho, k, l) in (0.2f64..2.0, 0.05f64..1.5, 0.1f64..1.0, 1usize..3, 1usize..3),
        ) {
            let all = [Miss, Compressed, SmOnly, EOnly];
            let q: Vec<ExpertTask> = states
                .iter()
                .enumerate()
                .map(|(i, &s)| {
                    let e = if same_expert && i < 2 { 0 } else { i as u32 };
                    ExpertTask::new(ExpertKey::new(0, e, i as u16), all[s], ps[e as usize])
                })
                .collect();
            let p = ExecutionProfile::new(u, c, rho, k, l, 2);
            let fast = brute_force_opt(&q, &p, OracleLimits::default()).unwrap();
            let mut full = Search::new(&q, &p, false);
            full.dfs();
            proptest::prop_assert!((fast - full.best).abs() < 1e-9, "{} vs {}", fast, full.best);
        }
    }

    #[test]
    fn permutation_count() {
        assert_eq!(permutations(4).len(), 24);
        assert_eq!(permutations(0), vec![Vec::<usize>::new()]);
    }
}
