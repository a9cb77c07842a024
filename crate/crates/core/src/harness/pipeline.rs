//! Threaded pipeline: one reader thread and `L` decompression workers
//! reconstructing tensors straight from a container file.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::codec::{decompress_chunk, recompose, Bf16Buffer, EChunk, SmChunk};
use crate::container::{Container, ExpertKey};
use crate::error::{Error, Result};
use crate::profile::ExecutionProfile;
use crate::scheduler::{build_blocks, partition_tasks};
use crate::taskgraph::{expert_tasks, CompressionState, IoModel};

pub const WATCHDOG: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineOptions {
    pub workers: usize,
    pub mode: IoModel,
    pub watchdog: Duration,
}

impl PipelineOptions {
    pub fn new(workers: usize, mode: IoModel) -> Self {
        Self { workers, mode, watchdog: WATCHDOG }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub workers: usize,
    pub mode: IoModel,
    pub tensors: usize,
    pub wall_clock: f64,
    pub reader_busy: f64,
    pub worker_busy: Vec<f64>,
    pub bit_exact: bool,
}

struct Job {
    rank: usize,
    shard: usize,
    chunk: Option<EChunk>,
}

impl Job {
    fn key(&self) -> Reverse<(usize, usize)> {
        Reverse((self.rank, self.shard))
    }
}

impl PartialEq for Job {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for Job {}
impl PartialOrd for Job {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Job {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

/// Priority queue shared by the reader and the workers.
struct ReadyQueue {
    state: Mutex<(BinaryHeap<Job>, bool)>,
    ready: Condvar,
}

impl ReadyQueue {
    fn new() -> Self {
        Self { state: Mutex::new((BinaryHeap::new(), false)), ready: Condvar::new() }
    }

    fn push(&self, job: Job) {
        self.state.lock().unwrap().0.push(job);
        self.ready.notify_one();
    }

    fn close(&self) {
        self.state.lock().unwrap().1 = true;
        self.ready.notify_all();
    }

    /// Highest-priority job, or `None` once closed and drained.
    fn pop(&self) -> Option<Job> {
        let mut g = self.state.lock().unwrap();
        loop {
            if let Some(job) = g.0.pop() {
                return Some(job);
            }
            if g.1 {
                return None;
            }
            g = self.ready.wait(g).unwrap();
        }
    }
}

struct Slot {
    sm: Option<SmChunk>,
    shards: Vec<Option<Vec<u8>>>,
    missing: usize,
}

type Done = mpsc::Sender<(usize, Result<Bf16Buffer>)>;

/// Stores one piece; whoever delivers the last piece recomposes the tensor.
fn deliver(slots: &[Mutex<Slot>], rank: usize, piece: std::result::Result<SmChunk, (usize, Vec<u8>)>, done: &Done) {
    let finished = {
        let mut slot = slots[rank].lock().unwrap();
        match piece {
            Ok(sm) => slot.sm = Some(sm),
            Err((shard, bytes)) => slot.shards[shard] = Some(bytes),
        }
        slot.missing -= 1;
        if slot.missing == 0 {
            let sm = slot.sm.take().expect("SM delivered");
            let exp: Vec<u8> = slot.shards.iter_mut().flat_map(|s| s.take().expect("shard delivered")).collect();
            Some((sm, exp))
        } else {
            None
        }
    };
    if let Some((sm, exp)) = finished {
        let _ = done.send((rank, recompose(&sm, &exp)));
    }
}

/// Reconstructs every tensor of `experts` with real threads and checks the
/// result against `reference`, or against a single-threaded read when absent.
pub fn pipeline_bench(
    container: &Container,
    experts: &[(u32, u32)],
    profile: &ExecutionProfile,
    options: PipelineOptions,
    reference: Option<&BTreeMap<ExpertKey, Bf16Buffer>>,
) -> Result<PipelineReport> {
    if options.workers == 0 {
        return Err(Error::invalid("pipeline needs at least one worker"));
    }
    for &(layer, e) in experts {
        if !container.contains_expert(layer, e) {
            return Err(Error::NotFound(format!("expert {e} of layer {layer}")));
        }
    }
    let k = container.k();
    let mut prof = profile.clone();
    prof.k = k;
    prof.n = container.tensors_per_expert();
    prof.l = options.workers;
    prof.validate()?;

    // schedule order: block-by-block, E-chunks before SM-chunks, task priority within
    let mut tasks = Vec::new();
    for &(layer, e) in experts {
        tasks.extend(expert_tasks(layer, e, CompressionState::Miss, prof.expert_time(e, 1), 1, prof.n));
    }
    let (one, two) = partition_tasks(&tasks);
    let blocks = build_blocks(&one, &two, &prof);
    let ordered: Vec<ExpertKey> = blocks.iter().flat_map(|b| b.tasks.iter().map(|t| t.key)).collect();
    let ranges: Vec<std::ops::Range<usize>> = {
        let mut start = 0;
        blocks
            .iter()
            .map(|b| {
                let r = start..start + b.len();
                start = r.end;
                r
            })
            .collect()
    };

    let slots: Vec<Mutex<Slot>> =
        ordered.iter().map(|_| Mutex::new(Slot { sm: None, shards: vec![None; k], missing: k + 1 })).collect();
    let queue = ReadyQueue::new();
    let cancel = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel();
    let fused = options.mode == IoModel::Consolidated;

    let start = Instant::now();
    let (outcome, reader_busy, worker_busy) = std::thread::scope(|scope| {
        let reader = {
            let (queue, slots, cancel, ordered, ranges, tx) = (&queue, &slots, &cancel, &ordered, &ranges, tx.clone());
            scope.spawn(move || -> f64 {
                let mut busy = Duration::ZERO;
                if fused {
                    for rank in 0..ordered.len() {
                        for shard in 0..k {
                            queue.push(Job { rank, shard, chunk: None });
                        }
                    }
                }
                'blocks: for range in ranges {
                    if !fused {
                        for rank in range.clone() {
                            for shard in 0..k {
                                if cancel.load(Ordering::Relaxed) {
                                    break 'blocks;
                                }
                                let t = Instant::now();
                                let chunk = container.read_echunk(ordered[rank], shard);
                                busy += t.elapsed();
                                match chunk {
                                    Ok(c) => queue.push(Job { rank, shard, chunk: Some(c) }),
                                    Err(e) => {
                                        let _ = tx.send((rank, Err(e)));
                                        break 'blocks;
                                    }
                                }
                            }
                        }
                    }
                    for rank in range.clone() {
                        if cancel.load(Ordering::Relaxed) {
                            break 'blocks;
                        }
                        let t = Instant::now();
                        let sm = container.read_sm(ordered[rank]);
                        busy += t.elapsed();
                        match sm {
                            Ok(sm) => deliver(slots, rank, Ok(sm), &tx),
                            Err(e) => {
                                let _ = tx.send((rank, Err(e)));
                                break 'blocks;
                            }
                        }
                    }
                }
                queue.close();
                busy.as_secs_f64()
            })
        };
        let workers: Vec<_> = (0..options.workers)
            .map(|_| {
                let (queue, slots, cancel, ordered, tx) = (&queue, &slots, &cancel, &ordered, tx.clone());
                scope.spawn(move || -> f64 {
                    let mut busy = Duration::ZERO;
                    while let Some(job) = queue.pop() {
                        if cancel.load(Ordering::Relaxed) {
                            continue;
                        }
                        let t = Instant::now();
                        let chunk = match job.chunk {
                            Some(c) => Ok(c),
                            None => container.read_echunk(ordered[job.rank], job.shard),
                        };
                        let bytes = chunk.and_then(|c| decompress_chunk(&c));
                        match bytes {
                            Ok(b) => deliver(slots, job.rank, Err((job.shard, b)), &tx),
                            Err(e) => {
                                let _ = tx.send((job.rank, Err(e)));
                            }
                        }
                        busy += t.elapsed();
                    }
                    busy.as_secs_f64()
                })
            })
            .collect();
        drop(tx);

        let mut out: Vec<Option<Bf16Buffer>> = vec![None; ordered.len()];
        let mut outcome = Ok(());
        let deadline = start + options.watchdog;
        for _ in 0..ordered.len() {
            let left = deadline.saturating_duration_since(Instant::now());
            match rx.recv_timeout(left) {
                Ok((rank, Ok(t))) => out[rank] = Some(t),
                Ok((_, Err(e))) => {
                    outcome = Err(e);
                    break;
                }
                Err(mpsc::RecvTimeoutError::Timeout) => {
                    outcome = Err(Error::Internal(format!("pipeline stalled past {:?}", options.watchdog)));
                    break;
                }
                Err(mpsc::RecvTimeoutError::Disconnected) => {
                    outcome = Err(Error::Internal("pipeline threads exited early".into()));
                    break;
                }
            }
        }
        if outcome.is_err() {
            cancel.store(true, Ordering::Relaxed);
            queue.close();
        }
        let reader_busy = reader.join().expect("reader panicked");
        let worker_busy: Vec<f64> = workers.into_iter().map(|w| w.join().expect("worker panicked")).collect();
        (outcome.map(|_| out), reader_busy, worker_busy)
    });
    let wall_clock = start.elapsed().as_secs_f64();
    let tensors = outcome?;

    let mut bit_exact = true;
    for (key, got) in ordered.iter().zip(&tensors) {
        let got = got.as_ref().expect("every tensor collected");
        let want = match reference {
            Some(r) => r.get(key).cloned().ok_or_else(|| Error::NotFound(format!("reference tensor {key:?}")))?,
            None => container.reconstruct(*key)?,
        };
        bit_exact &= got.words() == want.words();
    }
    Ok(PipelineReport {
        workers: options.workers,
        mode: options.mode,
        tensors: ordered.len(),
        wall_clock,
        reader_busy,
        worker_busy,
        bit_exact,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Codec;
    use crate::container::pack_container;
    use rand::{Rng, SeedableRng};

    fn fixture(experts: u32) -> BTreeMap<ExpertKey, Bf16Buffer> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut m = BTreeMap::new();
        for e in 0..experts {
            for t in 0..2 {
                let words = (0..512).map(|_| 0x3c00 | rng.gen_range(0..0x0400u16)).collect();
                m.insert(ExpertKey::new(0, e, t), Bf16Buffer::new(words));
            }
        }
        m
    }

    #[test]
    fn both_modes_are_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.zmoe");
        let tensors = fixture(6);
        pack_container(&tensors, 2, Codec::Order0, &path).unwrap();
        let c = Container::open(&path).unwrap();
        let experts: Vec<(u32, u32)> = (0..6).map(|e| (0, e)).collect();
        let prof = ExecutionProfile::new(1.0, 0.5, 0.5, 2, 1, 2);
        for mode in [IoModel::Separate, IoModel::Consolidated] {
            for l in [1, 3] {
                let r = pipeline_bench(&c, &experts, &prof, PipelineOptions::new(l, mode), Some(&tensors)).unwrap();
                assert!(r.bit_exact);
                assert_eq!((r.tensors, r.worker_busy.len()), (12, l));
            }
        }
        let r = pipeline_bench(&c, &experts[..2], &prof, PipelineOptions::new(2, IoModel::Separate), None).unwrap();
        assert!(r.bit_exact);
    }

    #[test]
    fn empty_list_does_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.zmoe");
        pack_container(&fixture(1), 1, Codec::Store, &path).unwrap();
        let c = Container::open(&path).unwrap();
        let prof = ExecutionProfile::new(1.0, 0.5, 0.5, 1, 1, 2);
        let r = pipeline_bench(&c, &[], &prof, PipelineOptions::new(2, IoModel::Separate), None).unwrap();
        assert_eq!(r.tensors, 0);
        assert!(pipeline_bench(&c, &[(0, 9)], &prof, PipelineOptions::new(2, IoModel::Separate), None).is_err());
    }

    #[test]
    fn corruption_aborts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.zmoe");
        pack_container(&fixture(2), 2, Codec::Order0, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 5] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        let c = Container::open(&path).unwrap();
        let prof = ExecutionProfile::new(1.0, 0.5, 0.5, 2, 1, 2);
        let err =
            pipeline_bench(&c, &[(0, 0), (0, 1)], &prof, PipelineOptions::new(2, IoModel::Separate), None).unwrap_err();
        assert_eq!(err.exit_code(), 3, "{err}");
    }
}
