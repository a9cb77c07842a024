use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::plan::{Dispatch, Pool, PoolPlan};
use super::stats::RuntimeStats;
use crate::error::{Error, Result};
use crate::taskgraph::CompressionState;

/// Victim selection when a pool overflows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvictionPolicy {
    /// Lowest activation count, ties to the larger id.
    #[default]
    Frequency,
    Fifo,
    Lru,
    Marking,
}

impl std::str::FromStr for EvictionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "frequency" | "lfu" => Ok(Self::Frequency),
            "fifo" => Ok(Self::Fifo),
            "lru" => Ok(Self::Lru),
            "marking" => Ok(Self::Marking),
            _ => Err(Error::invalid(format!("unknown eviction policy '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Resident {
    expert: u32,
    inserted: u64,
    used: u64,
    marked: bool,
}

/// Residency of experts across the four pools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachePools {
    plan: PoolPlan,
    policy: EvictionPolicy,
    pools: [Vec<Resident>; 4],
    clock: u64,
}

#[derive(Serialize)]
struct Dump<'a> {
    plan: &'a PoolPlan,
    policy: EvictionPolicy,
    pools: BTreeMap<String, Vec<u32>>,
}

impl CachePools {
    pub fn new(plan: PoolPlan, policy: EvictionPolicy) -> Self {
        Self { plan, policy, pools: Default::default(), clock: 0 }
    }

    pub fn plan(&self) -> &PoolPlan {
        &self.plan
    }

    pub fn policy(&self) -> EvictionPolicy {
        self.policy
    }

    pub fn pool_of(&self, expert: u32) -> Option<Pool> {
        Pool::ALL.into_iter().find(|p| self.pools[p.index()].iter().any(|r| r.expert == expert))
    }

    pub fn lookup_state(&self, expert: u32) -> CompressionState {
        self.pool_of(expert).map_or(CompressionState::Miss, Pool::state)
    }

    /// Residents of `pool`, sorted by id.
    pub fn members(&self, pool: Pool) -> Vec<u32> {
        let mut v: Vec<u32> = self.pools[pool.index()].iter().map(|r| r.expert).collect();
        v.sort_unstable();
        v
    }

    pub fn len(&self, pool: Pool) -> usize {
        self.pools[pool.index()].len()
    }

    pub fn is_empty(&self) -> bool {
        self.pools.iter().all(Vec::is_empty)
    }

    pub fn remove(&mut self, expert: u32) -> Option<Pool> {
        let pool = self.pool_of(expert)?;
        self.pools[pool.index()].retain(|r| r.expert != expert);
        Some(pool)
    }

    /// Marks a use of `expert` for recency-based policies.
    pub fn touch(&mut self, expert: u32) {
        self.clock += 1;
        let now = self.clock;
        if let Some(r) = self.pools.iter_mut().flatten().find(|r| r.expert == expert) {
            r.used = now;
            r.marked = true;
        }
    }

    /// Places `expert` in `pool`, moving it from any other pool, then evicts
    /// overflow. Returns the evicted ids.
    pub fn insert(&mut self, pool: Pool, expert: u32, stats: &RuntimeStats) -> Result<Vec<u32>> {
        if self.plan.capacity(pool) == 0 {
            return Err(Error::Capacity { pool: pool.label() });
        }
        if self.pool_of(expert) != Some(pool) {
            self.remove(expert);
            self.clock += 1;
            self.pools[pool.index()].push(Resident { expert, inserted: self.clock, used: self.clock, marked: true });
        } else {
            self.touch(expert);
        }
        Ok(self.evict_overflow(pool, stats))
    }

    pub fn evict_overflow(&mut self, pool: Pool, stats: &RuntimeStats) -> Vec<u32> {
        let cap = self.plan.capacity(pool);
        let mut evicted = Vec::new();
        while self.pools[pool.index()].len() > cap {
            let idx = self.victim(pool, stats);
            evicted.push(self.pools[pool.index()].remove(idx).expert);
        }
        evicted
    }

    fn victim(&mut self, pool: Pool, stats: &RuntimeStats) -> usize {
        let residents = &mut self.pools[pool.index()];
        let pick = |v: &[Resident], key: &dyn Fn(&Resident) -> (u64, i64)| {
            (0..v.len()).min_by_key(|&i| key(&v[i])).expect("overflowing pool is non-empty")
        };
        match self.policy {
            EvictionPolicy::Frequency => pick(residents, &|r| (stats.count(r.expert), -(r.expert as i64))),
            EvictionPolicy::Fifo => pick(residents, &|r| (r.inserted, r.expert as i64)),
            EvictionPolicy::Lru => pick(residents, &|r| (r.used, r.expert as i64)),
            EvictionPolicy::Marking => {
                if residents.iter().all(|r| r.marked) {
                    // new phase: everything but the newest resident becomes unmarked
                    let newest = residents.iter().map(|r| r.used).max().unwrap_or(0);
                    for r in residents.iter_mut() {
                        r.marked = r.used == newest;
                    }
                }
                pick(residents, &|r| (u64::from(r.marked), r.inserted as i64))
            }
        }
    }

    /// Re-dispatches an expert after it was activated. Returns ids that left
    /// the cache, including `expert` itself when it is not retained.
    pub fn on_activation(&mut self, expert: u32, stats: &mut RuntimeStats) -> Result<Vec<u32>> {
        let rank = stats.rank(expert)?;
        match self.plan.dispatch(rank) {
            Dispatch::Evict => Ok(self.remove(expert).map(|_| vec![expert]).unwrap_or_default()),
            Dispatch::Pool(pool) => self.insert(pool, expert, stats),
        }
    }

    pub fn resident_bytes(&self, n: usize, elements: u64, rho: f64) -> f64 {
        Pool::ALL.iter().map(|p| self.len(*p) as f64 * p.expert_bytes(n, elements, rho)).sum()
    }

    pub fn dump_json(&self) -> Result<String> {
        let pools = Pool::ALL.iter().map(|p| (p.to_string(), self.members(*p))).collect();
        Ok(serde_json::to_string_pretty(&Dump { plan: &self.plan, policy: self.policy, pools })?)
    }
}
