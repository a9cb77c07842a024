use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Runtime activation counts and the ranks derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    counts: Vec<u64>,
    #[serde(skip)]
    ranks: Option<Vec<usize>>,
}

impl RuntimeStats {
    pub fn new(num_experts: usize) -> Self {
        Self { counts: vec![0; num_experts], ranks: None }
    }

    pub fn num_experts(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, expert: u32) -> u64 {
        self.counts.get(expert as usize).copied().unwrap_or(0)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn record_activation(&mut self, expert: u32, count: u64) -> Result<()> {
        let n = self.counts.len();
        let slot = self
            .counts
            .get_mut(expert as usize)
            .ok_or_else(|| Error::invalid(format!("expert {expert} out of range for {n} experts")))?;
        *slot += count;
        if count > 0 {
            self.ranks = None;
        }
        Ok(())
    }

    /// Rank per expert: 0 is the most frequent, ties by expert id.
    pub fn ranks(&mut self) -> &[usize] {
        let counts = &self.counts;
        self.ranks.get_or_insert_with(|| {
            let mut order: Vec<usize> = (0..counts.len()).collect();
            order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
            let mut rank = vec![0; counts.len()];
            for (r, e) in order.into_iter().enumerate() {
                rank[e] = r;
            }
            rank
        })
    }

    pub fn rank(&mut self, expert: u32) -> Result<usize> {
        let n = self.counts.len();
        self.ranks()
            .get(expert as usize)
            .copied()
            .ok_or_else(|| Error::invalid(format!("expert {expert} out of range for {n} experts")))
    }
}
