use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Experts routed in one layer at one step, as `(expert_id, tokens)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub layer: u32,
    pub step: u32,
    pub experts: Vec<(u32, u32)>,
}

impl TraceRecord {
    pub fn validate(&self) -> Result<()> {
        if self.experts.is_empty() {
            return Err(Error::invalid(format!("layer {} step {} routes no experts", self.layer, self.step)));
        }
        let mut ids: Vec<u32> = self.experts.iter().map(|e| e.0).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!("layer {} step {} repeats an expert", self.layer, self.step)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceSpec {
    pub num_experts: usize,
    pub k: usize,
    pub steps: usize,
    pub skew: f64,
    pub seed: u64,
    pub layers: usize,
    /// Tokens per step; their routed sets are merged.
    pub batch: usize,
}

impl TraceSpec {
    pub fn new(num_experts: usize, k: usize, steps: usize, skew: f64, seed: u64) -> Self {
        Self { num_experts, k, steps, skew, seed, layers: 1, batch: 1 }
    }
}

/// Synthetic routing trace: each token draws `k` distinct experts with
/// probability proportional to `1 / (id + 1)^skew`.
pub fn gen_trace(spec: &TraceSpec) -> Result<Vec<TraceRecord>> {
    if spec.k == 0 || spec.k > spec.num_experts {
        return Err(Error::invalid(format!("k = {} must lie in 1..={}", spec.k, spec.num_experts)));
    }
    if spec.layers == 0 || spec.batch == 0 || !spec.skew.is_finite() || spec.skew < 0.0 {
        return Err(Error::invalid("layers and batch must be positive and skew non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let base: Vec<f64> = (0..spec.num_experts).map(|r| (r as f64 + 1.0).powf(-spec.skew)).collect();
    let mut out = Vec::with_capacity(spec.steps * spec.layers);
    for step in 0..spec.steps {
        for layer in 0..spec.layers {
            let mut merged: BTreeMap<u32, u32> = BTreeMap::new();
            for _ in 0..spec.batch {
                let mut w = base.clone();
                for _ in 0..spec.k {
                    let pick = WeightedIndex::new(&w).expect("weights stay positive").sample(&mut rng);
                    w[pick] = 0.0;
                    *merged.entry(pick as u32).or_default() += 1;
                }
            }
            out.push(TraceRecord { layer: layer as u32, step: step as u32, experts: merged.into_iter().collect() });
        }
    }
    Ok(out)
}

pub fn write_trace(path: impl AsRef<Path>, records: &[TraceRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line)?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

/// Activation counts per layer, indexed by expert id.
pub fn activation_counts(records: &[TraceRecord], num_experts: usize) -> Result<Vec<Vec<u64>>> {
    let layers = records.iter().map(|r| r.layer as usize + 1).max().unwrap_or(0);
    let mut counts = vec![vec![0u64; num_experts]; layers];
    for r in records {
        for &(e, _) in &r.experts {
            let slot = counts[r.layer as usize]
                .get_mut(e as usize)
                .ok_or_else(|| Error::NotFound(format!("expert {e} beyond {num_experts} experts")))?;
            *slot += 1;
        }
    }
    Ok(counts)
}

/// Most common number of routed experts per record; ties go to the smaller.
pub fn infer_k(records: &[TraceRecord]) -> Option<usize> {
    let mut freq: BTreeMap<usize, usize> = BTreeMap::new();
    for r in records {
        *freq.entry(r.experts.len()).or_default() += 1;
    }
    freq.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(k, _)| k)
}

/// Largest expert id in the trace plus one.
pub fn num_experts_in(records: &[TraceRecord]) -> usize {
    records.iter().flat_map(|r| r.experts.iter().map(|e| e.0 as usize + 1)).max().unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inclusion(records: &[TraceRecord], n: usize) -> Vec<f64> {
        let c = activation_counts(records, n).unwrap();
        c[0].iter().map(|&x| x as f64 / records.len() as f64).collect()
    }

    #[test]
    fn uniform_skew() {
        let t = gen_trace(&TraceSpec::new(8, 2, 10_000, 0.0, 1)).unwrap();
        assert!(t.iter().all(|r| r.experts.len() == 2));
        for p in inclusion(&t, 8) {
            assert!((p - 0.25).abs() < 0.02, "{p}");
        }
    }

    #[test]
    fn skew_favours_low_ids() {
        let t = gen_trace(&TraceSpec::new(8, 2, 5000, 2.0, 1)).unwrap();
        let inc = inclusion(&t, 8);
        assert!(inc[0] > inc[7]);
    }

    #[test]
    fn seeded_files_match() {
        let dir = tempfile::tempdir().unwrap();
        let spec = TraceSpec::new(16, 4, 200, 1.0, 9);
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        write_trace(&a, &gen_trace(&spec).unwrap()).unwrap();
        write_trace(&b, &gen_trace(&spec).unwrap()).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let back = read_trace(&a).unwrap();
        assert_eq!(back, gen_trace(&spec).unwrap());
        assert_eq!(infer_k(&back), Some(4));
    }

    #[test]
    fn too_many_experts_rejected() {
        assert!(gen_trace(&TraceSpec::new(4, 5, 1, 1.0, 0)).is_err());
        assert!(gen_trace(&TraceSpec::new(4, 0, 1, 1.0, 0)).is_err());
    }

    #[test]
    fn batches_merge_tokens() {
        let mut spec = TraceSpec::new(4, 2, 50, 1.0, 3);
        spec.batch = 3;
        spec.layers = 2;
        let t = gen_trace(&spec).unwrap();
        assert_eq!(t.len(), 100);
        for r in &t {
            r.validate().unwrap();
            assert_eq!(r.experts.iter().map(|e| e.1).sum::<u32>(), 6);
        }
    }

    #[test]
    fn malformed_records_rejected() {
        let rec = TraceRecord { layer: 0, step: 0, experts: vec![] };
        assert!(rec.validate().is_err());
        let rec = TraceRecord { layer: 0, step: 0, experts: vec![(1, 1), (1, 2)] };
        assert!(rec.validate().is_err());
        assert!(activation_counts(&[TraceRecord { layer: 0, step: 0, experts: vec![(9, 1)] }], 4).is_err());
    }
}
