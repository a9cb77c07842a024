use serde::{Deserialize, Serialize};

use super::{compress_shard, decompose, Bf16Buffer, Codec};
use crate::error::{Error, Result};

/// Order-0 Shannon entropy of a byte stream in bits per symbol.
pub fn measure_entropy(bytes: &[u8]) -> Result<f64> {
    if bytes.is_empty() {
        return Err(Error::invalid("entropy of an empty stream"));
    }
    let mut counts = [0u64; 256];
    for &b in bytes {
        counts[b as usize] += 1;
    }
    Ok(entropy_of_counts(&counts))
}

fn entropy_of_counts(counts: &[u64; 256]) -> f64 {
    let total: u64 = counts.iter().sum();
    let n = total as f64;
    let h = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum::<f64>();
    h.max(0.0)
}

/// Exponent compressibility of a set of tensors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    /// Compressed exponent bytes over raw exponent bytes.
    pub rho: f64,
    /// Stored size over BF16 size; SM bytes are kept raw and are half the footprint.
    pub total_ratio: f64,
    /// Order-0 entropy of the pooled exponent bytes, bits per byte.
    pub entropy: f64,
}

pub fn compression_report(tensors: &[Bf16Buffer], codec: Codec, k: usize) -> Result<CompressionReport> {
    if tensors.is_empty() {
        return Err(Error::invalid("compression report needs at least one tensor"));
    }
    let mut raw = 0usize;
    let mut packed = 0usize;
    let mut counts = [0u64; 256];
    for t in tensors {
        let (_, shards) = decompose(t, k.min(t.len()).max(1))?;
        for shard in &shards {
            for &b in &shard.bytes {
                counts[b as usize] += 1;
            }
            raw += shard.bytes.len();
            packed += compress_shard(shard, codec)?.payload.len();
        }
    }
    let rho = packed as f64 / raw as f64;
    Ok(CompressionReport { rho, total_ratio: 0.5 + 0.5 * rho, entropy: entropy_of_counts(&counts) })
}
