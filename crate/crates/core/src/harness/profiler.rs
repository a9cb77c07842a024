use std::time::Instant;

use crate::codec::decompress_chunk;
use crate::container::{Container, ExpertKey, FRAME_HEADER_LEN};
use crate::error::{Error, Result};
use crate::profile::ExecutionProfile;

const RUNS: usize = 9;

fn median_secs(mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut times = Vec::with_capacity(RUNS);
    for _ in 0..RUNS {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(times[RUNS / 2])
}

/// Measures read and decompression latencies on up to `sample` tensors of
/// the container, taking the median of nine runs per operation. Expert
/// execution time is left to the caller.
pub fn measure_profile(container: &Container, sample: usize, workers: usize) -> Result<ExecutionProfile> {
    let k = container.k();
    let n = container.tensors_per_expert();
    let keys: Vec<ExpertKey> = container
        .experts()
        .flat_map(|(layer, e)| (0..n as u16).map(move |t| ExpertKey::new(layer, e, t)))
        .take(sample.max(1))
        .collect();
    if keys.is_empty() {
        return Err(Error::invalid("container holds no tensors"));
    }

    let (mut u, mut v, mut c) = (Vec::new(), Vec::new(), Vec::new());
    for &key in &keys {
        u.push(median_secs(|| container.read_sm(key).map(drop))?);
        for s in 0..k {
            v.push(median_secs(|| container.read_echunk(key, s).map(drop))?);
            let chunk = container.read_echunk(key, s)?;
            c.push(median_secs(|| decompress_chunk(&chunk).map(drop))?);
        }
    }
    let mean = |x: &[f64]| (x.iter().sum::<f64>() / x.len() as f64).max(1e-9);

    let (mut raw, mut packed, mut elements) = (0u64, 0u64, 0u64);
    for entry in &container.header().experts {
        for rec in &entry.tensors {
            raw += rec.element_count;
            packed += rec.e_chunk_lengths.iter().map(|&l| l.saturating_sub(FRAME_HEADER_LEN as u64)).sum::<u64>();
            elements = elements.max(rec.element_count);
        }
    }
    let rho = (packed as f64 / raw.max(1) as f64).clamp(1e-6, 1.0);

    let mut p = ExecutionProfile::new(mean(&u), mean(&c), rho, k, workers.max(1), n).with_elements_per_tensor(elements);
    p.v = Some(mean(&v));
    Ok(p)
}
