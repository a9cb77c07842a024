use std::ops::Range;

use super::hits::{hit_distribution, joint_hit_probability, HitDistribution, HitPattern};
use crate::error::Result;
use crate::profile::ExecutionProfile;

/// Estimated layer makespan for hit pattern `h` with `k` activated experts.
///
/// E-chunk reads count towards both the I/O lane and the worker lanes, the
/// latter matching a pipeline that fuses each E-chunk read with its
/// decompression.
pub fn estimate_makespan(k: usize, h: &HitPattern, profile: &ExecutionProfile) -> f64 {
    let [hf, hc, hs, he] = h.h.map(|x| x as f64);
    let k = k as f64;
    let n = profile.n as f64;
    let kk = profile.k as f64;
    let v = profile.e_read();
    let n_sm = n * (k - hf - hc - hs);
    let n_e = n * kk * (k - hf - hc - he);
    let t_io = n_sm * profile.u + n_e * v;
    let n_d = n * kk * (k - hf);
    let t_decomp = (n_e * v + n_d * profile.c) / profile.l as f64;
    t_io.max(t_decomp)
}

/// Rank intervals of the pools packed in hierarchy order. Capacities beyond
/// the number of ranks are cut off.
pub fn pool_intervals(capacities: [usize; 4], num_experts: usize) -> [Range<usize>; 4] {
    let mut start = 0;
    capacities.map(|c| {
        let end = (start + c).min(num_experts);
        let r = start..end;
        start = end;
        r
    })
}

/// Expected estimated makespan over the hit patterns of a pool layout.
pub fn expected_cost(q: &[f64], k: usize, capacities: [usize; 4], profile: &ExecutionProfile) -> Result<f64> {
    let intervals = pool_intervals(capacities, q.len());
    let phis: [HitDistribution; 4] = intervals.clone().map(|r| hit_distribution(&q[r]));
    let rest = hit_distribution(&q[intervals[3].end..]);
    let all = hit_distribution(q);
    let limits = intervals.map(|r| r.len().min(k));

    let mut total = 0.0;
    for hf in 0..=limits[0] {
        for hc in 0..=limits[1].min(k - hf) {
            for hs in 0..=limits[2].min(k - hf - hc) {
                for he in 0..=limits[3].min(k - hf - hc - hs) {
                    let h = HitPattern::new([hf, hc, hs, he]);
                    let p = joint_hit_probability(&h, &phis, &rest, &all, k)?;
                    if p > 0.0 {
                        total += p * estimate_makespan(k, &h, profile);
                    }
                }
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_full_hits_cost_nothing() {
        let p = ExecutionProfile::new(1.0, 0.3, 0.4, 2, 2, 1);
        assert_eq!(estimate_makespan(3, &HitPattern::new([3, 0, 0, 0]), &p), 0.0);
    }

    #[test]
    fn mixed_pattern_example() {
        let mut p = ExecutionProfile::new(1.0, 0.2, 0.4, 4, 4, 3);
        p.v = Some(0.1);
        let t = estimate_makespan(4, &HitPattern::new([1, 1, 1, 1]), &p);
        assert!((t - 4.2).abs() < 1e-12);
    }

    #[test]
    fn all_miss_example() {
        let p = ExecutionProfile::new(1.0, 0.3, 0.4, 2, 2, 1);
        let t = estimate_makespan(2, &HitPattern::default(), &p);
        assert!((t - 2.8).abs() < 1e-12);
    }

    #[test]
    fn more_hits_never_cost_more() {
        let p = ExecutionProfile::new(1.0, 0.7, 0.3, 4, 2, 2);
        let k = 4;
        for a in 0..=k {
            for b in 0..=k - a {
                for c in 0..=k - a - b {
                    for d in 0..=k - a - b - c {
                        let base = estimate_makespan(k, &HitPattern::new([a, b, c, d]), &p);
                        for i in 0..4 {
                            let mut h = [a, b, c, d];
                            if h.iter().sum::<usize>() < k {
                                h[i] += 1;
                                assert!(estimate_makespan(k, &HitPattern::new(h), &p) <= base + 1e-12);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn intervals_are_clamped() {
        assert_eq!(pool_intervals([2, 5, 0, 3], 6), [0..2, 2..6, 6..6, 6..6]);
    }

    #[test]
    fn everything_cached_costs_nothing() {
        let p = ExecutionProfile::new(1.0, 0.3, 0.4, 2, 2, 1);
        let q = [0.6, 0.5, 0.4, 0.3];
        assert_eq!(expected_cost(&q, 2, [4, 0, 0, 0], &p).unwrap(), 0.0);
        let miss = expected_cost(&q, 2, [0; 4], &p).unwrap();
        assert!((miss - 2.8).abs() < 1e-12);
    }
}
