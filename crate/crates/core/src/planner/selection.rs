use serde::{Deserialize, Serialize};

use super::rank::RankModel;
use crate::error::{Error, Result};

/// `R(n, C)`: sum over `n`-subsets of `weights` of the product of their weights.
pub fn elementary_symmetric(weights: &[f64], n: usize) -> Result<f64> {
    if weights.iter().any(|w| w.is_nan() || *w < 0.0) {
        return Err(Error::invalid("weights must be non-negative"));
    }
    Ok(esp_table(weights, n)[n])
}

/// `e[j]` for `j ≤ n`: one-dimensional DP over the weights.
fn esp_table(weights: &[f64], n: usize) -> Vec<f64> {
    let mut e = vec![0.0; n + 1];
    e[0] = 1.0;
    for (i, &w) in weights.iter().enumerate() {
        for j in (1..=n.min(i + 1)).rev() {
            e[j] += w * e[j - 1];
        }
    }
    e
}

/// `w_i · R(k−1, N∖{i}) / R(k, N)` for every `i`, computed on weights scaled
/// by their geometric mean so that large sets neither overflow nor underflow.
pub fn inclusion_probabilities(weights: &[f64], k: usize) -> Vec<f64> {
    let n = weights.len();
    if k == 0 {
        return vec![0.0; n];
    }
    let log_mean = weights.iter().map(|w| w.ln()).sum::<f64>() / n as f64;
    let g = log_mean.exp();
    let w: Vec<f64> = weights.iter().map(|x| x / g).collect();

    // prefix[i] covers w[..i], suffix[i] covers w[i..]; both truncated at degree k
    let mut prefix = vec![vec![0.0; k + 1]; n + 1];
    prefix[0][0] = 1.0;
    for i in 0..n {
        let (prev, next) = (prefix[i].clone(), &mut prefix[i + 1]);
        next.copy_from_slice(&prev);
        for j in 1..=k {
            next[j] += w[i] * prev[j - 1];
        }
    }
    let mut suffix = vec![vec![0.0; k + 1]; n + 1];
    suffix[n][0] = 1.0;
    for i in (0..n).rev() {
        let (prev, next) = (suffix[i + 1].clone(), &mut suffix[i]);
        next.copy_from_slice(&prev);
        for j in 1..=k {
            next[j] += w[i] * prev[j - 1];
        }
    }
    let total = prefix[n][k];
    (0..n)
        .map(|i| {
            let without: f64 = (0..k).map(|a| prefix[i][a] * suffix[i + 1][k - 1 - a]).sum();
            w[i] * without / total
        })
        .collect()
}

/// Bernoulli selection probabilities whose size-`k` conditional law matches
/// the rank model's marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionModel {
    pub q: Vec<f64>,
    pub w: Vec<f64>,
    pub k: usize,
    pub iterations: usize,
    /// Max marginal error before each update.
    pub residuals: Vec<f64>,
}

impl SelectionModel {
    /// Marginals implied by the weights under the size-`k` conditional law.
    pub fn inclusion(&self) -> Vec<f64> {
        let free: Vec<usize> = (0..self.w.len()).filter(|&i| self.w[i] > 0.0 && self.w[i].is_finite()).collect();
        let forced_in = self.w.iter().filter(|w| w.is_infinite()).count();
        let mut out: Vec<f64> = self.w.iter().map(|w| if w.is_infinite() { 1.0 } else { 0.0 }).collect();
        let sub: Vec<f64> = free.iter().map(|&i| self.w[i]).collect();
        if !free.is_empty() {
            for (&i, p) in free.iter().zip(inclusion_probabilities(&sub, self.k - forced_in)) {
                out[i] = p;
            }
        }
        out
    }
}

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// Iterative proportional fitting of the selection weights: each round
/// takes the better of `w_i * f_i / pi_i` and `w_i` times the ratio of target
/// to current inclusion odds, `f_i (1 - pi_i) / (pi_i (1 - f_i))`.
///
/// Ranks with marginal exactly 1 are always selected and ranks with marginal
/// 0 never are; the rest are fitted for the remaining selection size.
pub fn fit_selection_probs(model: &RankModel, tol: f64, max_iter: usize) -> Result<SelectionModel> {
    let f = &model.f;
    let sum: f64 = f.iter().sum();
    if (sum - model.k as f64).abs() > 1e-9 || f.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::invalid(format!("marginals must lie in [0, 1] and sum to k = {}", model.k)));
    }
    let forced_in = f.iter().filter(|&&x| x == 1.0).count();
    let free: Vec<usize> = (0..f.len()).filter(|&i| f[i] > 0.0 && f[i] < 1.0).collect();
    let k = model.k - forced_in;
    let target: Vec<f64> = free.iter().map(|&i| f[i]).collect();

    let residual_of = |current: &[f64]| current.iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let mut w = target.clone();
    let mut residuals = Vec::new();
    let mut iterations = 0;
    if k > 0 && !free.is_empty() {
        let mut current = inclusion_probabilities(&w, k);
        loop {
            let residual = residual_of(&current);
            residuals.push(residual);
            if residual < tol {
                break;
            }
            if iterations == max_iter {
                return Err(Error::Convergence { iterations, residual });
            }
            let plain: Vec<f64> = w.iter().zip(&target).zip(&current).map(|((wi, fi), ci)| wi * fi / ci).collect();
            let plain_incl = inclusion_probabilities(&plain, k);
            // Near f = 1 the multiplicative step only closes 1 - f like 1/t;
            // the same step on the odds reaches it at once. Taken only when it
            // does better, since it can overshoot when k is close to n.
            let odds: Vec<f64> = w
                .iter()
                .zip(&target)
                .zip(&current)
                .map(|((wi, fi), ci)| wi * (fi * (1.0 - ci)) / (ci * (1.0 - fi)))
                .collect();
            let mut next = (plain, plain_incl);
            if odds.iter().all(|x| x.is_finite() && *x > 0.0) {
                let odds_incl = inclusion_probabilities(&odds, k);
                if residual_of(&odds_incl) < residual_of(&next.1) {
                    next = (odds, odds_incl);
                }
            }
            (w, current) = next;
            iterations += 1;
        }
    }

    let mut full_w: Vec<f64> = f.iter().map(|&x| if x == 1.0 { f64::INFINITY } else { 0.0 }).collect();
    for (&i, &wi) in free.iter().zip(&w) {
        full_w[i] = wi;
    }
    let q = full_w.iter().map(|&w| if w.is_infinite() { 1.0 } else { w / (1.0 + w) }).collect();
    Ok(SelectionModel { q, w: full_w, k: model.k, iterations, residuals })
}
