//! Wilcoxon matched-pairs signed-rank test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{CoreError, Result};

/// Largest effective sample size tested with the exact null distribution.
pub const EXACT_MAX_N: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// Sum of the ranks of the positive differences `x - y`.
    pub w: f64,
    pub n: usize,
    pub p: f64,
    pub exact: bool,
}

/// Average ranks (1-based) of `|d|`, ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in &order[i..=j] {
            ranks[*k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided test of `x - y`. Zero differences are dropped.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<Wilcoxon> {
    if x.len() != y.len() || x.is_empty() {
        return Err(CoreError::Invalid(format!("paired samples of lengths {} and {}", x.len(), y.len())));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|v| *v != 0.0).collect();
    if d.is_empty() {
        return Err(CoreError::DegenerateSample);
    }
    let mag: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&mag);
    let w: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).fold(0.0, |acc, (_, r)| acc + r);
    let n = d.len();
    if n <= EXACT_MAX_N {
        return Ok(Wilcoxon { w, n, p: exact_p(&ranks, w), exact: true });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let ties: f64 = tie_sizes(&mag).iter().map(|t| t * t * t - t).sum();
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p = (2.0 * (1.0 - normal.cdf(z))).min(1.0);
    Ok(Wilcoxon { w, n, p, exact: false })
}

fn tie_sizes(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mut out = Vec::new();
    let mut i = 0;
    while i < v.len() {
        let j = v[i..].iter().take_while(|x| **x == v[i]).count();
        if j > 1 {
            out.push(j as f64);
        }
        i += j;
    }
    out
}

/// Exact two-sided p under the sign-flip null. Ranks are multiples of 1/2, so
/// doubled ranks are integers and the null distribution is a subset-sum count.
fn exact_p(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    for r in &doubled {
        for s in (*r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let w2 = (2.0 * w).round() as usize;
    let all = 2f64.powi(ranks.len() as i32);
    let lower: u64 = counts[..=w2].iter().sum();
    let upper: u64 = counts[w2..].iter().sum();
    (2.0 * lower.min(upper) as f64 / all).min(1.0)
}
