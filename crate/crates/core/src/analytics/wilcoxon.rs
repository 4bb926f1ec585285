//! Wilcoxon signed-rank test for paired samples.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

/// Largest nonzero-difference count for which the exact null distribution is used.
pub const EXACT_MAX_N: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub n_nonzero: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(w_plus, w_minus)`.
    pub statistic: f64,
    /// Two-sided.
    pub p_value: f64,
    pub method: PMethod,
    /// Set when every difference is zero (or there were no pairs); `p_value` is 1.
    pub degenerate: bool,
}

/// Midranks of `|d|` for the nonzero differences, paired with their signs.
///
/// Ranks are returned doubled so that tied midranks stay integral.
fn doubled_signed_ranks(diffs: &[f64]) -> (Vec<u32>, Vec<bool>, Vec<usize>) {
    let mut nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    nz.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let mut ranks2 = vec![0u32; nz.len()];
    let mut tie_sizes = Vec::new();
    let mut i = 0;
    while i < nz.len() {
        let mut j = i;
        while j + 1 < nz.len() && nz[j + 1].abs() == nz[i].abs() {
            j += 1;
        }
        // Positions i..=j hold ranks i+1..=j+1; doubled midrank = i + j + 2.
        let r2 = (i + j + 2) as u32;
        ranks2[i..=j].iter_mut().for_each(|r| *r = r2);
        tie_sizes.push(j - i + 1);
        i = j + 1;
    }
    let positive = nz.iter().map(|d| *d > 0.0).collect();
    (ranks2, positive, tie_sizes)
}

/// Number of sign assignments giving each doubled positive-rank sum.
fn null_counts(ranks2: &[u32]) -> Vec<u64> {
    let total: usize = ranks2.iter().map(|&r| r as usize).sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    let mut reach = 0;
    for &r in ranks2 {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    counts
}

fn exact_p(ranks2: &[u32], w_plus2: usize) -> f64 {
    let counts = null_counts(ranks2);
    let lower: u64 = counts[..=w_plus2].iter().sum();
    let upper: u64 = counts[w_plus2..].iter().sum();
    let total = 2f64.powi(ranks2.len() as i32);
    (2.0 * lower.min(upper) as f64 / total).min(1.0)
}

fn normal_p(n: usize, w_plus: f64, tie_sizes: &[usize]) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = tie_sizes
        .iter()
        .map(|&t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum();
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

/// Test on `x - y` for each pair, choosing the exact null distribution when
/// there are at most [`EXACT_MAX_N`] nonzero differences.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> WilcoxonResult {
    let n_nonzero = pairs.iter().filter(|(x, y)| x - y != 0.0).count();
    let method = if n_nonzero <= EXACT_MAX_N {
        PMethod::Exact
    } else {
        PMethod::NormalApprox
    };
    wilcoxon_with_method(pairs, method)
}

pub fn wilcoxon_with_method(pairs: &[(f64, f64)], method: PMethod) -> WilcoxonResult {
    let diffs: Vec<f64> = pairs.iter().map(|(x, y)| x - y).collect();
    let (ranks2, positive, tie_sizes) = doubled_signed_ranks(&diffs);
    let n = ranks2.len();
    let total2: usize = ranks2.iter().map(|&r| r as usize).sum();
    let w_plus2: usize = ranks2
        .iter()
        .zip(&positive)
        .filter(|(_, &p)| p)
        .map(|(&r, _)| r as usize)
        .sum();
    let w_plus = w_plus2 as f64 / 2.0;
    let w_minus = (total2 - w_plus2) as f64 / 2.0;
    let p_value = if n == 0 {
        1.0
    } else {
        match method {
            PMethod::Exact => exact_p(&ranks2, w_plus2),
            PMethod::NormalApprox => normal_p(n, w_plus, &tie_sizes),
        }
    };
    WilcoxonResult {
        n_nonzero: n,
        w_plus,
        w_minus,
        statistic: w_plus.min(w_minus),
        p_value,
        method,
        degenerate: n == 0,
    }
}
