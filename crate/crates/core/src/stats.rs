//! Nonparametric tests for paired per-case scores.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub w: f64,
    pub p_two_sided: f64,
    pub n_effective: usize,
    pub exact: bool,
}

/// Largest tie-free sample for which the exact null distribution is used.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

/// Average ranks (1-based) and the tie-group sizes.
pub fn average_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        if j - i > 1 {
            ties.push(j - i);
        }
        i = j;
    }
    (ranks, ties)
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(CoreError::Stats(format!("{} contains non-finite values", what)));
    }
    Ok(())
}

/// Number of sign assignments of ranks `1..=n` for each positive-rank sum.
fn signed_rank_counts(n: usize) -> Vec<f64> {
    let max = n * (n + 1) / 2;
    let mut counts = vec![0.0; max + 1];
    counts[0] = 1.0;
    for r in 1..=n {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    counts
}

/// Two-sided signed-rank test. Zero differences are dropped.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    if x.len() != y.len() || x.is_empty() {
        return Err(CoreError::Stats(format!("paired samples need equal non-zero lengths, got {} and {}", x.len(), y.len())));
    }
    check_finite(x, "x")?;
    check_finite(y, "y")?;
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|&d| d != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Err(CoreError::Stats("all differences are zero".into()));
    }
    let (ranks, ties) = average_ranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let w_plus: f64 = ranks.iter().zip(&d).filter(|(_, &d)| d > 0.0).map(|(r, _)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w = w_plus.min(total - w_plus);
    if n <= WILCOXON_EXACT_MAX_N && ties.is_empty() {
        let counts = signed_rank_counts(n);
        let tail: f64 = counts[..=w as usize].iter().sum();
        let p = (2.0 * tail / 2f64.powi(n as i32)).min(1.0);
        return Ok(WilcoxonResult { w, p_two_sided: p, n_effective: n, exact: true });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let sd = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term).sqrt();
    let z = ((mean - w).abs() - 0.5).max(0.0) / sd;
    let p = (2.0 * standard_normal_sf(z)).min(1.0);
    Ok(WilcoxonResult { w, p_two_sided: p, n_effective: n, exact: false })
}

fn standard_normal_sf(z: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").sf(z)
}

/// Upper tail of the chi-square distribution.
pub fn chi_square_sf(x: f64, df: f64) -> Result<f64> {
    let dist = ChiSquared::new(df).map_err(|e| CoreError::Stats(format!("chi-square df {}: {}", df, e)))?;
    if x <= 0.0 {
        return Ok(1.0);
    }
    Ok(dist.sf(x))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FriedmanResult {
    pub chi2: f64,
    pub p: f64,
}

/// Friedman test over `rows` (blocks) of `k` treatments each, tie-corrected.
pub fn friedman(rows: &[Vec<f64>]) -> Result<FriedmanResult> {
    let n = rows.len();
    let k = rows.first().map_or(0, Vec::len);
    if n < 2 || k < 2 || rows.iter().any(|r| r.len() != k) {
        return Err(CoreError::Stats(format!("friedman needs an n>=2 by k>=2 matrix, got {} rows of {}", n, k)));
    }
    let mut rank_sums = vec![0.0; k];
    let mut tie_sum = 0.0;
    for r in rows {
        check_finite(r, "friedman row")?;
        let (ranks, ties) = average_ranks(r);
        for (s, v) in rank_sums.iter_mut().zip(ranks) {
            *s += v;
        }
        tie_sum += ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>();
    }
    let (nf, kf) = (n as f64, k as f64);
    let correction = 1.0 - tie_sum / (nf * (kf * kf * kf - kf));
    if correction <= 1e-12 {
        return Ok(FriedmanResult { chi2: 0.0, p: 1.0 });
    }
    let ss: f64 = rank_sums.iter().map(|r| r * r).sum();
    let chi2 = ((12.0 / (nf * kf * (kf + 1.0)) * ss - 3.0 * nf * (kf + 1.0)) / correction).max(0.0);
    Ok(FriedmanResult { chi2, p: chi_square_sf(chi2, kf - 1.0)? })
}

/// `min(1, p * m)` per value.
pub fn bonferroni(p_values: &[f64], m: usize) -> Result<Vec<f64>> {
    if m < p_values.len() || m == 0 {
        return Err(CoreError::Stats(format!("family size {} smaller than {} p-values", m, p_values.len())));
    }
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(CoreError::Stats(format!("p-value {} outside [0, 1]", p)));
    }
    Ok(p_values.iter().map(|p| (p * m as f64).min(1.0)).collect())
}

/// Spearman rank correlation (Pearson on average ranks). `None` when either
/// side is constant or fewer than two pairs are given.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, _) = average_ranks(x);
    let (ry, _) = average_ranks(y);
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}
