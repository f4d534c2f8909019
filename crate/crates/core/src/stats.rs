//! Wilcoxon signed-rank test for paired samples.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Largest number of nonzero differences evaluated by exact enumeration.
pub const EXACT_MAX_N: usize = 12;
pub const MIN_N: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PValueMethod {
    Exact,
    Normal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub p_value: f64,
    /// Sum of ranks of the positive differences.
    pub w_plus: f64,
    /// Number of nonzero differences.
    pub n: usize,
    pub method: PValueMethod,
    /// Every difference was zero; `p_value` is 1.
    pub degenerate: bool,
}

/// Nonzero differences and their average ranks by magnitude.
fn signed_ranks(a: &[f64], b: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure!(a.len() == b.len(), "paired samples differ in length: {} vs {}", a.len(), b.len());
    ensure!(a.iter().chain(b).all(|v| v.is_finite()), "paired samples contain non-finite values");
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&i, &j| diffs[i].abs().total_cmp(&diffs[j].abs()));
    let mut ranks = vec![0.0; diffs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && diffs[order[end]].abs() == diffs[order[start]].abs() {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = avg;
        }
        start = end;
    }
    Ok((diffs, ranks))
}

/// Two-sided exact p-value: the null distribution of W+ is counted over all
/// `2^n` sign assignments of the (possibly tied) ranks.
pub fn exact_p_value(ranks: &[f64], w_plus: f64) -> f64 {
    // Average ranks are multiples of 1/2, so doubled ranks are integers.
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let all = 2f64.powi(ranks.len() as i32);
    let w = (2.0 * w_plus).round() as usize;
    let lower: f64 = counts[..=w].iter().sum::<f64>() / all;
    let upper: f64 = counts[w..].iter().sum::<f64>() / all;
    (2.0 * lower.min(upper)).min(1.0)
}

/// Two-sided normal approximation with tie and continuity corrections.
pub fn normal_p_value(ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut ties = 0.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        ties += t * t * t - t;
        i = j;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - ties / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    libm::erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

/// Paired two-sided test of `a` against `b`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    let (diffs, ranks) = signed_ranks(a, b)?;
    if diffs.is_empty() {
        ensure!(!a.is_empty(), "wilcoxon needs at least one pair");
        return Ok(WilcoxonResult { p_value: 1.0, w_plus: 0.0, n: 0, method: PValueMethod::Exact, degenerate: true });
    }
    ensure!(diffs.len() >= MIN_N, "wilcoxon needs at least {MIN_N} nonzero differences, got {}", diffs.len());
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let (p_value, method) = if diffs.len() <= EXACT_MAX_N {
        (exact_p_value(&ranks, w_plus), PValueMethod::Exact)
    } else {
        (normal_p_value(&ranks, w_plus), PValueMethod::Normal)
    };
    Ok(WilcoxonResult { p_value, w_plus, n: diffs.len(), method, degenerate: false })
}

/// Ranks and W+ of the nonzero differences, for comparing p-value routes.
pub fn rank_statistic(a: &[f64], b: &[f64]) -> Result<(Vec<f64>, f64)> {
    let (diffs, ranks) = signed_ranks(a, b)?;
    let w: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    Ok((ranks, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Enumerates every sign assignment directly.
    fn enumerate_p(ranks: &[f64], w: f64) -> f64 {
        let n = ranks.len();
        let (mut lo, mut hi) = (0u64, 0u64);
        for mask in 0u64..(1 << n) {
            let s: f64 = (0..n).filter(|k| mask >> k & 1 == 1).map(|k| ranks[k]).sum();
            lo += (s <= w + 1e-9) as u64;
            hi += (s >= w - 1e-9) as u64;
        }
        (2.0 * lo.min(hi) as f64 / (1u64 << n) as f64).min(1.0)
    }

    #[test]
    fn six_positive_differences_give_one_in_thirty_two() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [0.0; 6];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.method, PValueMethod::Exact);
        assert!((r.p_value - 0.03125).abs() < 1e-12);
        assert_eq!(r.w_plus, 21.0);
    }

    #[test]
    fn equal_samples_are_degenerate() {
        let a = [0.3, 0.5, 0.7];
        let r = wilcoxon_signed_rank(&a, &a).unwrap();
        assert!(r.degenerate && r.p_value == 1.0);
        assert!(wilcoxon_signed_rank(&[1.0, 2.0], &[0.0, 0.0]).is_err());
        assert!(wilcoxon_signed_rank(&[1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn dp_matches_enumeration_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..30 {
            let n = rng.gen_range(6..=12);
            let a: Vec<f64> = (0..n).map(|_| (rng.gen_range(-4..=4) as f64) * 0.5).collect();
            let b = vec![0.0; n];
            if a.iter().filter(|v| **v != 0.0).count() < 6 {
                continue;
            }
            let (ranks, w) = rank_statistic(&a, &b).unwrap();
            assert!((exact_p_value(&ranks, w) - enumerate_p(&ranks, w)).abs() < 1e-12);
        }
    }

    #[test]
    fn normal_route_tracks_exact_for_larger_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [10, 11, 12, 20] {
            for _ in 0..20 {
                let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.5)).collect();
                let b = vec![0.0; n];
                let (ranks, w) = rank_statistic(&a, &b).unwrap();
                let (e, z) = (exact_p_value(&ranks, w), normal_p_value(&ranks, w));
                assert!((e - z).abs() < 0.02, "n={n}: exact {e} vs normal {z}");
            }
        }
    }
}
