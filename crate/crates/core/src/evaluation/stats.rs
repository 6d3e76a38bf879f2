use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::auroc::midranks;
use crate::error::{Error, Result};

/// Largest pooled sample size handled by the exact null distribution.
pub const MWU_EXACT_MAX_N: usize = 10;

/// One-sided Mann-Whitney U test, alternative "a is stochastically less than b".
///
/// Returns P(U_a ≤ u_observed) under the null, where U_a counts pairs with
/// a > b plus half the ties. For `n_a + n_b ≤ 10` the null distribution is
/// the exact permutation distribution of the (mid)rank sum; larger samples use
/// the normal approximation with tie and continuity corrections.
pub fn mann_whitney_less(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("Mann-Whitney U needs two nonempty samples"));
    }
    if a.iter().chain(b).any(|x| x.is_nan()) {
        return Err(Error::invalid("NaN in Mann-Whitney sample"));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let (na, nb) = (a.len(), b.len());
    let n = na + nb;
    if n <= MWU_EXACT_MAX_N {
        Ok(exact_rank_sum_cdf(&ranks, na))
    } else {
        let rank_sum: f64 = ranks[..na].iter().sum();
        let u = rank_sum - (na * (na + 1)) as f64 / 2.0;
        let mu = (na * nb) as f64 / 2.0;
        let tie_term = tie_correction(&pooled);
        let nf = n as f64;
        let var = (na * nb) as f64 / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
        if var <= 0.0 {
            return Ok(1.0);
        }
        let z = (u - mu + 0.5) / var.sqrt();
        let normal = Normal::standard();
        Ok(normal.cdf(z).clamp(0.0, 1.0))
    }
}

/// Σ (t³ − t) over tie groups.
fn tie_correction(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut total = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        total += t * t * t - t;
        i = j;
    }
    total
}

/// P(rank sum of a random size-`na` subset ≤ observed rank sum of the first `na` ranks),
/// by subset-sum counting over doubled midranks.
fn exact_rank_sum_cdf(ranks: &[f64], na: usize) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let observed: usize = doubled[..na].iter().sum();
    let max_sum: usize = doubled.iter().sum();
    // counts[j][s]: subsets of size j with doubled rank sum s.
    let mut counts = vec![vec![0u64; max_sum + 1]; na + 1];
    counts[0][0] = 1;
    for &r in &doubled {
        for j in (1..=na).rev() {
            for s in (r..=max_sum).rev() {
                counts[j][s] += counts[j - 1][s - r];
            }
        }
    }
    let total: u64 = counts[na].iter().sum();
    let le: u64 = counts[na][..=observed].iter().sum();
    le as f64 / total as f64
}

/// One-sided paired bootstrap: fraction of resamples with mean(b − a) ≤ 0.
///
/// RNG contract: a `ChaCha8Rng` seeded with `seed_from_u64(seed)`; each resample
/// draws `n` unit indices with `gen_range(0..n)` in order.
pub fn bootstrap_compare_less(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() || resamples == 0 {
        return Err(Error::invalid("bootstrap needs units and at least one resample"));
    }
    let diffs: Vec<f64> = b.iter().zip(a).map(|(b, a)| b - a).collect();
    let n = diffs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut at_or_below = 0usize;
    for _ in 0..resamples {
        let mut sum = 0.0;
        for _ in 0..n {
            sum += diffs[rng.gen_range(0..n)];
        }
        if sum / n as f64 <= 0.0 {
            at_or_below += 1;
        }
    }
    Ok(at_or_below as f64 / resamples as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// mean ± 1.96·s/√k over per-fold values, clipped to `range` when given.
pub fn fold_ci(values: &[f64], range: Option<(f64, f64)>) -> Result<ConfidenceInterval> {
    if values.len() < 2 {
        return Err(Error::invalid("fold CI needs at least two folds"));
    }
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0);
    let half = 1.96 * var.sqrt() / k.sqrt();
    let (mut lower, mut upper) = (mean - half, mean + half);
    if let Some((lo, hi)) = range {
        lower = lower.clamp(lo, hi);
        upper = upper.clamp(lo, hi);
    }
    Ok(ConfidenceInterval { mean, lower, upper })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_examples() {
        assert_eq!(mann_whitney_less(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap(), 0.05);
        assert!(mann_whitney_less(&[5.0], &[5.0]).unwrap() >= 0.5);
        assert_eq!(mann_whitney_less(&[4.0, 5.0, 6.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert!(mann_whitney_less(&[], &[1.0]).is_err());
    }

    #[test]
    fn five_vs_five_separated() {
        let p = mann_whitney_less(&[1.0, 2.0, 3.0, 4.0, 5.0], &[6.0, 7.0, 8.0, 9.0, 10.0]).unwrap();
        assert_eq!(p, 1.0 / 252.0);
    }

    #[test]
    fn normal_approximation_is_close_to_exact_tail() {
        // 6 vs 6, beyond the exact cutoff: compare with the exact count 1/924 for full separation.
        let a: Vec<f64> = (0..6).map(f64::from).collect();
        let b: Vec<f64> = (6..12).map(f64::from).collect();
        let p = mann_whitney_less(&a, &b).unwrap();
        assert!(p < 0.01 && p > 0.0);
        let all_tied = mann_whitney_less(&[1.0; 8], &[1.0; 8]).unwrap();
        assert_eq!(all_tied, 1.0);
    }

    #[test]
    fn bootstrap_boundaries() {
        let a = [0.1, 0.2, 0.3, 0.4];
        let b = [0.2, 0.3, 0.4, 0.5];
        assert_eq!(bootstrap_compare_less(&a, &b, 1000, 3).unwrap(), 0.0);
        assert_eq!(bootstrap_compare_less(&a, &a, 1000, 3).unwrap(), 1.0);
        assert!(bootstrap_compare_less(&a, &b[..3], 10, 0).is_err());
    }

    #[test]
    fn fold_ci_examples() {
        let ci = fold_ci(&[0.8; 5], None).unwrap();
        assert_eq!((ci.mean, ci.lower, ci.upper), (0.8, 0.8, 0.8));
        let ci = fold_ci(&[0.6, 0.8], None).unwrap();
        assert!((ci.mean - 0.7).abs() < 1e-12);
        assert!((ci.upper - ci.mean - 0.196).abs() < 1e-9);
        let ci = fold_ci(&[0.99, 0.9, 1.0], Some((0.0, 1.0))).unwrap();
        assert_eq!(ci.upper, 1.0);
        assert!(fold_ci(&[0.5], None).is_err());
    }
}
