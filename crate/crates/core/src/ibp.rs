//! Indian Buffet Process mathematics.
//!
//! Rows of a mask are features (dishes), columns are observations
//! (customers). Everything here is a pure function of its arguments plus an
//! injected random stream.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{NcfrError, Result};
use crate::linalg::sample_gamma;

/// `H_N = Σ_{j=1..N} 1/j`.
pub fn harmonic(n: usize) -> f64 {
    // summing small terms first keeps the error well below 1e-12 at any N
    (1..=n).rev().map(|j| 1.0 / j as f64).sum()
}

/// Counts that determine the IBP density of a mask.
#[derive(Clone, Debug, PartialEq)]
pub struct IbpSufficientStats {
    /// `m_k`, active observations per feature.
    pub m: Vec<usize>,
    pub k_active: usize,
    pub h_n: f64,
    /// Multiplicity `K_h` of every distinct row pattern. Patterns are keyed
    /// by the row read in column order, which is canonical for a fixed
    /// column labelling.
    pub kh_counts: BTreeMap<Vec<bool>, usize>,
}

impl IbpSufficientStats {
    pub fn from_mask(s: &DMatrix<bool>) -> Self {
        let mut kh_counts = BTreeMap::new();
        let mut m = Vec::with_capacity(s.nrows());
        for k in 0..s.nrows() {
            let row: Vec<bool> = s.row(k).iter().copied().collect();
            m.push(row.iter().filter(|&&b| b).count());
            *kh_counts.entry(row).or_insert(0) += 1;
        }
        Self {
            k_active: s.nrows(),
            h_n: harmonic(s.ncols()),
            m,
            kh_counts,
        }
    }
}

/// `log P(S | α)` of the (left-ordered) mask class.
pub fn mask_log_density(s: &DMatrix<bool>, alpha: f64) -> Result<f64> {
    let n = s.ncols();
    let stats = IbpSufficientStats::from_mask(s);
    if let Some(k) = stats.m.iter().position(|&m| m == 0) {
        return Err(NcfrError::Contract(format!("mask row {k} is all zero")));
    }
    let nf = n as f64;
    let ln_n_fact = ln_gamma(nf + 1.0);
    let mut total = stats.k_active as f64 * alpha.ln() - alpha * stats.h_n;
    for &count in stats.kh_counts.values() {
        total -= ln_gamma(count as f64 + 1.0);
    }
    for &m in &stats.m {
        let mf = m as f64;
        total += ln_gamma(nf - mf + 1.0) + ln_gamma(mf) - ln_n_fact;
    }
    Ok(total)
}

/// Prior odds of switching an existing feature on, in the form
/// `m / (N - 1 - m)`.
///
/// Returns `+∞` when the feature is active at every other observation and
/// `0` when it is active nowhere else.
pub fn prior_ratio_existing(m_minus: usize, n: usize) -> Result<f64> {
    if n == 0 || m_minus > n - 1 {
        return Err(NcfrError::Contract(format!(
            "m_(k,-i) = {m_minus} must lie in 0..={} for N = {n}",
            n.saturating_sub(1)
        )));
    }
    if m_minus == n - 1 {
        return Ok(f64::INFINITY);
    }
    Ok(m_minus as f64 / (n - 1 - m_minus) as f64)
}

/// Prior odds from the exchangeable conditional `P(s = 1 | rest) = m / N`,
/// i.e. `m / (N - m)`.
pub fn prior_ratio_exchangeable(m_minus: usize, n: usize) -> Result<f64> {
    if n == 0 || m_minus > n - 1 {
        return Err(NcfrError::Contract(format!(
            "m_(k,-i) = {m_minus} must lie in 0..={} for N = {n}",
            n.saturating_sub(1)
        )));
    }
    Ok(m_minus as f64 / (n - m_minus) as f64)
}

/// Which prior odds the mask update uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPrior {
    /// `m / (N - m)`; the sampler then targets the IBP posterior exactly.
    #[default]
    Exchangeable,
    /// `m / (N - 1 - m)`; saturates to a forced activation at `m = N - 1`.
    Shifted,
}

impl MaskPrior {
    pub fn ratio(self, m_minus: usize, n: usize) -> Result<f64> {
        match self {
            MaskPrior::Exchangeable => prior_ratio_exchangeable(m_minus, n),
            MaskPrior::Shifted => prior_ratio_existing(m_minus, n),
        }
    }
}

/// `Poisson(α / N)` prior on the number of features unique to one
/// observation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewFeaturePrior {
    pub rate: f64,
}

impl NewFeaturePrior {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if self.rate <= 0.0 {
            return 0;
        }
        Poisson::new(self.rate).expect("positive rate").sample(rng) as usize
    }

    pub fn ln_pmf(&self, k: usize) -> f64 {
        let kf = k as f64;
        if self.rate == 0.0 {
            return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
        }
        kf * self.rate.ln() - self.rate - ln_gamma(kf + 1.0)
    }

    /// `log P(κ ≥ k)`.
    pub fn ln_tail(&self, k: usize) -> f64 {
        if k == 0 {
            return 0.0;
        }
        let below: f64 = (0..k).map(|j| self.ln_pmf(j).exp()).sum();
        let tail = 1.0 - below;
        if tail > 1e-8 {
            tail.ln()
        } else {
            // direct summation of the upper tail when 1 - cdf cancels
            let mut acc = 0.0;
            let mut j = k;
            loop {
                let t = self.ln_pmf(j).exp();
                acc += t;
                if t < acc * 1e-17 || j > k + 1000 {
                    break;
                }
                j += 1;
            }
            acc.ln()
        }
    }
}

pub fn new_feature_count_prior(alpha: f64, n_total: usize) -> NewFeaturePrior {
    NewFeaturePrior {
        rate: alpha / n_total as f64,
    }
}

/// Draw α from its conditional `Gamma(K + g, h + H_N)` (shape/rate).
pub fn sample_alpha<R: Rng + ?Sized>(k_active: usize, h_n: f64, g: f64, h: f64, rng: &mut R) -> f64 {
    sample_gamma(k_active as f64 + g, h + h_n, rng)
}

/// Sequential buffet simulation of a prior mask with `n` customers.
pub fn simulate_prior_masks<R: Rng + ?Sized>(alpha: f64, n: usize, rng: &mut R) -> DMatrix<bool> {
    let mut dishes: Vec<Vec<bool>> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for i in 1..=n {
        for (row, m) in dishes.iter_mut().zip(counts.iter_mut()) {
            if rng.random::<f64>() < *m as f64 / i as f64 {
                row[i - 1] = true;
                *m += 1;
            }
        }
        let fresh = NewFeaturePrior {
            rate: alpha / i as f64,
        }
        .sample(rng);
        for _ in 0..fresh {
            let mut row = vec![false; n];
            row[i - 1] = true;
            dishes.push(row);
            counts.push(1);
        }
    }
    DMatrix::from_fn(dishes.len(), n, |k, c| dishes[k][c])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;

    use crate::ChainRng;

    fn fact(n: usize) -> f64 {
        (1..=n).map(|v| v as f64).product()
    }

    fn direct_density(rows: &[Vec<bool>], alpha: f64) -> f64 {
        let n = rows[0].len();
        let mut kh: BTreeMap<Vec<bool>, usize> = BTreeMap::new();
        for r in rows {
            *kh.entry(r.clone()).or_insert(0) += 1;
        }
        let mut v = alpha.powi(rows.len() as i32) / kh.values().map(|&c| fact(c)).product::<f64>();
        v *= (-alpha * (1..=n).map(|j| 1.0 / j as f64).sum::<f64>()).exp();
        for r in rows {
            let m = r.iter().filter(|&&b| b).count();
            v *= fact(n - m) * fact(m - 1) / fact(n);
        }
        v
    }

    fn mask(rows: &[Vec<bool>]) -> DMatrix<bool> {
        DMatrix::from_fn(rows.len(), rows[0].len(), |k, n| rows[k][n])
    }

    #[test]
    fn harmonic_numbers() {
        assert_eq!(harmonic(1), 1.0);
        assert_relative_eq!(harmonic(3), 11.0 / 6.0, epsilon = 1e-15);
        assert_relative_eq!(harmonic(1000), 7.485_470_860_550_345, epsilon = 1e-12);
    }

    #[test]
    fn empty_mask_density_is_minus_alpha_h() {
        let s = DMatrix::from_element(0, 4, false);
        assert_relative_eq!(mask_log_density(&s, 2.5).unwrap(), -2.5 * harmonic(4), epsilon = 1e-14);
    }

    #[test]
    fn single_cell_density_is_minus_one() {
        let s = DMatrix::from_element(1, 1, true);
        assert_relative_eq!(mask_log_density(&s, 1.0).unwrap(), -1.0, epsilon = 1e-14);
    }

    #[test]
    fn density_matches_factorial_oracle() {
        let cases = [
            vec![vec![true, false, true], vec![false, true, false]],
            vec![vec![true, true, true], vec![true, true, true]],
            vec![vec![false, false, true], vec![true, false, true]],
        ];
        for rows in &cases {
            for alpha in [0.3, 1.0, 4.0] {
                let got = mask_log_density(&mask(rows), alpha).unwrap();
                assert_relative_eq!(got, direct_density(rows, alpha).ln(), epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn dead_row_is_a_contract_violation() {
        let s = mask(&[vec![true, false], vec![false, false]]);
        assert!(matches!(mask_log_density(&s, 1.0), Err(NcfrError::Contract(_))));
    }

    #[test]
    fn sufficient_stats_are_consistent() {
        let s = mask(&[vec![true, false, true], vec![true, false, true], vec![false, true, false]]);
        let st = IbpSufficientStats::from_mask(&s);
        assert_eq!(st.m, vec![2, 2, 1]);
        assert_eq!(st.kh_counts.values().sum::<usize>(), st.k_active);
        assert_eq!(st.kh_counts[&vec![true, false, true]], 2);
    }

    #[test]
    fn existing_feature_prior_ratio_boundaries() {
        assert_eq!(prior_ratio_existing(0, 10).unwrap(), 0.0);
        assert_eq!(prior_ratio_existing(9, 10).unwrap(), f64::INFINITY);
        assert_relative_eq!(prior_ratio_existing(4, 10).unwrap(), 0.8, epsilon = 1e-15);
        assert!(prior_ratio_existing(10, 10).is_err());
        assert_relative_eq!(prior_ratio_exchangeable(4, 10).unwrap(), 4.0 / 6.0, epsilon = 1e-15);
        assert!(prior_ratio_exchangeable(10, 10).is_err());
    }

    #[test]
    fn new_feature_prior_rate_and_pmf() {
        let pr = new_feature_count_prior(3.0, 3);
        assert_eq!(pr.rate, 1.0);
        assert_relative_eq!(new_feature_count_prior(0.7, 1).ln_pmf(0), -0.7, epsilon = 1e-15);
        let total: f64 = (0..60).map(|k| pr.ln_pmf(k).exp()).sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-12);
        assert_relative_eq!(pr.ln_tail(2).exp(), 1.0 - 2.0 * (-1.0f64).exp(), epsilon = 1e-12);
        let small = new_feature_count_prior(2.0, 1000);
        assert_relative_eq!(small.ln_tail(3).exp(), (3..40).map(|k| small.ln_pmf(k).exp()).sum::<f64>(), max_relative = 1e-10);
    }

    #[test]
    fn poisson_draws_have_the_right_mean() {
        let pr = NewFeaturePrior { rate: 0.5 };
        let mut rng = ChainRng::seed_from_u64(10);
        let n = 100_000;
        let mean = (0..n).map(|_| pr.sample(&mut rng) as f64).sum::<f64>() / n as f64;
        let se = (0.5f64 / n as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn alpha_posterior_mean() {
        for (k, n, target) in [(0usize, 1usize, 0.5), (20, 1000, 21.0 / (1.0 + harmonic(1000)))] {
            let mut rng = ChainRng::seed_from_u64(11 + k as u64);
            let hn = harmonic(n);
            let draws = 100_000;
            let xs: Vec<f64> = (0..draws).map(|_| sample_alpha(k, hn, 1.0, 1.0, &mut rng)).collect();
            assert!(xs.iter().all(|&x| x > 0.0));
            let mean = xs.iter().sum::<f64>() / draws as f64;
            let sd = ((k as f64 + 1.0).sqrt()) / (1.0 + hn);
            assert!((mean - target).abs() < 3.0 * sd / (draws as f64).sqrt(), "k={k}: {mean} vs {target}");
        }
    }

    #[test]
    fn alpha_draw_is_seed_deterministic() {
        let a = sample_alpha(3, 2.0, 1.0, 1.0, &mut ChainRng::seed_from_u64(5));
        let b = sample_alpha(3, 2.0, 1.0, 1.0, &mut ChainRng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn alpha_concentrates_at_zero_for_huge_rate() {
        let mut rng = ChainRng::seed_from_u64(6);
        let mean = (0..1000).map(|_| sample_alpha(5, 2.0, 1.0, 1e9, &mut rng)).sum::<f64>() / 1000.0;
        assert!(mean < 1e-7);
    }

    #[test]
    fn single_customer_takes_poisson_alpha_dishes() {
        let mut rng = ChainRng::seed_from_u64(12);
        let reps = 50_000;
        let alpha = 1.7;
        let mean = (0..reps)
            .map(|_| simulate_prior_masks(alpha, 1, &mut rng).nrows() as f64)
            .sum::<f64>()
            / reps as f64;
        assert!((mean - alpha).abs() < 3.0 * (alpha / reps as f64).sqrt());
    }

    #[test]
    fn simulated_masks_have_no_dead_rows() {
        let mut rng = ChainRng::seed_from_u64(13);
        for _ in 0..200 {
            let s = simulate_prior_masks(3.0, 7, &mut rng);
            for k in 0..s.nrows() {
                assert!(s.row(k).iter().any(|&b| b));
            }
        }
    }

    #[test]
    fn customer_column_sums_are_exchangeable() {
        // per-customer dish counts are marginally Poisson(α) for every
        // customer; compare the first and last customers' means
        let mut rng = ChainRng::seed_from_u64(14);
        let (alpha, n, reps) = (2.0, 6, 40_000);
        let (mut first, mut last) = (0.0, 0.0);
        for _ in 0..reps {
            let s = simulate_prior_masks(alpha, n, &mut rng);
            first += s.column(0).iter().filter(|&&b| b).count() as f64;
            last += s.column(n - 1).iter().filter(|&&b| b).count() as f64;
        }
        let se = (2.0 * alpha / reps as f64).sqrt();
        assert!(((first - last) / reps as f64).abs() < 3.0 * se);
        assert!((first / reps as f64 - alpha).abs() < 3.0 * (alpha / reps as f64).sqrt());
    }

    proptest! {
        #[test]
        fn density_is_invariant_to_customer_order(
            bits in prop::collection::vec(any::<bool>(), 12),
            perm_seed in any::<u64>(),
            alpha in 0.1f64..5.0,
        ) {
            let (k, n) = (3, 4);
            let mut rows: Vec<Vec<bool>> = (0..k).map(|r| bits[r * n..(r + 1) * n].to_vec()).collect();
            rows.retain(|r| r.iter().any(|&b| b));
            prop_assume!(!rows.is_empty());
            let s = mask(&rows);
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChainRng::seed_from_u64(perm_seed);
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let shuffled = s.select_columns(&order);
            let a = mask_log_density(&s, alpha).unwrap();
            let b = mask_log_density(&shuffled, alpha).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn prior_ratio_is_monotone_in_m(n in 2usize..200) {
            let mut prev = -1.0;
            for m in 0..n {
                let r = prior_ratio_existing(m, n).unwrap();
                prop_assert!(r > prev);
                prev = r;
            }
        }
    }
}
