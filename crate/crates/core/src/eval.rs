//! Prediction metrics, sample selection and run summaries.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{NcfrError, Result};
use crate::linalg::low_rank_gaussian_ln_pdf;
use crate::model::{joint_log_likelihood, LatentState, RegressionDataset};

/// How a retained sample turns an input into a response prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionRule {
    /// `Q P x`, every feature switched on.
    Linear,
    /// `Q diag(r) P x` with the predictive activation rates `r_k = m_k/(N+1)`.
    /// This is the posterior-predictive mean for a fresh observation.
    #[default]
    ExpectedMask,
}

impl PredictionRule {
    pub fn predict(self, state: &LatentState, x: &DMatrix<f64>) -> DMatrix<f64> {
        let q = state.q().nrows();
        if state.k() == 0 {
            return DMatrix::zeros(q, x.ncols());
        }
        let latent = state.p() * x;
        match self {
            PredictionRule::Linear => state.q() * latent,
            PredictionRule::ExpectedMask => {
                let rates = state.activation_rates();
                let mut scaled = latent;
                for (k, mut row) in scaled.row_iter_mut().enumerate() {
                    row *= rates[k];
                }
                state.q() * scaled
            }
        }
    }
}

/// Per-dimension normalised squared error
/// `Σ_m (ŷ_im - y_im)² / Σ_m (y_im - ȳ_i)²`.
///
/// A dimension whose test responses are constant has no normaliser; it is
/// reported as NaN with a warning and skipped by [`NlseSummary`].
pub fn nlse(y_hat: &DMatrix<f64>, y_true: &DMatrix<f64>) -> Result<DVector<f64>> {
    if y_hat.shape() != y_true.shape() {
        return Err(NcfrError::Dimension(format!(
            "prediction {:?} vs truth {:?}",
            y_hat.shape(),
            y_true.shape()
        )));
    }
    if y_true.ncols() < 2 {
        return Err(NcfrError::Contract("NLSE needs at least two columns".into()));
    }
    let m = y_true.ncols() as f64;
    Ok(DVector::from_fn(y_true.nrows(), |i, _| {
        let row = y_true.row(i);
        let mean = row.sum() / m;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum();
        let err: f64 = y_hat.row(i).iter().zip(row.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        if var > 0.0 {
            err / var
        } else {
            log::warn!("response dimension {i} is constant on the test set; NLSE undefined");
            f64::NAN
        }
    }))
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NlseSummary {
    pub median: f64,
    pub lower_quartile: f64,
    pub upper_quartile: f64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Dimensions skipped because their NLSE is undefined.
    pub excluded: usize,
}

impl NlseSummary {
    pub fn from_values(values: &DVector<f64>) -> Self {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        let excluded = values.len() - v.len();
        if v.is_empty() {
            return Self {
                median: f64::NAN,
                lower_quartile: f64::NAN,
                upper_quartile: f64::NAN,
                min: f64::NAN,
                max: f64::NAN,
                mean: f64::NAN,
                excluded,
            };
        }
        v.sort_by(f64::total_cmp);
        Self {
            median: quantile(&v, 0.5),
            lower_quartile: quantile(&v, 0.25),
            upper_quartile: quantile(&v, 0.75),
            min: v[0],
            max: v[v.len() - 1],
            mean: v.iter().sum::<f64>() / v.len() as f64,
            excluded,
        }
    }
}

/// `Σ_n log N(y_n | Q P x_n, Ψ_y + Q Ψ_z Q^T)` over the columns of `test`
/// (missing columns skipped).
pub fn predictive_log_likelihood(state: &LatentState, test: &RegressionDataset) -> Result<f64> {
    predictive_log_likelihood_with(state, test, PredictionRule::Linear)
}

/// Predictive log-likelihood under a prediction rule. For
/// [`PredictionRule::ExpectedMask`] the Bernoulli mask of a new observation
/// is moment-matched: feature `k` contributes mean `r_k μ_k` and variance
/// `r_k ψ_z(k) + r_k (1 - r_k) μ_k²` with `μ_k = p_k x`.
pub fn predictive_log_likelihood_with(state: &LatentState, test: &RegressionDataset, rule: PredictionRule) -> Result<f64> {
    if test.p() != state.p().ncols() || test.q() != state.q().nrows() {
        return Err(NcfrError::Dimension(format!(
            "test data is {}x{} but the state expects {}x{}",
            test.p(),
            test.q(),
            state.p().ncols(),
            state.q().nrows()
        )));
    }
    let k = state.k();
    let latent = state.p() * test.x();
    let rates = state.activation_rates();
    let mut total = 0.0;
    let mut w = vec![0.0; k];
    for n in test.observed_columns() {
        let mut mean = DVector::zeros(k);
        for j in 0..k {
            let mu = latent[(j, n)];
            match rule {
                PredictionRule::Linear => {
                    mean[j] = mu;
                    w[j] = state.psi_z()[j];
                }
                PredictionRule::ExpectedMask => {
                    let r = rates[j];
                    mean[j] = r * mu;
                    w[j] = r * state.psi_z()[j] + r * (1.0 - r) * mu * mu;
                }
            }
        }
        let r = test.y().column(n) - state.q() * mean;
        total += low_rank_gaussian_ln_pdf(&r, state.psi_y(), state.q(), &w)?;
    }
    if !total.is_finite() {
        return Err(NcfrError::numerical("predictive log-likelihood", "non-finite value"));
    }
    Ok(total)
}

/// Index of the retained state with the highest joint log-likelihood on
/// `data`; ties go to the later state.
pub fn select_best_sample(tail: &[LatentState], data: &RegressionDataset) -> Result<usize> {
    if tail.is_empty() {
        return Err(NcfrError::Contract("cannot select from an empty chain".into()));
    }
    let mut best = 0;
    let mut best_ll = f64::NEG_INFINITY;
    for (i, st) in tail.iter().enumerate() {
        let ll = joint_log_likelihood(st, data)?;
        if ll >= best_ll {
            best = i;
            best_ll = ll;
        }
    }
    Ok(best)
}

/// One line of the per-iteration trace. Every field is a deterministic
/// function of the configuration and seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: u64,
    pub k: usize,
    pub joint_loglik: f64,
    pub temperature: f64,
    pub pred_loglik: f64,
}

/// Measured cost of one iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub iteration: u64,
    pub cpu_seconds: f64,
    pub wall_seconds: f64,
}

/// What a finished chain leaves behind, enough to rebuild its report.
#[derive(Clone, Debug, PartialEq)]
pub struct RunArtifacts {
    pub trace: Vec<TraceRecord>,
    pub timing: Vec<TimingRecord>,
    pub test_prediction: DMatrix<f64>,
    pub test_truth: DMatrix<f64>,
    pub train_prediction: DMatrix<f64>,
    pub train_truth: DMatrix<f64>,
    pub retain: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nlse_per_dim: Vec<f64>,
    pub nlse_summary: NlseSummary,
    pub train_nlse_per_dim: Vec<f64>,
    /// Mean over dimensions of test minus train NLSE.
    pub train_test_delta: f64,
    pub pred_loglik_last: Vec<f64>,
    pub k_last: Vec<usize>,
    pub seconds_per_iter_last: Vec<f64>,
    /// Normaliser used by the NLSE.
    pub normalization: String,
}

impl MetricsReport {
    /// Most frequent K in the retained tail (smallest on ties).
    pub fn k_mode(&self) -> Option<usize> {
        let mut counts = std::collections::BTreeMap::new();
        for &k in &self.k_last {
            *counts.entry(k).or_insert(0usize) += 1;
        }
        let best = counts.values().copied().max()?;
        counts.into_iter().find(|&(_, c)| c == best).map(|(k, _)| k)
    }

    pub fn mean_seconds_per_iter(&self) -> f64 {
        let v = &self.seconds_per_iter_last;
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

fn last<T: Copy>(items: &[T], n: usize) -> Vec<T> {
    items[items.len().saturating_sub(n)..].to_vec()
}

pub fn summarize(artifacts: &RunArtifacts) -> Result<MetricsReport> {
    let test = nlse(&artifacts.test_prediction, &artifacts.test_truth)?;
    let train = nlse(&artifacts.train_prediction, &artifacts.train_truth)?;
    let deltas: Vec<f64> = test
        .iter()
        .zip(train.iter())
        .map(|(a, b)| a - b)
        .filter(|d| d.is_finite())
        .collect();
    let delta = deltas.iter().sum::<f64>() / deltas.len().max(1) as f64;
    let tail = artifacts.retain;
    Ok(MetricsReport {
        nlse_summary: NlseSummary::from_values(&test),
        nlse_per_dim: test.iter().copied().collect(),
        train_nlse_per_dim: train.iter().copied().collect(),
        train_test_delta: delta,
        pred_loglik_last: last(&artifacts.trace, tail).iter().map(|r| r.pred_loglik).collect(),
        k_last: last(&artifacts.trace, tail).iter().map(|r| r.k).collect(),
        seconds_per_iter_last: last(&artifacts.timing, tail).iter().map(|r| r.cpu_seconds).collect(),
        normalization: "test_variance".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    use crate::linalg::{normal_ln_pdf, sample_normal};
    use crate::model::{init_state, Hyperparams};
    use crate::ChainRng;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChainRng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| sample_normal(0.0, 1.0, &mut rng))
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let y = random(3, 6, 1);
        assert!(nlse(&y, &y).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mean_predictor_scores_one() {
        let y = random(3, 6, 2);
        let mut mean = y.clone();
        for i in 0..3 {
            let m = y.row(i).mean();
            mean.row_mut(i).fill(m);
        }
        for v in nlse(&mean, &y).unwrap().iter() {
            assert_relative_eq!(*v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn matches_direct_formula() {
        let y = random(3, 4, 3);
        let yh = random(3, 4, 4);
        let got = nlse(&yh, &y).unwrap();
        for i in 0..3 {
            let ybar = (y[(i, 0)] + y[(i, 1)] + y[(i, 2)] + y[(i, 3)]) / 4.0;
            let mut num = 0.0;
            let mut den = 0.0;
            for m in 0..4 {
                num += (yh[(i, m)] - y[(i, m)]).powi(2);
                den += (y[(i, m)] - ybar).powi(2);
            }
            assert_relative_eq!(got[i], num / den, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_dimension_is_a_sentinel() {
        let mut y = random(2, 5, 5);
        y.row_mut(1).fill(3.0);
        let v = nlse(&random(2, 5, 6), &y).unwrap();
        assert!(v[0].is_finite() && v[1].is_nan());
        assert_eq!(NlseSummary::from_values(&v).excluded, 1);
    }

    #[test]
    fn column_order_is_irrelevant() {
        let y = random(3, 7, 7);
        let yh = random(3, 7, 8);
        let perm = [3usize, 6, 0, 1, 5, 2, 4];
        let a = nlse(&yh, &y).unwrap();
        let b = nlse(&yh.select_columns(&perm), &y.select_columns(&perm)).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            assert_relative_eq!(u, v, epsilon = 1e-12);
        }
    }

    #[test]
    fn quartiles_interpolate() {
        let s = NlseSummary::from_values(&DVector::from_vec(vec![4.0, 1.0, 3.0, 2.0]));
        assert_eq!((s.median, s.lower_quartile, s.upper_quartile), (2.5, 1.75, 3.25));
    }

    #[test]
    fn empty_model_predictive_density_is_diagonal() {
        let x = random(2, 5, 9);
        let y = random(3, 5, 10);
        let data = RegressionDataset::new(x, y.clone()).unwrap();
        let st = LatentState::empty(3, 2, 5, DVector::from_vec(vec![0.5, 1.0, 2.0]), 1.0).unwrap();
        let mut expect = 0.0;
        for n in 0..5 {
            for i in 0..3 {
                expect += normal_ln_pdf(y[(i, n)], 0.0, st.psi_y()[i]);
            }
        }
        assert_relative_eq!(predictive_log_likelihood(&st, &data).unwrap(), expect, epsilon = 1e-10);
    }

    #[test]
    fn scalar_predictive_density_matches_quadrature() {
        let data = RegressionDataset::new(DMatrix::from_element(1, 1, 0.9), DMatrix::from_element(1, 1, -0.4)).unwrap();
        let st = LatentState::from_parts(
            DMatrix::from_element(1, 1, true),
            DMatrix::from_element(1, 1, 0.0),
            DMatrix::from_element(1, 1, 1.2),
            DMatrix::from_element(1, 1, 0.5),
            DVector::from_element(1, 0.6),
            DVector::from_element(1, 0.8),
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 1.0),
            1.0,
        )
        .unwrap();
        let mu = 0.45;
        let sd = 0.8f64.sqrt();
        let steps = 100_000;
        let (lo, hi) = (mu - 12.0 * sd, mu + 12.0 * sd);
        let dz = (hi - lo) / steps as f64;
        let mut acc = 0.0;
        for i in 0..=steps {
            let z = lo + i as f64 * dz;
            let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
            acc += w * (normal_ln_pdf(-0.4, 1.2 * z, 0.6) + normal_ln_pdf(z, mu, 0.8)).exp();
        }
        assert_relative_eq!(predictive_log_likelihood(&st, &data).unwrap(), (acc * dz).ln(), epsilon = 1e-8);
    }

    #[test]
    fn tighter_noise_raises_density_at_zero_residual() {
        let data = RegressionDataset::new(random(2, 4, 11), DMatrix::zeros(3, 4)).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for scale in [1.0, 0.5, 0.1, 0.01] {
            let st = LatentState::empty(3, 2, 4, DVector::from_element(3, scale), 1.0).unwrap();
            let v = predictive_log_likelihood(&st, &data).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn best_sample_selection() {
        let mut rng = ChainRng::seed_from_u64(12);
        let data = RegressionDataset::new(random(2, 6, 13), random(3, 6, 14)).unwrap();
        let a = init_state(&data, &Hyperparams::default(), 2, &mut rng).unwrap();
        assert_eq!(select_best_sample(std::slice::from_ref(&a), &data).unwrap(), 0);
        assert_eq!(select_best_sample(&[a.clone(), a.clone(), a.clone()], &data).unwrap(), 2);
        let mut good = LatentState::empty(3, 2, 6, DVector::from_element(3, 1.0), 1.0).unwrap();
        good.set_psi_y(DVector::from_element(3, 1.0));
        let mut bad = good.clone();
        bad.set_psi_y(DVector::from_element(3, 1e-6));
        let tail = vec![bad.clone(), good.clone(), bad];
        assert_eq!(select_best_sample(&tail, &data).unwrap(), 1);
        for st in &tail {
            assert!(joint_log_likelihood(&tail[1], &data).unwrap() >= joint_log_likelihood(st, &data).unwrap());
        }
        assert!(select_best_sample(&[], &data).is_err());
    }
}
