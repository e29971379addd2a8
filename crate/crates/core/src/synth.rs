//! Synthetic data resembling the NCFR generative process.
//!
//! `X` is standard Gaussian, `Z = P X + E_z`, the mask is i.i.d. Bernoulli
//! and `Y = Q (S ⊙ Z) + E_y`. The mask is deliberately not an IBP draw so the
//! data does not favour the model being evaluated.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{NcfrError, Result};
use crate::linalg::sample_normal;
use crate::model::RegressionDataset;
use crate::ChainRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub p: usize,
    pub q: usize,
    pub k_true: usize,
    pub n: usize,
    #[serde(default = "default_bernoulli_p")]
    pub bernoulli_p: f64,
    /// Variance of the response noise.
    #[serde(default = "default_noise")]
    pub noise_y: f64,
    /// Variance of the latent noise.
    #[serde(default = "default_noise")]
    pub noise_z: f64,
    #[serde(default)]
    pub seed: u64,
    /// Debug hook: force `Q = I` and `P = I` (requires `k_true = q = p`).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub identity_loads: bool,
}

fn default_bernoulli_p() -> f64 {
    0.5
}

fn default_noise() -> f64 {
    0.1
}

impl SynthConfig {
    pub fn new(p: usize, q: usize, k_true: usize, n: usize, seed: u64) -> Self {
        Self {
            p,
            q,
            k_true,
            n,
            bernoulli_p: default_bernoulli_p(),
            noise_y: default_noise(),
            noise_z: default_noise(),
            seed,
            identity_loads: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("p", self.p), ("q", self.q), ("k_true", self.k_true), ("n", self.n)] {
            if v == 0 {
                return Err(NcfrError::config(key, "must be at least 1"));
            }
        }
        if !(self.bernoulli_p > 0.0 && self.bernoulli_p <= 1.0) {
            return Err(NcfrError::config("bernoulli_p", format!("{} is not in (0, 1]", self.bernoulli_p)));
        }
        for (key, v) in [("noise_y", self.noise_y), ("noise_z", self.noise_z)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(NcfrError::config(key, format!("{v} must be positive")));
            }
        }
        if self.identity_loads && !(self.k_true == self.q && self.q == self.p) {
            return Err(NcfrError::config("identity_loads", "requires k_true = q = p"));
        }
        Ok(())
    }
}

/// Everything drawn while generating a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    pub s: DMatrix<bool>,
    pub z: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub e_y: DMatrix<f64>,
    pub e_z: DMatrix<f64>,
}

/// Draw a dataset. Entries of `Q` have unit variance and entries of `P`
/// variance `1/p`, so every latent weight has unit prior variance.
pub fn generate(cfg: &SynthConfig) -> Result<(RegressionDataset, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChainRng::seed_from_u64(cfg.seed);
    let (p, q, k, n) = (cfg.p, cfg.q, cfg.k_true, cfg.n);
    let x = DMatrix::from_fn(p, n, |_, _| sample_normal(0.0, 1.0, &mut rng));
    let (qm, pm) = if cfg.identity_loads {
        (DMatrix::identity(q, k), DMatrix::identity(k, p))
    } else {
        let qm = DMatrix::from_fn(q, k, |_, _| sample_normal(0.0, 1.0, &mut rng));
        let pm = DMatrix::from_fn(k, p, |_, _| sample_normal(0.0, 1.0 / p as f64, &mut rng));
        (qm, pm)
    };
    let e_z = DMatrix::from_fn(k, n, |_, _| sample_normal(0.0, cfg.noise_z, &mut rng));
    let z = &pm * &x + &e_z;
    let s = DMatrix::from_fn(k, n, |_, _| rng.random::<f64>() < cfg.bernoulli_p);
    let e_y = DMatrix::from_fn(q, n, |_, _| sample_normal(0.0, cfg.noise_y, &mut rng));
    let masked = DMatrix::from_fn(k, n, |r, c| if s[(r, c)] { z[(r, c)] } else { 0.0 });
    let y = &qm * masked + &e_y;
    let data = RegressionDataset::new(x, y)?;
    Ok((
        data,
        GroundTruth {
            config: cfg.clone(),
            s,
            z,
            q: qm,
            p: pm,
            e_y,
            e_z,
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitScheme {
    /// Test responses stay in the training set as missing values.
    #[serde(rename = "impute_100")]
    Impute,
    /// Test columns are removed from the training set.
    #[serde(rename = "holdout_100")]
    Holdout,
}

pub const DEFAULT_TEST_SIZE: usize = 100;

/// Train/test views of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub scheme: SplitScheme,
    /// Under `Impute` this is the full dataset with the test responses
    /// zeroed and marked missing.
    pub train: RegressionDataset,
    pub test: RegressionDataset,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Split with the default test size of 100.
pub fn split<R: Rng + ?Sized>(data: &RegressionDataset, scheme: SplitScheme, rng: &mut R) -> Result<Split> {
    split_with_size(data, scheme, DEFAULT_TEST_SIZE, rng)
}

pub fn split_with_size<R: Rng + ?Sized>(
    data: &RegressionDataset,
    scheme: SplitScheme,
    test_size: usize,
    rng: &mut R,
) -> Result<Split> {
    let n = data.n();
    if test_size == 0 || test_size >= n {
        return Err(NcfrError::Contract(format!("test size {test_size} must be in 1..{n}")));
    }
    let test_set: BTreeSet<usize> = index::sample(rng, n, test_size).into_iter().collect();
    let test_indices: Vec<usize> = test_set.iter().copied().collect();
    let train_indices: Vec<usize> = (0..n).filter(|i| !test_set.contains(i)).collect();
    let test = data.select_columns(&test_indices);
    let train = match scheme {
        SplitScheme::Holdout => data.select_columns(&train_indices),
        SplitScheme::Impute => {
            let mut y = data.y().clone();
            for &c in &test_indices {
                y.column_mut(c).fill(0.0);
            }
            let mut missing: BTreeSet<usize> = data.missing().clone();
            missing.extend(test_indices.iter().copied());
            RegressionDataset::new(data.x().clone(), y)?.with_missing(missing)?
        }
    };
    Ok(Split {
        scheme,
        train,
        test,
        train_indices,
        test_indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dimensions_follow_config() {
        let (d, t) = generate(&SynthConfig::new(70, 50, 20, 1000, 3)).unwrap();
        assert_eq!((d.p(), d.q(), d.n()), (70, 50, 1000));
        assert_eq!(t.q.shape(), (50, 20));
        assert_eq!(t.p.shape(), (20, 70));
    }

    #[test]
    fn bit_reproducible() {
        let cfg = SynthConfig::new(5, 4, 3, 50, 11);
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }

    #[test]
    fn near_identity_pipeline() {
        let cfg = SynthConfig {
            noise_y: 1e-12,
            noise_z: 1e-12,
            identity_loads: true,
            ..SynthConfig::new(4, 4, 4, 30, 5)
        };
        let (d, t) = generate(&cfg).unwrap();
        for r in 0..4 {
            for c in 0..30 {
                let expect = if t.s[(r, c)] { d.x()[(r, c)] } else { 0.0 };
                assert!((d.y()[(r, c)] - expect).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn activation_rate_matches_bernoulli_p() {
        let cfg = SynthConfig {
            bernoulli_p: 0.3,
            ..SynthConfig::new(3, 3, 10, 2000, 8)
        };
        let (_, t) = generate(&cfg).unwrap();
        let total = t.s.len() as f64;
        let rate = t.s.iter().filter(|&&b| b).count() as f64 / total;
        assert!((rate - 0.3).abs() < 3.0 * (0.3 * 0.7 / total).sqrt());
    }

    #[test]
    fn dense_noiseless_data_has_the_factor_rank() {
        let cfg = SynthConfig {
            bernoulli_p: 1.0,
            noise_y: 1e-300,
            noise_z: 1e-300,
            ..SynthConfig::new(8, 6, 3, 40, 9)
        };
        let (d, _) = generate(&cfg).unwrap();
        let sv = d.y().clone().svd(false, false).singular_values;
        let mut sorted: Vec<f64> = sv.iter().copied().collect();
        sorted.sort_by(|a, b| b.total_cmp(a));
        assert!(sorted[2] > 1e-3);
        assert!(sorted[3..].iter().all(|&v| v < 1e-8));
    }

    #[test]
    fn holdout_partition() {
        let (d, _) = generate(&SynthConfig::new(3, 2, 2, 1000, 1)).unwrap();
        let mut rng = ChainRng::seed_from_u64(4);
        let s = split(&d, SplitScheme::Holdout, &mut rng).unwrap();
        assert_eq!((s.train.n(), s.test.n()), (900, 100));
        let mut all: Vec<usize> = s.train_indices.iter().chain(&s.test_indices).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        let again = split(&d, SplitScheme::Holdout, &mut ChainRng::seed_from_u64(4)).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn impute_marks_test_columns_missing() {
        let (d, _) = generate(&SynthConfig::new(3, 2, 2, 300, 1)).unwrap();
        let s = split(&d, SplitScheme::Impute, &mut ChainRng::seed_from_u64(5)).unwrap();
        assert_eq!(s.train.n(), 300);
        assert_eq!(s.train.missing().iter().copied().collect::<Vec<_>>(), s.test_indices);
        for (j, &c) in s.test_indices.iter().enumerate() {
            assert_eq!(s.test.y().column(j), d.y().column(c));
        }
    }

    #[test]
    fn oversized_test_set_is_rejected() {
        let (d, _) = generate(&SynthConfig::new(3, 2, 2, 100, 1)).unwrap();
        assert!(matches!(
            split(&d, SplitScheme::Holdout, &mut ChainRng::seed_from_u64(0)),
            Err(NcfrError::Contract(_))
        ));
    }
}
