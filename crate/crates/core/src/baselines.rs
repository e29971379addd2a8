//! Parametric comparison models.
//!
//! * Full-rank regression (FRR): `Y = R X + E` fit by ridge least squares.
//! * Conditional factor regression (CFR): the NCFR sweep with the mask frozen
//!   to all ones, so `K` stays at its configured value.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NcfrError, Result};
use crate::gibbs::{gibbs_sweep, SamplerOptions, SweepConfig};
use crate::linalg::{sample_gamma, sample_inv_gamma, sample_normal};
use crate::model::{AlphaMode, Hyperparams, LatentState, NoiseMode, RegressionDataset};
use crate::proposals::ProposalStrategy;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineKind {
    Frr { ridge: Option<f64> },
    Cfr { k_fixed: usize },
}

impl BaselineKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BaselineKind::Frr { ridge: Some(r) } if !(r >= 0.0 && r.is_finite()) => {
                Err(NcfrError::config("ridge", format!("{r} must be a finite nonnegative number")))
            }
            BaselineKind::Cfr { k_fixed: 0 } => Err(NcfrError::config("k_fixed", "must be at least 1")),
            _ => Ok(()),
        }
    }
}

/// `1e-6 · tr(X X^T) / p`, a scale-aware jitter.
pub fn default_ridge(x: &DMatrix<f64>) -> f64 {
    1e-6 * x.norm_squared() / x.nrows() as f64
}

/// `R = Y X^T (X X^T + ridge I)^{-1}` over the observed columns.
///
/// Missing responses are dropped from the normal equations (complete-case
/// fitting). `None` selects [`default_ridge`].
pub fn fit_frr(data: &RegressionDataset, ridge: Option<f64>) -> Result<DMatrix<f64>> {
    let cols = data.observed_columns();
    if cols.is_empty() {
        return Err(NcfrError::Contract("no observed responses to fit".into()));
    }
    let x = data.x().select_columns(&cols);
    let y = data.y().select_columns(&cols);
    let ridge = ridge.unwrap_or_else(|| default_ridge(&x));
    if !(ridge >= 0.0) {
        return Err(NcfrError::config("ridge", format!("{ridge} is negative")));
    }
    let mut gram = &x * x.transpose();
    for j in 0..gram.nrows() {
        gram[(j, j)] += ridge;
    }
    let chol = gram.cholesky().ok_or_else(|| {
        NcfrError::numerical(
            "ridge regression",
            format!("X X^T + {ridge} I is not positive definite; use a ridge > 0"),
        )
    })?;
    // R^T = (X X^T + λI)^{-1} X Y^T
    let rt = chol.solve(&(&x * y.transpose()));
    if rt.iter().any(|v| !v.is_finite()) {
        return Err(NcfrError::numerical("ridge regression", "non-finite coefficients; use a ridge > 0"));
    }
    Ok(rt.transpose())
}

/// Sampler options for fixed-K factor regression.
pub fn cfr_options() -> SamplerOptions {
    SamplerOptions {
        update_mask: false,
        ..SamplerOptions::default()
    }
}

/// Prior draw of a CFR state: `k_fixed` features with an all-ones mask.
pub fn init_cfr_state<R: Rng + ?Sized>(
    data: &RegressionDataset,
    hp: &Hyperparams,
    k_fixed: usize,
    rng: &mut R,
) -> Result<LatentState> {
    hp.validate()?;
    if k_fixed == 0 {
        return Err(NcfrError::config("k_fixed", "must be at least 1"));
    }
    let (p, q, n) = (data.p(), data.q(), data.n());
    let psi_y = match hp.noise_mode {
        NoiseMode::Isotropic => DVector::from_element(q, sample_inv_gamma(hp.a, hp.b, rng)),
        NoiseMode::Diagonal => DVector::from_fn(q, |_, _| sample_inv_gamma(hp.a, hp.b, rng)),
    };
    let psi_z = match hp.noise_mode {
        NoiseMode::Isotropic => DVector::from_element(k_fixed, sample_inv_gamma(hp.a, hp.b, rng)),
        NoiseMode::Diagonal => DVector::from_fn(k_fixed, |_, _| sample_inv_gamma(hp.a, hp.b, rng)),
    };
    let psi_q = DVector::from_fn(k_fixed, |_, _| sample_inv_gamma(hp.c, hp.d, rng));
    let psi_p = DVector::from_fn(k_fixed, |_, _| sample_inv_gamma(hp.c, hp.d, rng));
    let qm = DMatrix::from_fn(q, k_fixed, |_, k| sample_normal(0.0, psi_q[k], rng));
    let pm = DMatrix::from_fn(k_fixed, p, |k, _| sample_normal(0.0, psi_p[k], rng));
    let px = &pm * data.x();
    let z = DMatrix::from_fn(k_fixed, n, |k, c| sample_normal(px[(k, c)], psi_z[k], rng));
    let alpha = match hp.alpha_mode {
        AlphaMode::Fixed { value } => value,
        AlphaMode::Sampled => sample_gamma(hp.g, hp.h, rng),
    };
    LatentState::from_parts(DMatrix::from_element(k_fixed, n, true), z, qm, pm, psi_y, psi_z, psi_q, psi_p, alpha)
}

/// Run a CFR chain and return every post-sweep state.
pub fn fit_cfr<R: Rng + ?Sized>(
    data: &RegressionDataset,
    k_fixed: usize,
    hp: &Hyperparams,
    iterations: usize,
    rng: &mut R,
) -> Result<Vec<LatentState>> {
    let mut state = init_cfr_state(data, hp, k_fixed, rng)?;
    let cfg = SweepConfig {
        hp: hp.clone(),
        strategy: ProposalStrategy::zero(),
        options: cfr_options(),
    };
    let mut chain = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        gibbs_sweep(&mut state, data, &cfg, 1.0, rng)?;
        chain.push(state.clone());
    }
    Ok(chain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    use crate::ChainRng;

    fn gaussian(rows: usize, cols: usize, rng: &mut ChainRng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| sample_normal(0.0, 1.0, rng))
    }

    #[test]
    fn identity_response_recovers_identity() {
        let mut rng = ChainRng::seed_from_u64(1);
        let x = gaussian(4, 30, &mut rng);
        let data = RegressionDataset::new(x.clone(), x).unwrap();
        let r = fit_frr(&data, Some(0.0)).unwrap();
        assert!((r - DMatrix::identity(4, 4)).abs().max() < 1e-10);
    }

    #[test]
    fn noiseless_recovery() {
        let mut rng = ChainRng::seed_from_u64(2);
        let x = gaussian(6, 50, &mut rng);
        let truth = gaussian(3, 6, &mut rng);
        let data = RegressionDataset::new(x.clone(), &truth * x).unwrap();
        let r = fit_frr(&data, Some(0.0)).unwrap();
        assert!((r - truth).abs().max() < 1e-8);
    }

    #[test]
    fn heavy_ridge_shrinks_to_zero() {
        let mut rng = ChainRng::seed_from_u64(3);
        let data = RegressionDataset::new(gaussian(3, 20, &mut rng), gaussian(2, 20, &mut rng)).unwrap();
        let r = fit_frr(&data, Some(1e15)).unwrap();
        assert!(r.abs().max() < 1e-12);
    }

    #[test]
    fn residual_is_orthogonal_to_inputs() {
        let mut rng = ChainRng::seed_from_u64(4);
        let data = RegressionDataset::new(gaussian(5, 40, &mut rng), gaussian(3, 40, &mut rng)).unwrap();
        let r = fit_frr(&data, Some(0.0)).unwrap();
        let resid = data.y() - &r * data.x();
        assert!((resid * data.x().transpose()).abs().max() < 1e-8);
    }

    #[test]
    fn singular_system_asks_for_a_ridge() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        let data = RegressionDataset::new(x, DMatrix::from_element(1, 3, 1.0)).unwrap();
        let err = fit_frr(&data, Some(0.0)).unwrap_err();
        assert!(err.to_string().contains("ridge > 0"), "{err}");
    }

    #[test]
    fn missing_columns_are_ignored() {
        let mut rng = ChainRng::seed_from_u64(5);
        let x = gaussian(3, 20, &mut rng);
        let y = gaussian(2, 20, &mut rng);
        let full = RegressionDataset::new(x.clone(), y.clone()).unwrap();
        let cols: Vec<usize> = (0..20).filter(|c| c % 4 != 0).collect();
        let sub = full.select_columns(&cols);
        let mut y_bad = y;
        for c in (0..20).step_by(4) {
            y_bad.column_mut(c).fill(1e6);
        }
        let masked = RegressionDataset::new(x, y_bad).unwrap().with_missing((0..20).step_by(4)).unwrap();
        let a = fit_frr(&sub, None).unwrap();
        let b = fit_frr(&masked, None).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            assert_relative_eq!(u, v, epsilon = 1e-10);
        }
    }

    #[test]
    fn cfr_keeps_k_and_a_dense_mask() {
        let mut rng = ChainRng::seed_from_u64(6);
        let data = RegressionDataset::new(gaussian(4, 15, &mut rng), gaussian(3, 15, &mut rng)).unwrap();
        let chain = fit_cfr(&data, 2, &Hyperparams::default(), 30, &mut rng).unwrap();
        assert_eq!(chain.len(), 30);
        for st in &chain {
            assert_eq!(st.k(), 2);
            assert!(st.s().iter().all(|&b| b));
            st.check_invariants().unwrap();
        }
    }
}
