//! Gaussian densities and draws used by the conditional updates.
//!
//! All response covariances in the model are `diag(psi) + U W U^T` with a
//! diagonal noise term and a low-rank inflation, so densities are evaluated
//! with the Woodbury identity at `O(q k^2 + k^3)` instead of `O(q^3)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{NcfrError, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `log N(x | mean, var)` for a scalar.
#[inline]
pub fn normal_ln_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}

/// `log N(r | 0, diag(psi))`.
pub fn diag_gaussian_ln_pdf(r: &[f64], psi: &[f64]) -> f64 {
    debug_assert_eq!(r.len(), psi.len());
    r.iter()
        .zip(psi)
        .map(|(&ri, &pi)| -0.5 * (LN_2PI + pi.ln() + ri * ri / pi))
        .sum()
}

/// `log N(r | 0, diag(psi) + sigma2 u u^T)` via Sherman-Morrison and the
/// matrix determinant lemma.
pub fn rank1_gaussian_ln_pdf(r: &[f64], psi: &[f64], u: &[f64], sigma2: f64) -> f64 {
    let mut base = 0.0;
    let mut utu = 0.0; // u^T D^-1 u
    let mut utr = 0.0; // u^T D^-1 r
    for i in 0..r.len() {
        let inv = 1.0 / psi[i];
        base += LN_2PI + psi[i].ln() + r[i] * r[i] * inv;
        utu += u[i] * u[i] * inv;
        utr += u[i] * r[i] * inv;
    }
    let denom = 1.0 + sigma2 * utu;
    -0.5 * (base + denom.ln() - sigma2 * utr * utr / denom)
}

/// `log N(r | 0, diag(psi) + U diag(w) U^T)` for a `q x k` matrix `U`.
///
/// With `k = 0` this is the plain diagonal density.
pub fn low_rank_gaussian_ln_pdf(
    r: &DVector<f64>,
    psi: &DVector<f64>,
    u: &DMatrix<f64>,
    w: &[f64],
) -> Result<f64> {
    let q = r.len();
    let k = u.ncols();
    if psi.len() != q || u.nrows() != q || w.len() != k {
        return Err(NcfrError::Dimension(format!(
            "low-rank density: r {q}, psi {}, U {}x{}, w {}",
            psi.len(),
            u.nrows(),
            k,
            w.len()
        )));
    }
    let base = diag_gaussian_ln_pdf(r.as_slice(), psi.as_slice());
    if k == 0 {
        return Ok(base);
    }
    // D^-1 U and D^-1 r
    let mut du = u.clone();
    for j in 0..k {
        for i in 0..q {
            du[(i, j)] /= psi[i];
        }
    }
    let b = du.tr_mul(r); // U^T D^-1 r
    let mut a = u.tr_mul(&du); // U^T D^-1 U
    let mut ln_det_w = 0.0;
    for j in 0..k {
        if !(w[j] > 0.0) {
            return Err(NcfrError::numerical(
                "low-rank density",
                format!("non-positive inflation variance {} at {j}", w[j]),
            ));
        }
        a[(j, j)] += 1.0 / w[j];
        ln_det_w += w[j].ln();
    }
    let chol = a.cholesky().ok_or_else(|| {
        NcfrError::numerical("low-rank density", "capacitance matrix not positive definite")
    })?;
    let ln_det_a: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let ainv_b = chol.solve(&b);
    let quad_corr = b.dot(&ainv_b);
    Ok(base - 0.5 * (ln_det_w + ln_det_a) + 0.5 * quad_corr)
}

/// Draw from `N(Λ^{-1} h, Λ^{-1})` given the precision `Λ` and the
/// information vector `h`. Returns the draw and the mean.
pub fn sample_gaussian_precision<R: Rng + ?Sized>(
    precision: DMatrix<f64>,
    h: &DVector<f64>,
    rng: &mut R,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let dim = h.len();
    let chol = precision
        .cholesky()
        .ok_or_else(|| NcfrError::numerical("gaussian draw", "precision not positive definite"))?;
    let mean = chol.solve(h);
    let eps = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    // x = mean + L^{-T} eps has covariance (L L^T)^{-1}
    let offset = chol
        .l()
        .transpose()
        .solve_upper_triangular(&eps)
        .ok_or_else(|| NcfrError::numerical("gaussian draw", "singular Cholesky factor"))?;
    Ok((&mean + offset, mean))
}

#[inline]
pub fn sample_normal<R: Rng + ?Sized>(mean: f64, var: f64, rng: &mut R) -> f64 {
    mean + var.sqrt() * rng.sample::<f64, _>(StandardNormal)
}

/// Gamma draw under the shape/rate convention (mean = shape / rate).
pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    Gamma::new(shape, 1.0 / rate)
        .expect("gamma parameters must be positive")
        .sample(rng)
}

/// Inverse-gamma draw, shape/rate convention (mean = rate / (shape - 1)).
pub fn sample_inv_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    1.0 / sample_gamma(shape, rate, rng)
}
