//! Model types, joint likelihood and prediction.
//!
//! Observations are columns: `X` is `p x N`, `Y` is `q x N`, the mask `S` and
//! latent weights `Z` are `K x N`, `Q` is `q x K` and `P` is `K x p`.
//!
//! Latent weights at inactive mask positions are kept in storage but carry no
//! meaning; nothing reads them until the entry is activated, at which point
//! they are redrawn.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NcfrError, Result};
use crate::linalg::{normal_ln_pdf, sample_gamma, sample_inv_gamma, sample_normal, LN_2PI};

/// Paired inputs and responses, with optional unobserved response columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionDataset {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
    missing: BTreeSet<usize>,
}

impl RegressionDataset {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.ncols() != y.ncols() {
            return Err(NcfrError::Dimension(format!(
                "X has {} columns but Y has {}",
                x.ncols(),
                y.ncols()
            )));
        }
        if x.ncols() == 0 || x.nrows() == 0 || y.nrows() == 0 {
            return Err(NcfrError::Dimension(format!(
                "dataset needs p, q, N >= 1 (got p={}, q={}, N={})",
                x.nrows(),
                y.nrows(),
                x.ncols()
            )));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(NcfrError::numerical("dataset X", format!("non-finite entry at flat index {i}")));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(NcfrError::numerical("dataset Y", format!("non-finite entry at flat index {i}")));
        }
        Ok(Self {
            x,
            y,
            missing: BTreeSet::new(),
        })
    }

    /// Mark response columns (0-based) as unobserved.
    pub fn with_missing<I: IntoIterator<Item = usize>>(mut self, missing: I) -> Result<Self> {
        let n = self.n();
        for m in missing {
            if m >= n {
                return Err(NcfrError::Dimension(format!(
                    "missing column {m} out of range for N={n}"
                )));
            }
            self.missing.insert(m);
        }
        Ok(self)
    }

    pub fn p(&self) -> usize {
        self.x.nrows()
    }

    pub fn q(&self) -> usize {
        self.y.nrows()
    }

    pub fn n(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn missing(&self) -> &BTreeSet<usize> {
        &self.missing
    }

    pub fn is_missing(&self, n: usize) -> bool {
        self.missing.contains(&n)
    }

    pub fn observed_columns(&self) -> Vec<usize> {
        (0..self.n()).filter(|n| !self.missing.contains(n)).collect()
    }

    /// Overwrite one response column (used for imputing missing responses).
    pub fn set_y_column(&mut self, n: usize, values: &DVector<f64>) {
        self.y.set_column(n, values);
    }

    /// New dataset holding the given columns in order; missing flags follow.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        let missing = cols
            .iter()
            .enumerate()
            .filter(|(_, c)| self.missing.contains(c))
            .map(|(i, _)| i)
            .collect();
        Self {
            x: self.x.select_columns(cols),
            y: self.y.select_columns(cols),
            missing,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// One shared variance for all of `psi_y` and one for all of `psi_z`.
    Isotropic,
    Diagonal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum AlphaMode {
    Fixed { value: f64 },
    Sampled,
}

/// Prior constants. All gamma-family laws use the shape/rate convention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Inverse-gamma shape and rate for the noise variances `psi_y`, `psi_z`.
    pub a: f64,
    pub b: f64,
    /// Inverse-gamma shape and rate for the load variances `psi_q`, `psi_p`.
    pub c: f64,
    pub d: f64,
    /// Gamma shape and rate for the IBP strength.
    pub g: f64,
    pub h: f64,
    pub noise_mode: NoiseMode,
    pub alpha_mode: AlphaMode,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            a: 1.0,
            b: 1.0,
            c: 1.0,
            d: 1.0,
            g: 1.0,
            h: 1.0,
            noise_mode: NoiseMode::Diagonal,
            alpha_mode: AlphaMode::Sampled,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("a", self.a),
            ("b", self.b),
            ("c", self.c),
            ("d", self.d),
            ("g", self.g),
            ("h", self.h),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(NcfrError::config(key, format!("must be a positive finite number, got {v}")));
            }
        }
        if let AlphaMode::Fixed { value } = self.alpha_mode {
            if !(value > 0.0 && value.is_finite()) {
                return Err(NcfrError::config("alpha", format!("fixed alpha must be positive, got {value}")));
            }
        }
        Ok(())
    }
}

/// One full sampler state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub(crate) s: DMatrix<bool>,
    pub(crate) z: DMatrix<f64>,
    pub(crate) q: DMatrix<f64>,
    pub(crate) p: DMatrix<f64>,
    pub(crate) psi_y: DVector<f64>,
    pub(crate) psi_z: DVector<f64>,
    pub(crate) psi_q: DVector<f64>,
    pub(crate) psi_p: DVector<f64>,
    pub(crate) alpha: f64,
}

/// Latent residual `S ⊙ Z - P X`; entries with `included == false` are
/// reported as zero and take no part in any sum.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentResidual {
    pub values: DMatrix<f64>,
    pub included: DMatrix<bool>,
}

impl LatentState {
    /// Assemble a state from its parts, checking every invariant.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        s: DMatrix<bool>,
        z: DMatrix<f64>,
        q: DMatrix<f64>,
        p: DMatrix<f64>,
        psi_y: DVector<f64>,
        psi_z: DVector<f64>,
        psi_q: DVector<f64>,
        psi_p: DVector<f64>,
        alpha: f64,
    ) -> Result<Self> {
        let state = Self {
            s,
            z,
            q,
            p,
            psi_y,
            psi_z,
            psi_q,
            psi_p,
            alpha,
        };
        state.check_invariants()?;
        Ok(state)
    }

    /// A state with no features.
    pub fn empty(q: usize, p: usize, n: usize, psi_y: DVector<f64>, alpha: f64) -> Result<Self> {
        Self::from_parts(
            DMatrix::from_element(0, n, false),
            DMatrix::zeros(0, n),
            DMatrix::zeros(q, 0),
            DMatrix::zeros(0, p),
            psi_y,
            DVector::zeros(0),
            DVector::zeros(0),
            DVector::zeros(0),
            alpha,
        )
    }

    pub fn k(&self) -> usize {
        self.s.nrows()
    }

    pub fn n(&self) -> usize {
        self.s.ncols()
    }

    pub fn s(&self) -> &DMatrix<bool> {
        &self.s
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn psi_y(&self) -> &DVector<f64> {
        &self.psi_y
    }

    pub fn psi_z(&self) -> &DVector<f64> {
        &self.psi_z
    }

    pub fn psi_q(&self) -> &DVector<f64> {
        &self.psi_q
    }

    pub fn psi_p(&self) -> &DVector<f64> {
        &self.psi_p
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn set_alpha(&mut self, alpha: f64) {
        self.alpha = alpha;
    }

    pub fn set_psi_y(&mut self, psi_y: DVector<f64>) {
        self.psi_y = psi_y;
    }

    /// Per-feature activation counts `m_k`.
    pub fn active_counts(&self) -> Vec<usize> {
        (0..self.k())
            .map(|k| self.s.row(k).iter().filter(|&&b| b).count())
            .collect()
    }

    /// `S ⊙ Z`.
    pub fn masked_latent(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.k(), self.n(), |k, n| if self.s[(k, n)] { self.z[(k, n)] } else { 0.0 })
    }

    pub fn check_invariants(&self) -> Result<()> {
        let k = self.s.nrows();
        let n = self.s.ncols();
        let q = self.q.nrows();
        let dims_ok = self.z.nrows() == k
            && self.z.ncols() == n
            && self.q.ncols() == k
            && self.p.nrows() == k
            && self.psi_z.len() == k
            && self.psi_q.len() == k
            && self.psi_p.len() == k
            && self.psi_y.len() == q;
        if !dims_ok {
            return Err(NcfrError::Dimension(format!(
                "state shapes inconsistent: S {}x{}, Z {}x{}, Q {}x{}, P {}x{}, psi_y {}, psi_z {}, psi_q {}, psi_p {}",
                k,
                n,
                self.z.nrows(),
                self.z.ncols(),
                q,
                self.q.ncols(),
                self.p.nrows(),
                self.p.ncols(),
                self.psi_y.len(),
                self.psi_z.len(),
                self.psi_q.len(),
                self.psi_p.len()
            )));
        }
        for (name, v) in [
            ("psi_y", &self.psi_y),
            ("psi_z", &self.psi_z),
            ("psi_q", &self.psi_q),
            ("psi_p", &self.psi_p),
        ] {
            if let Some(i) = v.iter().position(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(NcfrError::numerical(
                    "state invariants",
                    format!("{name}[{i}] = {} is not a positive finite variance", v[i]),
                ));
            }
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(NcfrError::numerical("state invariants", format!("alpha = {}", self.alpha)));
        }
        if let Some(row) = (0..k).find(|&r| !self.s.row(r).iter().any(|&b| b)) {
            return Err(NcfrError::Contract(format!("mask row {row} has no active entry")));
        }
        Ok(())
    }

    pub(crate) fn check_compatible(&self, data: &RegressionDataset) -> Result<()> {
        if self.n() != data.n() || self.q.nrows() != data.q() || self.p.ncols() != data.p() {
            return Err(NcfrError::Dimension(format!(
                "state (N={}, q={}, p={}) does not match data (N={}, q={}, p={})",
                self.n(),
                self.q.nrows(),
                self.p.ncols(),
                data.n(),
                data.q(),
                data.p()
            )));
        }
        Ok(())
    }

    /// Append a feature. `mask` and `z` have length `N`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn push_feature(
        &mut self,
        mask: &[bool],
        z: &[f64],
        q_col: &DVector<f64>,
        p_row: &DVector<f64>,
        psi_z: f64,
        psi_q: f64,
        psi_p: f64,
    ) {
        let k = self.k();
        let n = self.n();
        let s = std::mem::replace(&mut self.s, DMatrix::from_element(0, 0, false));
        self.s = s.insert_row(k, false);
        let zm = std::mem::replace(&mut self.z, DMatrix::zeros(0, 0));
        self.z = zm.insert_row(k, 0.0);
        for col in 0..n {
            self.s[(k, col)] = mask[col];
            self.z[(k, col)] = z[col];
        }
        let qm = std::mem::replace(&mut self.q, DMatrix::zeros(0, 0));
        self.q = qm.insert_column(k, 0.0);
        self.q.set_column(k, q_col);
        let pm = std::mem::replace(&mut self.p, DMatrix::zeros(0, 0));
        self.p = pm.insert_row(k, 0.0);
        self.p.set_row(k, &p_row.transpose());
        for (v, val) in [
            (&mut self.psi_z, psi_z),
            (&mut self.psi_q, psi_q),
            (&mut self.psi_p, psi_p),
        ] {
            let old = std::mem::replace(v, DVector::zeros(0));
            *v = old.insert_row(k, val);
        }
    }

    pub(crate) fn remove_feature(&mut self, k: usize) {
        let s = std::mem::replace(&mut self.s, DMatrix::from_element(0, 0, false));
        self.s = s.remove_row(k);
        let z = std::mem::replace(&mut self.z, DMatrix::zeros(0, 0));
        self.z = z.remove_row(k);
        let q = std::mem::replace(&mut self.q, DMatrix::zeros(0, 0));
        self.q = q.remove_column(k);
        let p = std::mem::replace(&mut self.p, DMatrix::zeros(0, 0));
        self.p = p.remove_row(k);
        for v in [&mut self.psi_z, &mut self.psi_q, &mut self.psi_p] {
            let old = std::mem::replace(v, DVector::zeros(0));
            *v = old.remove_row(k);
        }
    }

    /// Remove features with no active entry. Returns how many were removed.
    pub fn prune_dead(&mut self) -> usize {
        let mut removed = 0;
        let mut k = 0;
        while k < self.k() {
            if self.s.row(k).iter().any(|&b| b) {
                k += 1;
            } else {
                self.remove_feature(k);
                removed += 1;
            }
        }
        removed
    }

    /// Relabel features: new feature `i` is old feature `perm[i]`.
    pub fn permute_features(&self, perm: &[usize]) -> Result<Self> {
        let k = self.k();
        let mut seen = vec![false; k];
        if perm.len() != k || perm.iter().any(|&i| i >= k || std::mem::replace(&mut seen[i], true)) {
            return Err(NcfrError::Contract(format!("{perm:?} is not a permutation of 0..{k}")));
        }
        let n = self.n();
        Ok(Self {
            s: DMatrix::from_fn(k, n, |r, c| self.s[(perm[r], c)]),
            z: DMatrix::from_fn(k, n, |r, c| self.z[(perm[r], c)]),
            q: self.q.select_columns(perm),
            p: self.p.select_rows(perm),
            psi_y: self.psi_y.clone(),
            psi_z: DVector::from_fn(k, |r, _| self.psi_z[perm[r]]),
            psi_q: DVector::from_fn(k, |r, _| self.psi_q[perm[r]]),
            psi_p: DVector::from_fn(k, |r, _| self.psi_p[perm[r]]),
            alpha: self.alpha,
        })
    }

    /// Point prediction `Q P x`; the mask is not applied.
    pub fn predict(&self, x: &DVector<f64>) -> DVector<f64> {
        if self.k() == 0 {
            return DVector::zeros(self.q.nrows());
        }
        &self.q * (&self.p * x)
    }

    /// Prediction averaging over the mask of a new observation:
    /// `Q diag(m_k / (N + 1)) P x`, the IBP predictive activation rates.
    pub fn predict_expected_mask(&self, x: &DVector<f64>) -> DVector<f64> {
        if self.k() == 0 {
            return DVector::zeros(self.q.nrows());
        }
        let rates = self.activation_rates();
        let latent = (&self.p * x).component_mul(&rates);
        &self.q * latent
    }

    /// `m_k / (N + 1)` for each feature.
    pub fn activation_rates(&self) -> DVector<f64> {
        let denom = (self.n() + 1) as f64;
        DVector::from_iterator(self.k(), self.active_counts().into_iter().map(|m| m as f64 / denom))
    }
}

/// Draw an initial state from the priors.
///
/// The mask is `k_init` rows of fair coin flips with dead rows dropped; every
/// continuous quantity comes from its prior. The draw order is fixed, so the
/// result is a pure function of the random stream.
pub fn init_state<R: Rng + ?Sized>(
    data: &RegressionDataset,
    hp: &Hyperparams,
    k_init: usize,
    rng: &mut R,
) -> Result<LatentState> {
    hp.validate()?;
    let (p, q, n) = (data.p(), data.q(), data.n());
    let psi_y = match hp.noise_mode {
        NoiseMode::Isotropic => DVector::from_element(q, sample_inv_gamma(hp.a, hp.b, rng)),
        NoiseMode::Diagonal => DVector::from_fn(q, |_, _| sample_inv_gamma(hp.a, hp.b, rng)),
    };
    let shared_psi_z = match hp.noise_mode {
        NoiseMode::Isotropic => Some(sample_inv_gamma(hp.a, hp.b, rng)),
        NoiseMode::Diagonal => None,
    };
    let masks: Vec<Vec<bool>> = (0..k_init)
        .map(|_| (0..n).map(|_| rng.random::<bool>()).collect::<Vec<_>>())
        .filter(|row| row.iter().any(|&b| b))
        .collect();

    let alpha_seed = 1.0;
    let mut state = LatentState::empty(q, p, n, psi_y, alpha_seed)?;
    for mask in &masks {
        let psi_z = shared_psi_z.unwrap_or_else(|| sample_inv_gamma(hp.a, hp.b, rng));
        let psi_q = sample_inv_gamma(hp.c, hp.d, rng);
        let psi_p = sample_inv_gamma(hp.c, hp.d, rng);
        let q_col = DVector::from_fn(q, |_, _| sample_normal(0.0, psi_q, rng));
        let p_row = DVector::from_fn(p, |_, _| sample_normal(0.0, psi_p, rng));
        let px = data.x().tr_mul(&p_row);
        let z: Vec<f64> = (0..n).map(|c| sample_normal(px[c], psi_z, rng)).collect();
        state.push_feature(mask, &z, &q_col, &p_row, psi_z, psi_q, psi_p);
    }
    // With K = 0 an isotropic psi_z has nowhere to live; the first birth
    // draws it afresh from IG(a, b), its conditional when no entry is active.
    state.alpha = match hp.alpha_mode {
        AlphaMode::Fixed { value } => value,
        AlphaMode::Sampled => sample_gamma(hp.g, hp.h, rng),
    };
    state.check_invariants()?;
    Ok(state)
}

/// `E_y = Y - Q (S ⊙ Z)`.
pub fn residual_y(state: &LatentState, data: &RegressionDataset) -> Result<DMatrix<f64>> {
    state.check_compatible(data)?;
    if state.k() == 0 {
        return Ok(data.y().clone());
    }
    Ok(data.y() - &state.q * state.masked_latent())
}

/// `E_z = S ⊙ Z - P X` restricted to active entries.
pub fn residual_z(state: &LatentState, data: &RegressionDataset) -> Result<LatentResidual> {
    state.check_compatible(data)?;
    let px = &state.p * data.x();
    let values = DMatrix::from_fn(state.k(), state.n(), |k, n| {
        if state.s[(k, n)] {
            state.z[(k, n)] - px[(k, n)]
        } else {
            0.0
        }
    });
    Ok(LatentResidual {
        values,
        included: state.s.clone(),
    })
}

/// `Σ_n log N(y_n | Q(s_n ⊙ z_n), Ψ_y)` over observed columns plus
/// `Σ_{s_kn = 1} log N(z_kn | p_k x_n, Ψ_z(k))`.
pub fn joint_log_likelihood(state: &LatentState, data: &RegressionDataset) -> Result<f64> {
    let ey = residual_y(state, data)?;
    let mut total = 0.0;
    let q = data.q();
    let ln_psi: Vec<f64> = state.psi_y.iter().map(|v| v.ln()).collect();
    for n in 0..data.n() {
        if data.is_missing(n) {
            continue;
        }
        for i in 0..q {
            let e = ey[(i, n)];
            let term = -0.5 * (LN_2PI + ln_psi[i] + e * e / state.psi_y[i]);
            if !term.is_finite() {
                return Err(NcfrError::numerical(
                    "joint log-likelihood (response)",
                    format!("non-finite term at (i={i}, n={n})"),
                ));
            }
            total += term;
        }
    }
    let px = &state.p * data.x();
    for k in 0..state.k() {
        for n in 0..state.n() {
            if state.s[(k, n)] {
                let term = normal_ln_pdf(state.z[(k, n)], px[(k, n)], state.psi_z[k]);
                if !term.is_finite() {
                    return Err(NcfrError::numerical(
                        "joint log-likelihood (latent)",
                        format!("non-finite term at (k={k}, n={n})"),
                    ));
                }
                total += term;
            }
        }
    }
    Ok(total)
}
