//! Conditional updates and the full Gibbs sweep.
//!
//! A sweep visits every observation `n`, first resampling the mask entries
//! of features that are active elsewhere (collapsing over `z_kn`), then
//! running the feature birth/death move for features unique to `n`. After
//! the observation loop it redraws all active latent weights, every entry of
//! `Q`, every row of `P`, the variances and finally α.
//!
//! The response residual `E_y = Y - Q (S ⊙ Z)` is cached for the duration of
//! a sweep and updated incrementally by every step that changes it.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NcfrError, Result};
use crate::ibp::{harmonic, sample_alpha, MaskPrior};
use crate::linalg::{
    diag_gaussian_ln_pdf, rank1_gaussian_ln_pdf, sample_gaussian_precision, sample_inv_gamma,
    sample_normal,
};
use crate::model::{residual_y, AlphaMode, Hyperparams, LatentState, NoiseMode, RegressionDataset};
use crate::proposals::{birth_move_cached, ProposalStrategy};

/// Fixed variances given to features born while variance updates are off.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenVariances {
    pub psi_z: f64,
    pub psi_q: f64,
    pub psi_p: f64,
}

/// Switches that select the sampler variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerOptions {
    pub mask_prior: MaskPrior,
    /// `false` freezes the mask (fixed-K factor regression): no mask
    /// updates, no births or deaths, no α update.
    pub update_mask: bool,
    /// Reject any move that would take K above this bound.
    pub k_max: Option<usize>,
    /// Keep every variance fixed; new features receive these values.
    pub frozen_variances: Option<FrozenVariances>,
    /// `false` drops the response likelihood from every update, so the
    /// sweep samples the prior.
    pub use_likelihood: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            mask_prior: MaskPrior::Exchangeable,
            update_mask: true,
            k_max: None,
            frozen_variances: None,
            use_likelihood: true,
        }
    }
}

/// Everything a sweep needs besides the state, data and temperature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub hp: Hyperparams,
    pub strategy: ProposalStrategy,
    pub options: SamplerOptions,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub flips_attempted: usize,
    pub flips_accepted: usize,
    pub birth_moves_attempted: usize,
    pub birth_moves_accepted: usize,
    pub features_born: usize,
    pub features_died: usize,
    pub post_sweep_k: usize,
    pub sweep_seconds: f64,
}

/// Sweep-local cache: the response residual and the activation counts.
pub(crate) struct Workspace {
    pub resid: DMatrix<f64>,
    pub counts: Vec<usize>,
}

impl Workspace {
    pub fn new(state: &LatentState, data: &RegressionDataset) -> Result<Self> {
        Ok(Self {
            resid: residual_y(state, data)?,
            counts: state.active_counts(),
        })
    }
}

fn precision_weighted(q_col: &[f64], e: &[f64], psi_y: &[f64]) -> (f64, f64) {
    let mut qq = 0.0;
    let mut qe = 0.0;
    for i in 0..e.len() {
        let w = q_col[i] / psi_y[i];
        qq += w * q_col[i];
        qe += w * e[i];
    }
    (qq, qe)
}

/// `y_n - Σ_{j ≠ k} q_j s_jn z_jn`.
fn residue_without(state: &LatentState, data: &RegressionDataset, n: usize, k: usize) -> DVector<f64> {
    let mut e = data.y().column(n).into_owned();
    for j in 0..state.k() {
        if j != k && state.s[(j, n)] {
            e.axpy(-state.z[(j, n)], &state.q.column(j), 1.0);
        }
    }
    e
}

fn check_feature(state: &LatentState, data: &RegressionDataset, n: usize, k: usize) -> Result<()> {
    state.check_compatible(data)?;
    if k >= state.k() || n >= state.n() {
        return Err(NcfrError::Contract(format!(
            "feature {k} / observation {n} out of range (K={}, N={})",
            state.k(),
            state.n()
        )));
    }
    Ok(())
}

/// `log N(y_n | q_k p_k x_n + r, Ψ_y + Ψ_z(k) q_k q_k^T)` where `r` is the
/// fit of every other feature: the likelihood with `s_kn = 1` and `z_kn`
/// integrated out under `N(p_k x_n, Ψ_z(k))`.
pub fn collapsed_likelihood_active(state: &LatentState, data: &RegressionDataset, n: usize, k: usize) -> Result<f64> {
    check_feature(state, data, n, k)?;
    let mut e = residue_without(state, data, n, k);
    let mean = state.p.row(k).dot(&data.x().column(n).transpose());
    let q_col = state.q.column(k).into_owned();
    e.axpy(-mean, &q_col, 1.0);
    let v = rank1_gaussian_ln_pdf(e.as_slice(), state.psi_y.as_slice(), q_col.as_slice(), state.psi_z[k]);
    if !v.is_finite() {
        return Err(NcfrError::numerical("collapsed likelihood", format!("non-finite at (k={k}, n={n})")));
    }
    Ok(v)
}

/// `log N(y_n | r, Ψ_y)`: the likelihood with `s_kn = 0`.
pub fn collapsed_likelihood_inactive(state: &LatentState, data: &RegressionDataset, n: usize, k: usize) -> Result<f64> {
    check_feature(state, data, n, k)?;
    let e = residue_without(state, data, n, k);
    Ok(diag_gaussian_ln_pdf(e.as_slice(), state.psi_y.as_slice()))
}

/// Posterior log-odds of `s_kn = 1`; `±∞` at the prior-ratio boundaries.
pub fn mask_log_odds(
    state: &LatentState,
    data: &RegressionDataset,
    n: usize,
    k: usize,
    options: &SamplerOptions,
) -> Result<f64> {
    check_feature(state, data, n, k)?;
    let m_minus = state.active_counts()[k] - usize::from(state.s[(k, n)]);
    let rp = options.mask_prior.ratio(m_minus, state.n())?;
    if rp == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    if rp.is_infinite() {
        return Ok(f64::INFINITY);
    }
    let llr = if options.use_likelihood {
        collapsed_likelihood_active(state, data, n, k)? - collapsed_likelihood_inactive(state, data, n, k)?
    } else {
        0.0
    };
    Ok(rp.ln() + llr)
}

/// Outcome of one mask-entry update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskFlip {
    pub previous: bool,
    pub current: bool,
    pub prob_active: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Resample `s_kn` with `z_kn` integrated out, then redraw `z_kn` from its
/// conditional when the entry ends up active.
pub(crate) fn sample_mask_entry_cached<R: Rng + ?Sized>(
    state: &mut LatentState,
    data: &RegressionDataset,
    ws: &mut Workspace,
    n: usize,
    k: usize,
    options: &SamplerOptions,
    rng: &mut R,
) -> Result<MaskFlip> {
    let q = data.q();
    let previous = state.s[(k, n)];
    let m_minus = ws.counts[k] - usize::from(previous);
    let rp = options.mask_prior.ratio(m_minus, state.n())?;

    let q_col: Vec<f64> = state.q.column(k).iter().copied().collect();
    let mut e: Vec<f64> = ws.resid.column(n).iter().copied().collect();
    if previous {
        let z = state.z[(k, n)];
        for i in 0..q {
            e[i] += q_col[i] * z;
        }
    }
    let mean = state.p.row(k).dot(&data.x().column(n).transpose());
    let psi_z = state.psi_z[k];
    let psi_y = state.psi_y.as_slice();

    let prob_active = if rp == 0.0 {
        0.0
    } else if rp.is_infinite() {
        1.0
    } else if options.use_likelihood {
        let shifted: Vec<f64> = e.iter().zip(&q_col).map(|(ei, qi)| ei - qi * mean).collect();
        let llr = rank1_gaussian_ln_pdf(&shifted, psi_y, &q_col, psi_z) - diag_gaussian_ln_pdf(&e, psi_y);
        sigmoid(rp.ln() + llr)
    } else {
        rp / (1.0 + rp)
    };
    let current = rng.random::<f64>() < prob_active;

    if current {
        let (qq, qe) = if options.use_likelihood {
            precision_weighted(&q_col, &e, psi_y)
        } else {
            (0.0, 0.0)
        };
        let var = 1.0 / (1.0 / psi_z + qq);
        let z = sample_normal(var * (qe + mean / psi_z), var, rng);
        state.z[(k, n)] = z;
        for i in 0..q {
            e[i] -= q_col[i] * z;
        }
    }
    state.s[(k, n)] = current;
    ws.resid.column_mut(n).copy_from_slice(&e);
    if current != previous {
        if current {
            ws.counts[k] += 1;
        } else {
            ws.counts[k] -= 1;
        }
    }
    Ok(MaskFlip {
        previous,
        current,
        prob_active,
    })
}

/// Resample one mask entry of an existing feature.
///
/// Requires the feature to be active at some other observation; features
/// unique to `n` are handled by the birth/death move.
pub fn sample_mask_entry<R: Rng + ?Sized>(
    state: &mut LatentState,
    data: &RegressionDataset,
    n: usize,
    k: usize,
    options: &SamplerOptions,
    rng: &mut R,
) -> Result<MaskFlip> {
    check_feature(state, data, n, k)?;
    let mut ws = Workspace::new(state, data)?;
    let flip = sample_mask_entry_cached(state, data, &mut ws, n, k, options, rng)?;
    state.prune_dead();
    Ok(flip)
}

/// Conditional mean and variance of an active `z_kn`.
pub fn latent_weight_posterior(state: &LatentState, data: &RegressionDataset, k: usize, n: usize) -> Result<(f64, f64)> {
    check_feature(state, data, n, k)?;
    let e = residue_without(state, data, n, k);
    let q_col: Vec<f64> = state.q.column(k).iter().copied().collect();
    let (qq, qe) = precision_weighted(&q_col, e.as_slice(), state.psi_y.as_slice());
    let mean_prior = state.p.row(k).dot(&data.x().column(n).transpose());
    let var = 1.0 / (1.0 / state.psi_z[k] + qq);
    Ok((var * (qe + mean_prior / state.psi_z[k]), var))
}

/// Draw an active `z_kn` from its conditional and store it.
pub fn sample_latent_weight<R: Rng + ?Sized>(
    state: &mut LatentState,
    data: &RegressionDataset,
    k: usize,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    if !state.s.get((k, n)).copied().unwrap_or(false) {
        return Err(NcfrError::Contract(format!("z_({k},{n}) is inactive")));
    }
    let (mean, var) = latent_weight_posterior(state, data, k, n)?;
    let z = sample_normal(mean, var, rng);
    state.z[(k, n)] = z;
    Ok(z)
}

// Birth and pruning reorder features in a way that depends on the current
// values, so a fixed index scan would leak that information into the
// coupled coordinate updates. A fresh uniform order per sweep avoids it.
fn scan_order<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(rng);
    order
}

fn sample_latents_cached<R: Rng + ?Sized>(
    state: &mut LatentState,
    data: &RegressionDataset,
    ws: &mut Workspace,
    use_likelihood: bool,
    rng: &mut R,
) {
    let q = data.q();
    let px = &state.p * data.x();
    for k in scan_order(state.k(), rng) {
        let q_col: Vec<f64> = state.q.column(k).iter().copied().collect();
        let psi_z = state.psi_z[k];
        let mut qq = 0.0;
        if use_likelihood {
            for i in 0..q {
                qq += q_col[i] * q_col[i] / state.psi_y[i];
            }
        }
        let var = 1.0 / (1.0 / psi_z + qq);
        for n in 0..state.n() {
            if !state.s[(k, n)] {
                continue;
            }
            let old = state.z[(k, n)];
            let mut qe = 0.0;
            if use_likelihood {
                let col = ws.resid.column(n);
                for i in 0..q {
                    qe += q_col[i] * (col[i] + q_col[i] * old) / state.psi_y[i];
                }
            }
            let z = sample_normal(var * (qe + px[(k, n)] / psi_z), var, rng);
            state.z[(k, n)] = z;
            let delta = old - z;
            let mut col = ws.resid.column_mut(n);
            for i in 0..q {
                col[i] += q_col[i] * delta;
            }
        }
    }
}

/// Conditional mean and variance of `q_k(i)`.
pub fn q_entry_posterior(state: &LatentState, data: &RegressionDataset, i: usize, k: usize) -> Result<(f64, f64)> {
    state.check_compatible(data)?;
    if i >= data.q() || k >= state.k() {
        return Err(NcfrError::Contract(format!("Q entry ({i},{k}) out of range")));
    }
    let resid = residual_y(state, data)?;
    Ok(q_entry_moments(state, &resid, i, k, true))
}

fn q_entry_moments(state: &LatentState, resid: &DMatrix<f64>, i: usize, k: usize, use_likelihood: bool) -> (f64, f64) {
    let psi_q = state.psi_q[k];
    if !use_likelihood {
        return (0.0, psi_q);
    }
    let qik = state.q[(i, k)];
    let mut zz = 0.0;
    let mut ez = 0.0;
    for n in 0..state.n() {
        if state.s[(k, n)] {
            let z = state.z[(k, n)];
            zz += z * z;
            ez += (resid[(i, n)] + qik * z) * z;
        }
    }
    let psi_y = state.psi_y[i];
    let denom = psi_y + psi_q * zz;
    (psi_q * ez / denom, psi_q * psi_y / denom)
}

/// Draw `q_k(i)` from its conditional and store it.
pub fn sample_q_entry<R: Rng + ?Sized>(
    state: &mut LatentState,
    data: &RegressionDataset,
    i: usize,
    k: usize,
    rng: &mut R,
) -> Result<f64> {
    let (mean, var) = q_entry_posterior(state, data, i, k)?;
    let v = sample_normal(mean, var, rng);
    state.q[(i, k)] = v;
    Ok(v)
}

fn sample_q_cached<R: Rng + ?Sized>(
    state: &mut LatentState,
    data: &RegressionDataset,
    ws: &mut Workspace,
    use_likelihood: bool,
    rng: &mut R,
) {
    let active: Vec<Vec<(usize, f64)>> = (0..state.k())
        .map(|k| {
            (0..state.n())
                .filter(|&n| state.s[(k, n)])
                .map(|n| (n, state.z[(k, n)]))
                .collect()
        })
        .collect();
    let zz: Vec<f64> = active.iter().map(|a| a.iter().map(|(_, z)| z * z).sum()).collect();
    let order = scan_order(state.k(), rng);
    for i in 0..data.q() {
        let psi_y = state.psi_y[i];
        for &k in &order {
            let psi_q = state.psi_q[k];
            let old = state.q[(i, k)];
            let (mean, var) = if use_likelihood {
                let ez: f64 = active[k].iter().map(|&(n, z)| ws.resid[(i, n)] * z).sum::<f64>() + old * zz[k];
                let denom = psi_y + psi_q * zz[k];
                (psi_q * ez / denom, psi_q * psi_y / denom)
            } else {
                (0.0, psi_q)
            };
            let new = sample_normal(mean, var, rng);
            state.q[(i, k)] = new;
            let delta = old - new;
            for &(n, z) in &active[k] {
                ws.resid[(i, n)] += delta * z;
            }
        }
    }
}

/// Conditional of `p_k` as (mean, precision): precision
/// `I/Ψ_p(k) + X_k X_k^T / Ψ_z(k)`, mean `Λ^{-1} X_k z_k^T / Ψ_z(k)`, with
/// `X_k`, `z_k` restricted to the columns where the feature is active.
pub fn p_row_posterior(state: &LatentState, data: &RegressionDataset, k: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    state.check_compatible(data)?;
    if k >= state.k() {
        return Err(NcfrError::Contract(format!("feature {k} out of range")));
    }
    let (precision, h) = p_row_system(state, data, k);
    let chol = precision
        .clone()
        .cholesky()
        .ok_or_else(|| NcfrError::numerical("P row posterior", format!("precision of row {k} not positive definite")))?;
    Ok((chol.solve(&h), precision))
}

fn p_row_system(state: &LatentState, data: &RegressionDataset, k: usize) -> (DMatrix<f64>, DVector<f64>) {
    let p = data.p();
    let cols: Vec<usize> = (0..state.n()).filter(|&n| state.s[(k, n)]).collect();
    let xk = data.x().select_columns(&cols);
    let zk = DVector::from_iterator(cols.len(), cols.iter().map(|&n| state.z[(k, n)]));
    let inv_psi_z = 1.0 / state.psi_z[k];
    let mut precision = &xk * xk.transpose() * inv_psi_z;
    for j in 0..p {
        precision[(j, j)] += 1.0 / state.psi_p[k];
    }
    let h = &xk * zk * inv_psi_z;
    (precision, h)
}

/// Copy of `state` with every row of `P` replaced by its conditional
/// posterior mean. Predictions from this copy are Rao-Blackwellized over `P`,
/// which matters for features whose latent noise is so large that a single
/// draw of `p_k` is mostly prior noise.
pub fn conditional_mean_p(state: &LatentState, data: &RegressionDataset) -> Result<LatentState> {
    let mut out = state.clone();
    for k in 0..state.k() {
        let (mean, _) = p_row_posterior(state, data, k)?;
        out.p.row_mut(k).copy_from(&mean.transpose());
    }
    Ok(out)
}

/// Draw `p_k` from its conditional and store it.
pub fn sample_p_row<R: Rng + ?Sized>(
    state: &mut LatentState,
    data: &RegressionDataset,
    k: usize,
    rng: &mut R,
) -> Result<DVector<f64>> {
    state.check_compatible(data)?;
    if k >= state.k() {
        return Err(NcfrError::Contract(format!("feature {k} out of range")));
    }
    let (precision, h) = p_row_system(state, data, k);
    let (draw, _) = sample_gaussian_precision(precision, &h, rng)?;
    state.p.set_row(k, &draw.transpose());
    Ok(draw)
}

fn variance_update<R: Rng + ?Sized>(
    state: &mut LatentState,
    resid: &DMatrix<f64>,
    data: &RegressionDataset,
    hp: &Hyperparams,
    use_likelihood: bool,
    rng: &mut R,
) {
    let (q, n_obs) = (data.q(), data.n());
    let lik = if use_likelihood { 1.0 } else { 0.0 };

    let sse_y: Vec<f64> = (0..q)
        .map(|i| resid.row(i).iter().map(|e| e * e).sum::<f64>())
        .collect();
    match hp.noise_mode {
        NoiseMode::Diagonal => {
            for i in 0..q {
                state.psi_y[i] = sample_inv_gamma(hp.a + lik * n_obs as f64 / 2.0, hp.b + lik * sse_y[i] / 2.0, rng);
            }
        }
        NoiseMode::Isotropic => {
            let total: f64 = sse_y.iter().sum();
            let v = sample_inv_gamma(hp.a + lik * (q * n_obs) as f64 / 2.0, hp.b + lik * total / 2.0, rng);
            state.psi_y.fill(v);
        }
    }

    let k_count = state.k();
    if k_count > 0 {
        let px = &state.p * data.x();
        let mut sse_z = vec![0.0; k_count];
        let mut m = vec![0usize; k_count];
        for k in 0..k_count {
            for n in 0..state.n() {
                if state.s[(k, n)] {
                    let d = state.z[(k, n)] - px[(k, n)];
                    sse_z[k] += d * d;
                    m[k] += 1;
                }
            }
        }
        match hp.noise_mode {
            NoiseMode::Diagonal => {
                for k in 0..k_count {
                    state.psi_z[k] = sample_inv_gamma(hp.a + m[k] as f64 / 2.0, hp.b + sse_z[k] / 2.0, rng);
                }
            }
            NoiseMode::Isotropic => {
                let mt: usize = m.iter().sum();
                let st: f64 = sse_z.iter().sum();
                let v = sample_inv_gamma(hp.a + mt as f64 / 2.0, hp.b + st / 2.0, rng);
                state.psi_z.fill(v);
            }
        }
    }

    let (qd, pd) = (data.q() as f64, data.p() as f64);
    for k in 0..k_count {
        let qq = state.q.column(k).norm_squared();
        state.psi_q[k] = sample_inv_gamma(hp.c + qd / 2.0, hp.d + qq / 2.0, rng);
    }
    for k in 0..k_count {
        let pp = state.p.row(k).norm_squared();
        state.psi_p[k] = sample_inv_gamma(hp.c + pd / 2.0, hp.d + pp / 2.0, rng);
    }
}

/// Redraw `psi_y`, `psi_z`, `psi_q` and `psi_p` from their inverse-gamma
/// conditionals (shape/rate, with the usual half sum of squares).
pub fn sample_variances<R: Rng + ?Sized>(
    state: &mut LatentState,
    data: &RegressionDataset,
    hp: &Hyperparams,
    rng: &mut R,
) -> Result<()> {
    let resid = residual_y(state, data)?;
    variance_update(state, &resid, data, hp, true, rng);
    Ok(())
}

/// Draw every missing response column from `N(Q(s_n ⊙ z_n), Ψ_y)` and write
/// it into `data`.
pub fn impute_missing<R: Rng + ?Sized>(state: &LatentState, data: &mut RegressionDataset, rng: &mut R) -> Result<()> {
    state.check_compatible(data)?;
    let missing: Vec<usize> = data.missing().iter().copied().collect();
    for n in missing {
        let mut mean = DVector::zeros(data.q());
        for k in 0..state.k() {
            if state.s[(k, n)] {
                mean.axpy(state.z[(k, n)], &state.q.column(k), 1.0);
            }
        }
        let draw = DVector::from_fn(data.q(), |i, _| sample_normal(mean[i], state.psi_y[i], rng));
        data.set_y_column(n, &draw);
    }
    Ok(())
}

/// One full sweep over every unknown.
pub fn gibbs_sweep<R: Rng + ?Sized>(
    state: &mut LatentState,
    data: &RegressionDataset,
    cfg: &SweepConfig,
    temperature: f64,
    rng: &mut R,
) -> Result<SweepReport> {
    let started = Instant::now();
    state.check_compatible(data)?;
    let opts = &cfg.options;
    let mut report = SweepReport::default();
    let mut ws = Workspace::new(state, data)?;

    if opts.update_mask {
        let mut order: Vec<usize> = Vec::new();
        for n in 0..state.n() {
            order.clear();
            order.extend((0..state.k()).filter(|&k| !(state.s[(k, n)] && ws.counts[k] == 1)));
            order.shuffle(rng);
            for &k in &order {
                let flip = sample_mask_entry_cached(state, data, &mut ws, n, k, opts, rng)?;
                report.flips_attempted += 1;
                if flip.current != flip.previous {
                    report.flips_accepted += 1;
                }
            }
            let outcome = birth_move_cached(n, state, data, cfg, temperature, &mut ws, rng)?;
            if outcome.attempted {
                report.birth_moves_attempted += 1;
            }
            if outcome.accepted {
                report.birth_moves_accepted += 1;
                report.features_born += outcome.born;
                report.features_died += outcome.died;
            }
            if ws.counts.iter().any(|&m| m == 0) {
                let before = state.k();
                state.prune_dead();
                report.features_died += before - state.k();
                ws.counts = state.active_counts();
            }
        }
    }

    sample_latents_cached(state, data, &mut ws, opts.use_likelihood, rng);
    sample_q_cached(state, data, &mut ws, opts.use_likelihood, rng);
    for k in 0..state.k() {
        sample_p_row(state, data, k, rng)?;
    }
    if opts.frozen_variances.is_none() {
        variance_update(state, &ws.resid, data, &cfg.hp, opts.use_likelihood, rng);
    }
    if opts.update_mask {
        if let AlphaMode::Sampled = cfg.hp.alpha_mode {
            state.alpha = sample_alpha(state.k(), harmonic(state.n()), cfg.hp.g, cfg.hp.h, rng);
        }
    }

    report.post_sweep_k = state.k();
    report.sweep_seconds = started.elapsed().as_secs_f64();
    debug_assert!(state.check_invariants().is_ok());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    use crate::linalg::normal_ln_pdf;
    use crate::model::init_state;
    use crate::ChainRng;

    fn scalar_state(q: f64, p: f64, z: f64, psi_y: f64, psi_z: f64, psi_q: f64, psi_p: f64) -> LatentState {
        LatentState::from_parts(
            DMatrix::from_element(1, 1, true),
            DMatrix::from_element(1, 1, z),
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, p),
            DVector::from_element(1, psi_y),
            DVector::from_element(1, psi_z),
            DVector::from_element(1, psi_q),
            DVector::from_element(1, psi_p),
            1.0,
        )
        .unwrap()
    }

    fn scalar_data(x: f64, y: f64) -> RegressionDataset {
        RegressionDataset::new(DMatrix::from_element(1, 1, x), DMatrix::from_element(1, 1, y)).unwrap()
    }

    fn random_setup(seed: u64, p: usize, q: usize, n: usize, k: usize) -> (LatentState, RegressionDataset) {
        let mut rng = ChainRng::seed_from_u64(seed);
        let x = DMatrix::from_fn(p, n, |_, _| sample_normal(0.0, 1.0, &mut rng));
        let y = DMatrix::from_fn(q, n, |_, _| sample_normal(0.0, 1.0, &mut rng));
        let data = RegressionDataset::new(x, y).unwrap();
        let st = init_state(&data, &Hyperparams::default(), k, &mut rng).unwrap();
        (st, data)
    }

    #[test]
    fn zero_load_column_collapses_to_inactive_density() {
        let (mut st, data) = random_setup(1, 3, 4, 5, 3);
        st.q.column_mut(0).fill(0.0);
        for n in 0..data.n() {
            let a = collapsed_likelihood_active(&st, &data, n, 0).unwrap();
            let b = collapsed_likelihood_inactive(&st, &data, n, 0).unwrap();
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn vanishing_latent_variance_gives_plug_in_density() {
        let st = scalar_state(1.3, 0.7, 0.0, 0.4, 1e-12, 1.0, 1.0);
        let data = scalar_data(1.5, 2.0);
        let got = collapsed_likelihood_active(&st, &data, 0, 0).unwrap();
        let plug_in = normal_ln_pdf(2.0, 1.3 * 0.7 * 1.5, 0.4);
        assert_relative_eq!(got, plug_in, epsilon = 1e-9);
    }

    #[test]
    fn inactive_density_ignores_the_feature() {
        let (st, data) = random_setup(2, 3, 4, 5, 1);
        let mut other = st.clone();
        other.q.column_mut(0).fill(5.0);
        other.psi_z[0] = 123.0;
        for n in 0..data.n() {
            let a = collapsed_likelihood_inactive(&st, &data, n, 0).unwrap();
            assert_eq!(a, collapsed_likelihood_inactive(&other, &data, n, 0).unwrap());
            // K = 1: the mean is zero
            let b = diag_gaussian_ln_pdf(data.y().column(n).as_slice(), st.psi_y.as_slice());
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn inactive_density_matches_joint_likelihood_term() {
        let (st, data) = random_setup(3, 2, 3, 4, 3);
        let (n, k) = (1, 0);
        let mut off = st.clone();
        off.s[(k, n)] = false;
        if off.active_counts()[k] == 0 {
            return;
        }
        let e = residual_y(&off, &data).unwrap();
        let term: f64 = (0..data.q()).map(|i| normal_ln_pdf(e[(i, n)], 0.0, off.psi_y[i])).sum();
        assert_relative_eq!(collapsed_likelihood_inactive(&st, &data, n, k).unwrap(), term, epsilon = 1e-12);
    }

    #[test]
    fn latent_weight_reduces_to_prior_without_loads() {
        let (mut st, data) = random_setup(4, 3, 2, 4, 2);
        st.q.column_mut(1).fill(0.0);
        for n in 0..data.n() {
            if !st.s[(1, n)] {
                continue;
            }
            let (m, v) = latent_weight_posterior(&st, &data, 1, n).unwrap();
            let prior_mean = st.p.row(1).dot(&data.x().column(n).transpose());
            assert_relative_eq!(m, prior_mean, epsilon = 1e-12);
            assert_relative_eq!(v, st.psi_z[1], epsilon = 1e-12);
        }
    }

    #[test]
    fn latent_weight_tends_to_prior_under_huge_noise() {
        let (mut st, data) = random_setup(5, 3, 2, 4, 2);
        st.psi_y *= 1e12;
        for n in 0..data.n() {
            if !st.s[(0, n)] {
                continue;
            }
            let (m, v) = latent_weight_posterior(&st, &data, 0, n).unwrap();
            let prior_mean = st.p.row(0).dot(&data.x().column(n).transpose());
            assert_relative_eq!(m, prior_mean, max_relative = 1e-8, epsilon = 1e-9);
            assert_relative_eq!(v, st.psi_z[0], max_relative = 1e-8);
        }
    }

    #[test]
    fn q_entry_without_active_latents_is_prior() {
        // feature with a single active entry whose weight is zero
        let st = scalar_state(0.4, 1.0, 0.0, 0.5, 1.0, 2.5, 1.0);
        let data = scalar_data(1.0, 3.0);
        let (m, v) = q_entry_posterior(&st, &data, 0, 0).unwrap();
        assert_eq!(m, 0.0);
        assert_relative_eq!(v, 2.5, epsilon = 1e-15);
    }

    #[test]
    fn q_entry_with_flat_prior_tends_to_least_squares() {
        let (mut st, data) = random_setup(6, 3, 4, 30, 2);
        st.psi_q.fill(1e14);
        let resid = residual_y(&st, &data).unwrap();
        for i in 0..data.q() {
            let (m, _) = q_entry_posterior(&st, &data, i, 0).unwrap();
            // normal equation for y_i - rest = q z
            let mut num = 0.0;
            let mut den = 0.0;
            for n in 0..data.n() {
                if st.s[(0, n)] {
                    let z = st.z[(0, n)];
                    num += (resid[(i, n)] + st.q[(i, 0)] * z) * z;
                    den += z * z;
                }
            }
            assert_relative_eq!(m, num / den, max_relative = 1e-8);
        }
    }

    #[test]
    fn p_row_with_uninformative_latents_is_prior() {
        let (mut st, data) = random_setup(7, 3, 2, 5, 2);
        st.psi_z[0] = 1e300;
        let (mean, prec) = p_row_posterior(&st, &data, 0).unwrap();
        assert!(mean.iter().all(|v| v.abs() < 1e-250));
        for j in 0..3 {
            assert_relative_eq!(prec[(j, j)], 1.0 / st.psi_p[0], max_relative = 1e-12);
        }
    }

    #[test]
    fn p_row_mean_is_a_ridge_solution() {
        let (mut st, data) = random_setup(8, 5, 2, 20, 1);
        st.s.fill(true);
        let (mean, _) = p_row_posterior(&st, &data, 0).unwrap();
        let x = data.x();
        let z = st.z.row(0).transpose().into_owned();
        let lambda = st.psi_z[0] / st.psi_p[0];
        let mut a = x * x.transpose();
        for j in 0..5 {
            a[(j, j)] += lambda;
        }
        let ridge = a.cholesky().unwrap().solve(&(x * z));
        for j in 0..5 {
            assert_relative_eq!(mean[j], ridge[j], max_relative = 1e-10, epsilon = 1e-12);
        }
    }

    #[test]
    fn forced_prior_ratios_make_mask_updates_deterministic() {
        let (mut st, data) = random_setup(9, 2, 3, 4, 2);
        let mut rng = ChainRng::seed_from_u64(1);
        // m_(k,-n) = N - 1 under the shifted prior forces activation
        st.s.row_mut(0).fill(true);
        st.s[(0, 2)] = false;
        let opts = SamplerOptions {
            mask_prior: MaskPrior::Shifted,
            ..SamplerOptions::default()
        };
        for _ in 0..20 {
            let mut trial = st.clone();
            let f = sample_mask_entry(&mut trial, &data, 2, 0, &opts, &mut rng).unwrap();
            assert!(f.current);
            assert_eq!(f.prob_active, 1.0);
        }
        // m_(k,-n) = 0 switches the entry off
        let mut lone = st.clone();
        lone.s.row_mut(1).fill(false);
        lone.s[(1, 3)] = true;
        for _ in 0..20 {
            let mut trial = lone.clone();
            let f = sample_mask_entry(&mut trial, &data, 3, 1, &opts, &mut rng).unwrap();
            assert!(!f.current);
            assert_eq!(f.prob_active, 0.0);
        }
    }

    #[test]
    fn sweep_preserves_support() {
        let (mut st, data) = random_setup(10, 3, 4, 12, 4);
        let cfg = SweepConfig {
            hp: Hyperparams::default(),
            strategy: ProposalStrategy::plain_prior(),
            options: SamplerOptions::default(),
        };
        let mut rng = ChainRng::seed_from_u64(2);
        for it in 0..50 {
            let rep = gibbs_sweep(&mut st, &data, &cfg, 1.0, &mut rng).unwrap();
            st.check_invariants().unwrap();
            assert_eq!(rep.post_sweep_k, st.k(), "iteration {it}");
            let realized = residual_y(&st, &data).unwrap() + st.q() * st.masked_latent();
            for (a, b) in realized.iter().zip(data.y().iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_strategy_from_empty_stays_empty() {
        let (_, data) = random_setup(11, 3, 4, 12, 0);
        let mut st = LatentState::empty(4, 3, 12, DVector::from_element(4, 1.0), 1.0).unwrap();
        let cfg = SweepConfig {
            hp: Hyperparams::default(),
            strategy: ProposalStrategy::zero(),
            options: SamplerOptions::default(),
        };
        let mut rng = ChainRng::seed_from_u64(3);
        for _ in 0..30 {
            gibbs_sweep(&mut st, &data, &cfg, 1.0, &mut rng).unwrap();
            assert_eq!(st.k(), 0);
        }
    }

    #[test]
    fn imputation_overwrites_only_missing_columns() {
        let (st, data) = random_setup(12, 2, 3, 6, 2);
        let mut d = data.clone().with_missing([1, 4]).unwrap();
        impute_missing(&st, &mut d, &mut ChainRng::seed_from_u64(4)).unwrap();
        for n in 0..6 {
            let same = d.y().column(n) == data.y().column(n);
            assert_eq!(same, !(n == 1 || n == 4));
        }
    }
}
