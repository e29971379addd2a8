//! Metropolis-Hastings moves that create and retire features.
//!
//! At observation `n` the features active only at `n` (the singletons) are
//! proposed to be replaced by `κ*` fresh features drawn from the prior, with
//! `κ*` chosen by one of four candidate functions. Latent weights of both the
//! incoming and the outgoing features are integrated out of the acceptance
//! ratio; on acceptance the new weights are drawn from their joint
//! conditional.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NcfrError, Result};
use crate::gibbs::{SamplerOptions, SweepConfig, Workspace};
use crate::ibp::new_feature_count_prior;
use crate::linalg::{low_rank_gaussian_ln_pdf, sample_gaussian_precision, sample_inv_gamma, sample_normal};
use crate::model::{Hyperparams, LatentState, NoiseMode, RegressionDataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalKind {
    PlainPrior,
    SimulatedAnnealing,
    SpikeSlab,
    Zero,
}

/// Candidate function for the number of new features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalStrategy {
    pub kind: ProposalKind,
    /// Probability of proposing no new feature (spike-and-slab only).
    #[serde(default = "default_spike_weight")]
    pub spike_weight: f64,
    /// Largest `κ` ever proposed; the Poisson tail is folded into it.
    #[serde(default = "default_kappa_max")]
    pub kappa_max: usize,
}

fn default_spike_weight() -> f64 {
    0.5
}

fn default_kappa_max() -> usize {
    5
}

impl ProposalStrategy {
    pub fn new(kind: ProposalKind) -> Self {
        Self {
            kind,
            spike_weight: default_spike_weight(),
            kappa_max: default_kappa_max(),
        }
    }

    pub fn plain_prior() -> Self {
        Self::new(ProposalKind::PlainPrior)
    }

    pub fn simulated_annealing() -> Self {
        Self::new(ProposalKind::SimulatedAnnealing)
    }

    pub fn spike_slab(spike_weight: f64) -> Self {
        Self {
            spike_weight,
            ..Self::new(ProposalKind::SpikeSlab)
        }
    }

    pub fn zero() -> Self {
        Self::new(ProposalKind::Zero)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.spike_weight) {
            return Err(NcfrError::config("spike_weight", format!("{} is not in [0, 1]", self.spike_weight)));
        }
        if self.kind != ProposalKind::Zero && self.kappa_max == 0 {
            return Err(NcfrError::config("kappa_max", "must be at least 1"));
        }
        Ok(())
    }

    fn uses_prior_counts(&self) -> bool {
        matches!(self.kind, ProposalKind::PlainPrior | ProposalKind::SimulatedAnnealing)
    }
}

/// Geometric cooling with a floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub t0: f64,
    pub cool: f64,
    pub t_floor: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            t0: 1000.0,
            cool: 0.9,
            t_floor: 1e-3,
        }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_floor > 0.0) || !(self.t0 >= self.t_floor) || !self.t0.is_finite() {
            return Err(NcfrError::config("schedule", "need t0 >= t_floor > 0"));
        }
        if !(self.cool > 0.0 && self.cool <= 1.0) {
            return Err(NcfrError::config("schedule.cool", format!("{} is not in (0, 1]", self.cool)));
        }
        Ok(())
    }

    pub fn temperature_at(&self, iteration: u64) -> f64 {
        temperature_at(self, iteration)
    }
}

/// `max(T_floor, T0 · cool^iteration)`.
pub fn temperature_at(schedule: &AnnealSchedule, iteration: u64) -> f64 {
    let exp = i32::try_from(iteration).unwrap_or(i32::MAX);
    (schedule.t0 * schedule.cool.powi(exp)).max(schedule.t_floor)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KappaDraw {
    pub kappa: usize,
    pub ln_prob: f64,
}

/// Log-probability that the candidate function proposes `kappa`.
pub fn kappa_ln_prob(strategy: &ProposalStrategy, alpha: f64, n_total: usize, kappa: usize) -> f64 {
    match strategy.kind {
        ProposalKind::Zero => {
            if kappa == 0 {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        }
        ProposalKind::SpikeSlab => match kappa {
            0 => strategy.spike_weight.ln(),
            1 => (1.0 - strategy.spike_weight).ln(),
            _ => f64::NEG_INFINITY,
        },
        ProposalKind::PlainPrior | ProposalKind::SimulatedAnnealing => {
            let prior = new_feature_count_prior(alpha, n_total);
            let cap = strategy.kappa_max;
            if kappa < cap {
                prior.ln_pmf(kappa)
            } else if kappa == cap {
                prior.ln_tail(cap)
            } else {
                f64::NEG_INFINITY
            }
        }
    }
}

/// Draw the number of new features for one observation.
pub fn propose_kappa<R: Rng + ?Sized>(strategy: &ProposalStrategy, alpha: f64, n_total: usize, rng: &mut R) -> KappaDraw {
    let kappa = match strategy.kind {
        ProposalKind::Zero => 0,
        ProposalKind::SpikeSlab => usize::from(rng.random::<f64>() >= strategy.spike_weight),
        ProposalKind::PlainPrior | ProposalKind::SimulatedAnnealing => {
            new_feature_count_prior(alpha, n_total).sample(rng).min(strategy.kappa_max)
        }
    };
    KappaDraw {
        kappa,
        ln_prob: kappa_ln_prob(strategy, alpha, n_total, kappa),
    }
}

/// Parameters of the `κ` candidate features.
#[derive(Clone, Debug, PartialEq)]
pub struct BirthProposal {
    /// `q × κ`.
    pub q_new: DMatrix<f64>,
    /// `κ × p`.
    pub p_new: DMatrix<f64>,
    pub psi_z: Vec<f64>,
    pub psi_q: Vec<f64>,
    pub psi_p: Vec<f64>,
}

impl BirthProposal {
    pub fn kappa(&self) -> usize {
        self.q_new.ncols()
    }

    pub fn empty(q: usize, p: usize) -> Self {
        Self {
            q_new: DMatrix::zeros(q, 0),
            p_new: DMatrix::zeros(0, p),
            psi_z: Vec::new(),
            psi_q: Vec::new(),
            psi_p: Vec::new(),
        }
    }
}

/// Draw `kappa` candidate features from the prior, including their
/// variances.
pub fn draw_birth_proposal<R: Rng + ?Sized>(
    kappa: usize,
    state: &LatentState,
    data: &RegressionDataset,
    hp: &Hyperparams,
    options: &SamplerOptions,
    rng: &mut R,
) -> BirthProposal {
    let (q, p) = (data.q(), data.p());
    let mut out = BirthProposal {
        q_new: DMatrix::zeros(q, kappa),
        p_new: DMatrix::zeros(kappa, p),
        psi_z: Vec::with_capacity(kappa),
        psi_q: Vec::with_capacity(kappa),
        psi_p: Vec::with_capacity(kappa),
    };
    let shared = match hp.noise_mode {
        NoiseMode::Isotropic if state.k() > 0 => Some(state.psi_z[0]),
        NoiseMode::Isotropic if kappa > 0 && options.frozen_variances.is_none() => Some(sample_inv_gamma(hp.a, hp.b, rng)),
        _ => None,
    };
    for j in 0..kappa {
        let (vz, vq, vp) = match options.frozen_variances {
            Some(f) => (f.psi_z, f.psi_q, f.psi_p),
            None => {
                let vz = shared.unwrap_or_else(|| sample_inv_gamma(hp.a, hp.b, rng));
                let vq = sample_inv_gamma(hp.c, hp.d, rng);
                let vp = sample_inv_gamma(hp.c, hp.d, rng);
                (vz, vq, vp)
            }
        };
        for i in 0..q {
            out.q_new[(i, j)] = sample_normal(0.0, vq, rng);
        }
        for i in 0..p {
            out.p_new[(j, i)] = sample_normal(0.0, vp, rng);
        }
        out.psi_z.push(vz);
        out.psi_q.push(vq);
        out.psi_p.push(vp);
    }
    out
}

/// Features active at `n` and nowhere else.
pub fn singletons(state: &LatentState, n: usize) -> Vec<usize> {
    singletons_from_counts(state, &state.active_counts(), n)
}

fn singletons_from_counts(state: &LatentState, counts: &[usize], n: usize) -> Vec<usize> {
    (0..state.k()).filter(|&k| state.s[(k, n)] && counts[k] == 1).collect()
}

struct MoveTerms {
    /// `y_n` minus the fit of every non-singleton feature.
    base: DVector<f64>,
    ln_old: f64,
    ln_new: f64,
}

fn move_terms(
    proposal: &BirthProposal,
    n: usize,
    state: &LatentState,
    data: &RegressionDataset,
    resid_col: DVector<f64>,
    old: &[usize],
) -> Result<MoveTerms> {
    let x = data.x().column(n);
    let mut base = resid_col;
    for &k in old {
        base.axpy(state.z[(k, n)], &state.q.column(k), 1.0);
    }
    let q_old = state.q.select_columns(old);
    let p_old = state.p.select_rows(old);
    let w_old: Vec<f64> = old.iter().map(|&k| state.psi_z[k]).collect();
    let r_old = &base - &q_old * (&p_old * x);
    let ln_old = low_rank_gaussian_ln_pdf(&r_old, &state.psi_y, &q_old, &w_old)?;
    let r_new = &base - &proposal.q_new * (&proposal.p_new * x);
    let ln_new = low_rank_gaussian_ln_pdf(&r_new, &state.psi_y, &proposal.q_new, &proposal.psi_z)?;
    Ok(MoveTerms { base, ln_old, ln_new })
}

fn log_ratio_from_terms(
    terms: &MoveTerms,
    kappa_new: usize,
    kappa_old: usize,
    state: &LatentState,
    cfg: &SweepConfig,
    temperature: f64,
) -> f64 {
    let strategy = &cfg.strategy;
    let mut lr = 0.0;
    if cfg.options.use_likelihood {
        lr += terms.ln_new - terms.ln_old;
    }
    if strategy.kind == ProposalKind::SimulatedAnnealing {
        lr -= kappa_new as f64 / temperature;
    }
    if strategy.uses_prior_counts() {
        let prior = new_feature_count_prior(state.alpha, state.n());
        let alpha = state.alpha;
        let n = state.n();
        let fwd = prior.ln_pmf(kappa_new) - kappa_ln_prob(strategy, alpha, n, kappa_new);
        let rev = prior.ln_pmf(kappa_old) - kappa_ln_prob(strategy, alpha, n, kappa_old);
        lr += fwd - rev;
    }
    lr
}

/// Log acceptance ratio of replacing the singletons of observation `n` by
/// the proposed features.
///
/// For an observation without singletons this is the plain birth ratio:
/// the annealing penalty (simulated annealing only) plus
/// `log N(y_n | r + Q'P'x_n, Ψ_y + Q'Ψ'_z Q'^T) - log N(y_n | r, Ψ_y)`.
pub fn birth_acceptance_log_ratio(
    proposal: &BirthProposal,
    n: usize,
    state: &LatentState,
    data: &RegressionDataset,
    cfg: &SweepConfig,
    temperature: f64,
) -> Result<f64> {
    state.check_compatible(data)?;
    if n >= state.n() {
        return Err(NcfrError::Contract(format!("observation {n} out of range")));
    }
    if proposal.q_new.nrows() != data.q() || proposal.p_new.ncols() != data.p() || proposal.p_new.nrows() != proposal.kappa() {
        return Err(NcfrError::Dimension("birth proposal shape does not match the data".into()));
    }
    let old = singletons(state, n);
    if proposal.kappa() == 0 && old.is_empty() {
        return Err(NcfrError::Contract(
            "empty proposal at an observation without singleton features".into(),
        ));
    }
    let resid = crate::model::residual_y(state, data)?;
    let terms = move_terms(proposal, n, state, data, resid.column(n).into_owned(), &old)?;
    Ok(log_ratio_from_terms(&terms, proposal.kappa(), old.len(), state, cfg, temperature))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BirthOutcome {
    pub attempted: bool,
    pub accepted: bool,
    pub born: usize,
    pub died: usize,
}

pub(crate) fn birth_move_cached<R: Rng + ?Sized>(
    n: usize,
    state: &mut LatentState,
    data: &RegressionDataset,
    cfg: &SweepConfig,
    temperature: f64,
    ws: &mut Workspace,
    rng: &mut R,
) -> Result<BirthOutcome> {
    let old = singletons_from_counts(state, &ws.counts, n);
    let draw = propose_kappa(&cfg.strategy, state.alpha, state.n(), rng);
    if draw.kappa == 0 && old.is_empty() {
        return Ok(BirthOutcome::default());
    }
    let mut outcome = BirthOutcome {
        attempted: true,
        ..BirthOutcome::default()
    };
    let proposal = draw_birth_proposal(draw.kappa, state, data, &cfg.hp, &cfg.options, rng);
    let terms = move_terms(&proposal, n, state, data, ws.resid.column(n).into_owned(), &old)?;
    let lr = log_ratio_from_terms(&terms, draw.kappa, old.len(), state, cfg, temperature);
    let u: f64 = rng.random();
    let fits = cfg.options.k_max.is_none_or(|cap| state.k() - old.len() + draw.kappa <= cap);
    if !(fits && u.ln() < lr) {
        return Ok(outcome);
    }

    for &k in old.iter().rev() {
        state.remove_feature(k);
        ws.counts.remove(k);
    }
    let mut e = terms.base;
    let kappa = draw.kappa;
    if kappa > 0 {
        let beta = if cfg.options.use_likelihood { 1.0 } else { 0.0 };
        // joint conditional of the new weights
        let mut wq = proposal.q_new.clone();
        for j in 0..kappa {
            for i in 0..data.q() {
                wq[(i, j)] /= state.psi_y[i];
            }
        }
        let mut precision = proposal.q_new.tr_mul(&wq) * beta;
        let prior_mean = &proposal.p_new * data.x().column(n);
        let mut h = wq.tr_mul(&e) * beta;
        for j in 0..kappa {
            precision[(j, j)] += 1.0 / proposal.psi_z[j];
            h[j] += prior_mean[j] / proposal.psi_z[j];
        }
        let (z_new, _) = sample_gaussian_precision(precision, &h, rng)?;
        e -= &proposal.q_new * &z_new;
        let n_total = state.n();
        for j in 0..kappa {
            let mut mask = vec![false; n_total];
            mask[n] = true;
            let mut z_row = vec![0.0; n_total];
            z_row[n] = z_new[j];
            state.push_feature(
                &mask,
                &z_row,
                &proposal.q_new.column(j).into_owned(),
                &proposal.p_new.row(j).transpose(),
                proposal.psi_z[j],
                proposal.psi_q[j],
                proposal.psi_p[j],
            );
            ws.counts.push(1);
        }
    }
    ws.resid.set_column(n, &e);
    outcome.accepted = true;
    outcome.born = kappa;
    outcome.died = old.len();
    Ok(outcome)
}

/// One birth/death move at observation `n`. Rejection leaves the state
/// untouched.
pub fn birth_move<R: Rng + ?Sized>(
    n: usize,
    state: &mut LatentState,
    data: &RegressionDataset,
    cfg: &SweepConfig,
    temperature: f64,
    rng: &mut R,
) -> Result<BirthOutcome> {
    state.check_compatible(data)?;
    if n >= state.n() {
        return Err(NcfrError::Contract(format!("observation {n} out of range")));
    }
    let mut ws = Workspace::new(state, data)?;
    birth_move_cached(n, state, data, cfg, temperature, &mut ws, rng)
}
