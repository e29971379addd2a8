//! Experiment orchestration: data preparation, seeded chains, persistence
//! and the comparison table.
//!
//! Output layout under the configured directory:
//!
//! ```text
//! dataset.txt            training source data (synthetic runs also write truth.json)
//! metrics.tsv            one row per model and chain
//! <model>/effective_config.toml
//! <model>/chain_<c>/trace.tsv         deterministic per-iteration record
//! <model>/chain_<c>/timing.tsv        CPU and wall seconds per iteration
//! <model>/chain_<c>/checkpoint.json   full chain state for `resume`
//! <model>/chain_<c>/{test,train}_{prediction,truth}.tsv
//! <model>/chain_<c>/metrics.json
//! ```
//!
//! Random streams: the split uses stream 0 of `ChaCha8(seed)` and chain `c`
//! uses stream `c + 1`, so adding chains or running them in parallel never
//! changes any individual chain.

pub mod config;

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::baselines::{cfr_options, fit_frr, init_cfr_state};
use crate::cputime::thread_cpu_time;
use crate::error::{NcfrError, Result};
use crate::eval::{
    predictive_log_likelihood_with, select_best_sample, summarize, MetricsReport, PredictionRule, RunArtifacts,
    TimingRecord, TraceRecord,
};
use crate::gibbs::{conditional_mean_p, gibbs_sweep, impute_missing, SamplerOptions, SweepConfig};
use crate::io;
use crate::linalg::diag_gaussian_ln_pdf;
use crate::model::{init_state, joint_log_likelihood, LatentState, RegressionDataset};
use crate::proposals::{ProposalKind, ProposalStrategy};
use crate::synth::{self, Split, SplitScheme};
use crate::ChainRng;

pub use config::{DataSource, ExperimentConfig, ModelSpec, NamedModel, NcfrSpec, Priors, RunConfig, Settings};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Random stream for chain `chain` under the root seed.
pub fn chain_rng(seed: u64, chain: usize) -> ChainRng {
    let mut rng = ChainRng::seed_from_u64(seed);
    rng.set_stream(chain as u64 + 1);
    rng
}

fn split_rng(seed: u64) -> ChainRng {
    let mut rng = ChainRng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

/// Load or generate the source dataset.
pub fn load_source(settings: &Settings) -> Result<(RegressionDataset, Option<synth::GroundTruth>)> {
    match &settings.data {
        DataSource::Synth(cfg) => {
            let (d, t) = synth::generate(cfg)?;
            Ok((d, Some(t)))
        }
        DataSource::File { path } => Ok((io::read_dataset(path)?, None)),
    }
}

pub fn prepare_split(settings: &Settings) -> Result<Split> {
    let (data, _) = load_source(settings)?;
    synth::split_with_size(&data, settings.scheme, settings.test_size, &mut split_rng(settings.seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ChainModel {
    Frr { r: DMatrix<f64>, psi: Vec<f64> },
    Sampler { state: LatentState },
}

/// Everything needed to continue a chain exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub chain: usize,
    pub completed: u64,
    model: ChainModel,
    /// Working responses, including the current imputations.
    working_y: DMatrix<f64>,
    rng: ChainRng,
    pub trace: Vec<TraceRecord>,
    pub timing: Vec<TimingRecord>,
    pub tail: Vec<LatentState>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| NcfrError::Serde(e.to_string()))?;
        io::write_file(path, &text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| NcfrError::io(path, e))?;
        let version = serde_json::from_str::<serde_json::Value>(&text)
            .map_err(|e| NcfrError::Serde(format!("{}: {e}", path.display())))?
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| NcfrError::Serde(format!("{}: checkpoint has no version", path.display())))?;
        if version != u64::from(CHECKPOINT_VERSION) {
            return Err(NcfrError::Version {
                found: u32::try_from(version).unwrap_or(u32::MAX),
                expected: CHECKPOINT_VERSION,
            });
        }
        serde_json::from_str(&text).map_err(|e| NcfrError::Serde(format!("{}: {e}", path.display())))
    }

    pub fn state(&self) -> Option<&LatentState> {
        match &self.model {
            ChainModel::Sampler { state } => Some(state),
            ChainModel::Frr { .. } => None,
        }
    }
}

/// Result of one chain.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainOutcome {
    pub name: String,
    pub chain: usize,
    pub report: MetricsReport,
    pub checkpoint: Checkpoint,
    pub artifacts: RunArtifacts,
}

fn sweep_config(cfg: &RunConfig) -> Option<SweepConfig> {
    let hp = cfg.hyperparams();
    let base = SamplerOptions {
        mask_prior: cfg.settings.mask_prior,
        k_max: cfg.settings.k_max,
        ..SamplerOptions::default()
    };
    match &cfg.model {
        ModelSpec::Frr { .. } => None,
        ModelSpec::Cfr { .. } => Some(SweepConfig {
            hp,
            strategy: ProposalStrategy::zero(),
            options: SamplerOptions { k_max: None, ..cfr_options() },
        }),
        ModelSpec::Ncfr(spec) => Some(SweepConfig {
            hp,
            strategy: spec.strategy,
            options: base,
        }),
    }
}

fn temperature(cfg: &RunConfig, iteration: u64) -> f64 {
    match &cfg.model {
        ModelSpec::Ncfr(spec) if spec.strategy.kind == ProposalKind::SimulatedAnnealing => {
            spec.schedule.temperature_at(iteration)
        }
        _ => 1.0,
    }
}

fn working_data(split: &Split, y: &DMatrix<f64>) -> Result<RegressionDataset> {
    let d = RegressionDataset::new(split.train.x().clone(), y.clone())?;
    d.with_missing(split.train.missing().iter().copied())
}

fn start_chain(cfg: &RunConfig, split: &Split, chain: usize) -> Result<Checkpoint> {
    let mut rng = chain_rng(cfg.settings.seed, chain);
    let train = &split.train;
    let model = match &cfg.model {
        ModelSpec::Frr { .. } => ChainModel::Frr {
            r: DMatrix::zeros(train.q(), train.p()),
            psi: vec![1.0; train.q()],
        },
        ModelSpec::Cfr { k, .. } => ChainModel::Sampler {
            state: init_cfr_state(train, &cfg.hyperparams(), *k, &mut rng)?,
        },
        ModelSpec::Ncfr(spec) => ChainModel::Sampler {
            state: init_state(train, &cfg.hyperparams(), spec.k_init, &mut rng)?,
        },
    };
    Ok(Checkpoint {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        chain,
        completed: 0,
        model,
        working_y: train.y().clone(),
        rng,
        trace: Vec::new(),
        timing: Vec::new(),
        tail: Vec::new(),
    })
}

fn frr_log_likelihoods(r: &DMatrix<f64>, train: &RegressionDataset, test: &RegressionDataset) -> (Vec<f64>, f64, f64) {
    let cols = train.observed_columns();
    let x = train.x().select_columns(&cols);
    let y = train.y().select_columns(&cols);
    let resid = y - r * x;
    let m = cols.len() as f64;
    let psi: Vec<f64> = (0..resid.nrows())
        .map(|i| (resid.row(i).norm_squared() / m).max(f64::MIN_POSITIVE))
        .collect();
    let jll: f64 = (0..resid.ncols()).map(|n| diag_gaussian_ln_pdf(resid.column(n).as_slice(), &psi)).sum();
    let test_resid = test.y() - r * test.x();
    let pll: f64 = (0..test_resid.ncols())
        .map(|n| diag_gaussian_ln_pdf(test_resid.column(n).as_slice(), &psi))
        .sum();
    (psi, jll, pll)
}

/// Advance a chain until `target` iterations are complete.
fn advance(ck: &mut Checkpoint, split: &Split, target: u64) -> Result<()> {
    let cfg = ck.config.clone();
    let retain = cfg.settings.retain;
    let rule = cfg.settings.prediction;
    let impute = cfg.settings.scheme == SplitScheme::Impute;
    let mut data = working_data(split, &ck.working_y)?;

    if let (ChainModel::Frr { r, psi }, ModelSpec::Frr { ridge }) = (&mut ck.model, &cfg.model) {
        if ck.completed > 0 {
            return Err(NcfrError::Contract("a ridge regression fit has no chain to extend".into()));
        }
        let cpu0 = thread_cpu_time();
        let wall0 = Instant::now();
        *r = fit_frr(&data, *ridge)?;
        let cpu = (thread_cpu_time() - cpu0).as_secs_f64();
        let wall = wall0.elapsed().as_secs_f64();
        let (noise, jll, pll) = frr_log_likelihoods(r, &data, &split.test);
        *psi = noise;
        ck.trace.push(TraceRecord {
            iteration: 0,
            k: data.p().min(data.q()),
            joint_loglik: jll,
            temperature: 1.0,
            pred_loglik: pll,
        });
        ck.timing.push(TimingRecord {
            iteration: 0,
            cpu_seconds: cpu,
            wall_seconds: wall,
        });
        ck.completed = 1;
        return Ok(());
    }

    let sweep = sweep_config(&cfg).expect("sampler model");
    let ChainModel::Sampler { state } = &mut ck.model else {
        return Err(NcfrError::Contract("checkpoint model does not match its configuration".into()));
    };
    let mut tail: VecDeque<LatentState> = ck.tail.drain(..).collect();
    for it in ck.completed..target {
        let t = temperature(&cfg, it);
        let cpu0 = thread_cpu_time();
        let wall0 = Instant::now();
        if impute {
            impute_missing(state, &mut data, &mut ck.rng)?;
        }
        let rep = gibbs_sweep(state, &data, &sweep, t, &mut ck.rng)?;
        let cpu = (thread_cpu_time() - cpu0).as_secs_f64();
        let wall = wall0.elapsed().as_secs_f64();
        let jll = joint_log_likelihood(state, &data)?;
        let smoothed = conditional_mean_p(state, &data)?;
        let pll = predictive_log_likelihood_with(&smoothed, &split.test, rule)?;
        ck.trace.push(TraceRecord {
            iteration: it,
            k: rep.post_sweep_k,
            joint_loglik: jll,
            temperature: t,
            pred_loglik: pll,
        });
        ck.timing.push(TimingRecord {
            iteration: it,
            cpu_seconds: cpu,
            wall_seconds: wall,
        });
        tail.push_back(smoothed);
        while tail.len() > retain {
            tail.pop_front();
        }
        log::debug!("{} chain {} iteration {it}: K = {}, joint = {jll:.3}", cfg.name, ck.chain, rep.post_sweep_k);
    }
    ck.tail = tail.into();
    ck.working_y = data.y().clone();
    ck.completed = target;
    Ok(())
}

fn predictions(ck: &Checkpoint, split: &Split) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let cols = split.train.observed_columns();
    let train_x = split.train.x().select_columns(&cols);
    let settings = &ck.config.settings;
    match &ck.model {
        ChainModel::Frr { r, .. } => Ok((r * split.test.x(), r * train_x)),
        ChainModel::Sampler { .. } => {
            let rule: PredictionRule = settings.prediction;
            if settings.average_tail {
                let mut test = DMatrix::zeros(split.test.q(), split.test.n());
                let mut train = DMatrix::zeros(split.train.q(), cols.len());
                for st in &ck.tail {
                    test += rule.predict(st, split.test.x());
                    train += rule.predict(st, &train_x);
                }
                let m = ck.tail.len() as f64;
                Ok((test / m, train / m))
            } else {
                let data = working_data(split, &ck.working_y)?;
                let best = &ck.tail[select_best_sample(&ck.tail, &data)?];
                Ok((rule.predict(best, split.test.x()), rule.predict(best, &train_x)))
            }
        }
    }
}

fn chain_dir(cfg: &RunConfig, chain: usize) -> PathBuf {
    cfg.output_dir().join(format!("chain_{chain}"))
}

fn finish(ck: Checkpoint, split: &Split) -> Result<ChainOutcome> {
    let (test_prediction, train_prediction) = predictions(&ck, split)?;
    let cols = split.train.observed_columns();
    let artifacts = RunArtifacts {
        trace: ck.trace.clone(),
        timing: ck.timing.clone(),
        test_prediction,
        test_truth: split.test.y().clone(),
        train_prediction,
        train_truth: split.train.y().select_columns(&cols),
        retain: ck.config.settings.retain,
    };
    let report = summarize(&artifacts)?;
    let dir = chain_dir(&ck.config, ck.chain);
    persist_artifacts(&dir, &artifacts)?;
    ck.save(&dir.join("checkpoint.json"))?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| NcfrError::Serde(e.to_string()))?;
    io::write_file(&dir.join("metrics.json"), &json)?;
    Ok(ChainOutcome {
        name: ck.config.name.clone(),
        chain: ck.chain,
        report,
        checkpoint: ck,
        artifacts,
    })
}

fn persist_artifacts(dir: &Path, a: &RunArtifacts) -> Result<()> {
    io::write_file(&dir.join("trace.tsv"), &io::format_trace(&a.trace))?;
    io::write_file(&dir.join("timing.tsv"), &io::format_timing(&a.timing))?;
    io::write_file(&dir.join("test_prediction.tsv"), &io::format_matrix(&a.test_prediction))?;
    io::write_file(&dir.join("test_truth.tsv"), &io::format_matrix(&a.test_truth))?;
    io::write_file(&dir.join("train_prediction.tsv"), &io::format_matrix(&a.train_prediction))?;
    io::write_file(&dir.join("train_truth.tsv"), &io::format_matrix(&a.train_truth))?;
    io::write_file(&dir.join("retain"), &format!("{}\n", a.retain))
}

/// Rebuild a chain's artifacts from its persisted files.
pub fn load_artifacts(dir: &Path) -> Result<RunArtifacts> {
    let retain_path = dir.join("retain");
    let retain_text = std::fs::read_to_string(&retain_path).map_err(|e| NcfrError::io(&retain_path, e))?;
    let retain = retain_text.trim().parse().map_err(|_| NcfrError::Parse {
        what: "retain",
        path: retain_path.clone(),
        line: 1,
        reason: "expected a count".into(),
    })?;
    Ok(RunArtifacts {
        trace: io::read_trace(&dir.join("trace.tsv"))?,
        timing: io::read_timing(&dir.join("timing.tsv"))?,
        test_prediction: io::read_matrix(&dir.join("test_prediction.tsv"))?,
        test_truth: io::read_matrix(&dir.join("test_truth.tsv"))?,
        train_prediction: io::read_matrix(&dir.join("train_prediction.tsv"))?,
        train_truth: io::read_matrix(&dir.join("train_truth.tsv"))?,
        retain,
    })
}

/// Run every chain of one model, chains in parallel.
pub fn run_experiment(cfg: &RunConfig) -> Result<Vec<ChainOutcome>> {
    cfg.validate()?;
    let split = prepare_split(&cfg.settings)?;
    run_with_split(cfg, &split)
}

fn run_with_split(cfg: &RunConfig, split: &Split) -> Result<Vec<ChainOutcome>> {
    io::write_file(&cfg.output_dir().join("effective_config.toml"), &cfg.to_toml()?)?;
    let iterations = match cfg.model {
        ModelSpec::Frr { .. } => 1,
        _ => cfg.settings.iterations as u64,
    };
    let results: Vec<Result<ChainOutcome>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..cfg.settings.chains)
            .map(|c| {
                scope.spawn(move || {
                    let mut ck = start_chain(cfg, split, c)?;
                    advance(&mut ck, split, iterations)?;
                    finish(ck, split)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(NcfrError::Contract("chain thread panicked".into()))))
            .collect()
    });
    results.into_iter().collect()
}

/// Run every model of an experiment and write the comparison table.
pub fn run_all(exp: &ExperimentConfig) -> Result<Vec<ChainOutcome>> {
    exp.validate()?;
    let (data, truth) = load_source(&exp.settings)?;
    let out = &exp.settings.output;
    io::write_dataset(&out.join("dataset.txt"), &data)?;
    if let Some(t) = truth {
        let json = serde_json::to_string(&t).map_err(|e| NcfrError::Serde(e.to_string()))?;
        io::write_file(&out.join("truth.json"), &json)?;
    }
    let split = synth::split_with_size(&data, exp.settings.scheme, exp.settings.test_size, &mut split_rng(exp.settings.seed))?;
    let mut all = Vec::new();
    for run in exp.runs() {
        log::info!("running {}", run.name);
        all.extend(run_with_split(&run, &split)?);
    }
    let rows: Vec<(String, usize, MetricsReport)> = all.iter().map(|o| (o.name.clone(), o.chain, o.report.clone())).collect();
    io::write_file(&out.join("metrics.tsv"), &metrics_table(&rows))?;
    Ok(all)
}

/// Continue a chain from its checkpoint for `extra` more iterations and
/// rewrite its artifacts.
pub fn resume(checkpoint: &Path, extra: u64) -> Result<ChainOutcome> {
    let mut ck = Checkpoint::load(checkpoint)?;
    let split = prepare_split(&ck.config.settings)?;
    let target = ck.completed + extra;
    advance(&mut ck, &split, target)?;
    ck.config.settings.iterations = usize::try_from(target).unwrap_or(usize::MAX);
    io::write_file(&ck.config.output_dir().join("effective_config.toml"), &ck.config.to_toml()?)?;
    finish(ck, &split)
}

pub const METRICS_HEADER: &str = "model\tchain\tnlse_median\tnlse_q1\tnlse_q3\ttrain_test_delta\tpred_loglik_mean\tk_mode\tk_max\tcpu_seconds_per_iter";

/// The comparison table, one row per model and chain.
pub fn metrics_table(rows: &[(String, usize, MetricsReport)]) -> String {
    let mut out = format!("# ncfr-metrics 1\n{METRICS_HEADER}\n");
    for (name, chain, r) in rows {
        let pll = r.pred_loglik_last.iter().sum::<f64>() / r.pred_loglik_last.len().max(1) as f64;
        let _ = writeln!(
            out,
            "{name}\t{chain}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{}\t{}\t{:?}",
            r.nlse_summary.median,
            r.nlse_summary.lower_quartile,
            r.nlse_summary.upper_quartile,
            r.train_test_delta,
            pll,
            r.k_mode().unwrap_or(0),
            r.k_last.iter().copied().max().unwrap_or(0),
            r.mean_seconds_per_iter(),
        );
    }
    out
}

/// Re-summarize every chain found under an output directory from its
/// persisted files and rewrite `metrics.tsv`.
pub fn report(out: &Path) -> Result<String> {
    let mut rows = Vec::new();
    let entries = std::fs::read_dir(out).map_err(|e| NcfrError::io(out, e))?;
    let mut models: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    models.sort();
    for model_dir in models {
        let name = model_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let mut chains: Vec<(usize, PathBuf)> = std::fs::read_dir(&model_dir)
            .map_err(|e| NcfrError::io(&model_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter_map(|p| {
                let c = p.file_name()?.to_str()?.strip_prefix("chain_")?.parse().ok()?;
                Some((c, p))
            })
            .collect();
        chains.sort();
        for (c, dir) in chains {
            rows.push((name.clone(), c, summarize(&load_artifacts(&dir)?)?));
        }
    }
    let table = metrics_table(&rows);
    io::write_file(&out.join("metrics.tsv"), &table)?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SynthConfig;

    fn small(dir: &Path, model: ModelSpec, iterations: usize) -> RunConfig {
        RunConfig {
            name: "m".into(),
            model,
            settings: Settings {
                data: DataSource::Synth(SynthConfig::new(4, 3, 2, 60, 1)),
                scheme: SplitScheme::Holdout,
                test_size: 20,
                iterations,
                burn_in: 0,
                retain: 5,
                seed: 7,
                output: dir.to_path_buf(),
                chains: 1,
                priors: Priors::default(),
                mask_prior: Default::default(),
                k_max: None,
                prediction: PredictionRule::Linear,
                average_tail: false,
            },
        }
    }

    fn ncfr_spec() -> ModelSpec {
        ModelSpec::Ncfr(NcfrSpec {
            noise_mode: crate::model::NoiseMode::Diagonal,
            alpha_mode: crate::model::AlphaMode::Sampled,
            strategy: ProposalStrategy::simulated_annealing(),
            schedule: Default::default(),
            k_init: 3,
        })
    }

    #[test]
    fn chain_streams_are_distinct() {
        use rand::Rng;
        let a: u64 = chain_rng(1, 0).random();
        let b: u64 = chain_rng(1, 1).random();
        let c: u64 = split_rng(1).random();
        assert!(a != b && b != c && a != c);
    }

    #[test]
    fn checkpoint_round_trip_and_version_check() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&small(dir.path(), ncfr_spec(), 8)).unwrap();
        let path = dir.path().join("m/chain_0/checkpoint.json");
        assert_eq!(Checkpoint::load(&path).unwrap(), out[0].checkpoint);
        let text = std::fs::read_to_string(&path).unwrap().replacen("\"version\":1", "\"version\":2", 1);
        std::fs::write(&path, text).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(NcfrError::Version { found: 2, expected: 1 })));
    }

    #[test]
    fn frr_runs_once_and_cannot_resume() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&small(dir.path(), ModelSpec::Frr { ridge: None }, 8)).unwrap();
        assert_eq!(out[0].artifacts.trace.len(), 1);
        assert!(resume(&dir.path().join("m/chain_0/checkpoint.json"), 3).is_err());
    }

    #[test]
    fn report_recomputes_the_table() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&small(dir.path(), ncfr_spec(), 8)).unwrap();
        let table = report(dir.path()).unwrap();
        let expect = metrics_table(&[("m".into(), 0, out[0].report.clone())]);
        assert_eq!(table, expect);
    }
}
