//! Experiment configuration files (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{NcfrError, Result};
use crate::eval::PredictionRule;
use crate::ibp::MaskPrior;
use crate::model::{AlphaMode, Hyperparams, NoiseMode};
use crate::proposals::{AnnealSchedule, ProposalKind, ProposalStrategy};
use crate::synth::{SplitScheme, SynthConfig, DEFAULT_TEST_SIZE};

/// Environment variable that overrides the configured output directory.
pub const OUTPUT_ENV: &str = "NCFR_OUT";

/// Prior constants shared by every model of an experiment.
///
/// The defaults centre the noise variances near 0.1 and the load-factor
/// variances near 2 with finite prior variance. Unit shape/rate priors let
/// the latent noise of a feature drift to very large values, which turns the
/// feature into an unconditioned factor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Priors {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub g: f64,
    pub h: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Self {
            a: 2.0,
            b: 0.2,
            c: 2.0,
            d: 2.0,
            g: 1.0,
            h: 1.0,
        }
    }
}

impl Priors {
    pub fn hyperparams(&self, noise_mode: NoiseMode, alpha_mode: AlphaMode) -> Hyperparams {
        Hyperparams {
            a: self.a,
            b: self.b,
            c: self.c,
            d: self.d,
            g: self.g,
            h: self.h,
            noise_mode,
            alpha_mode,
        }
    }
}

fn diagonal() -> NoiseMode {
    NoiseMode::Diagonal
}

fn sampled() -> AlphaMode {
    AlphaMode::Sampled
}

fn annealing() -> ProposalStrategy {
    ProposalStrategy::simulated_annealing()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NcfrSpec {
    #[serde(default = "diagonal")]
    pub noise_mode: NoiseMode,
    #[serde(default = "sampled")]
    pub alpha_mode: AlphaMode,
    #[serde(default = "annealing")]
    pub strategy: ProposalStrategy,
    #[serde(default)]
    pub schedule: AnnealSchedule,
    pub k_init: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Frr {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ridge: Option<f64>,
    },
    Cfr {
        k: usize,
        #[serde(default = "diagonal")]
        noise_mode: NoiseMode,
    },
    Ncfr(NcfrSpec),
}

impl ModelSpec {
    fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Frr { ridge: Some(r) } if !(*r >= 0.0) => {
                Err(NcfrError::config("model.ridge", format!("{r} is negative")))
            }
            ModelSpec::Cfr { k: 0, .. } => Err(NcfrError::config("model.k", "must be at least 1")),
            ModelSpec::Ncfr(spec) => {
                spec.strategy.validate()?;
                spec.schedule.validate()?;
                if let AlphaMode::Fixed { value } = spec.alpha_mode {
                    if !(value > 0.0) {
                        return Err(NcfrError::config("model.alpha_mode.value", "must be positive"));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synth(SynthConfig),
    File { path: PathBuf },
}

/// Settings shared by every model of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub data: DataSource,
    pub scheme: SplitScheme,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    pub iterations: usize,
    #[serde(default)]
    pub burn_in: usize,
    #[serde(default = "default_retain")]
    pub retain: usize,
    #[serde(default)]
    pub seed: u64,
    pub output: PathBuf,
    #[serde(default = "default_chains")]
    pub chains: usize,
    #[serde(default)]
    pub priors: Priors,
    #[serde(default)]
    pub mask_prior: MaskPrior,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_max: Option<usize>,
    #[serde(default)]
    pub prediction: PredictionRule,
    /// Average predictions over the retained tail instead of using the
    /// single best sample.
    #[serde(default)]
    pub average_tail: bool,
}

fn default_test_size() -> usize {
    DEFAULT_TEST_SIZE
}

fn default_retain() -> usize {
    100
}

fn default_chains() -> usize {
    1
}

impl Settings {
    fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(NcfrError::config("iterations", "must be at least 1"));
        }
        if self.retain == 0 {
            return Err(NcfrError::config("retain", "must be at least 1"));
        }
        if self.burn_in + self.retain > self.iterations {
            return Err(NcfrError::config(
                "burn_in",
                format!(
                    "burn_in ({}) + retain ({}) exceeds iterations ({})",
                    self.burn_in, self.retain, self.iterations
                ),
            ));
        }
        if self.chains == 0 {
            return Err(NcfrError::config("chains", "must be at least 1"));
        }
        if self.test_size == 0 {
            return Err(NcfrError::config("test_size", "must be at least 1"));
        }
        let p = &self.priors;
        for (key, v) in [("a", p.a), ("b", p.b), ("c", p.c), ("d", p.d), ("g", p.g), ("h", p.h)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(NcfrError::config(format!("priors.{key}"), format!("{v} must be positive")));
            }
        }
        if let DataSource::Synth(s) = &self.data {
            s.validate().map_err(|e| match e {
                NcfrError::Config { key, reason } => NcfrError::Config {
                    key: format!("data.{key}"),
                    reason,
                },
                other => other,
            })?;
        }
        Ok(())
    }
}

/// One model under one set of settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub name: String,
    pub model: ModelSpec,
    #[serde(flatten)]
    pub settings: Settings,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        validate_name(&self.name)?;
        self.model.validate()?;
        self.settings.validate()
    }

    /// Hyperparameters seen by the sampler.
    pub fn hyperparams(&self) -> Hyperparams {
        let pr = &self.settings.priors;
        match &self.model {
            ModelSpec::Frr { .. } => pr.hyperparams(NoiseMode::Diagonal, AlphaMode::Sampled),
            ModelSpec::Cfr { noise_mode, .. } => pr.hyperparams(*noise_mode, AlphaMode::Sampled),
            ModelSpec::Ncfr(spec) => pr.hyperparams(spec.noise_mode, spec.alpha_mode),
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.settings.output.join(&self.name)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| NcfrError::Serde(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(toml_error)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn validate_name(name: &str) -> Result<()> {
    let ok = !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) && name != "." && name != "..";
    if ok {
        Ok(())
    } else {
        Err(NcfrError::config("name", format!("{name:?} must be a non-empty [A-Za-z0-9._-] string")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedModel {
    pub name: String,
    pub model: ModelSpec,
}

/// A set of models run against the same data, split and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub settings: Settings,
    pub models: Vec<NamedModel>,
}

fn toml_error(e: toml::de::Error) -> NcfrError {
    let msg = e.message().to_string();
    // the offending key is quoted in the message, e.g. "missing field `iterations`"
    let key = msg
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<document>".into());
    NcfrError::Config { key, reason: e.to_string() }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(toml_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| NcfrError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| NcfrError::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(NcfrError::config("models", "at least one model is required"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.models {
            if !seen.insert(m.name.as_str()) {
                return Err(NcfrError::config("models.name", format!("duplicate model name {:?}", m.name)));
            }
        }
        for run in self.runs() {
            run.validate()?;
        }
        Ok(())
    }

    /// One [`RunConfig`] per model.
    pub fn runs(&self) -> Vec<RunConfig> {
        self.models
            .iter()
            .map(|m| RunConfig {
                name: m.name.clone(),
                model: m.model.clone(),
                settings: self.settings.clone(),
            })
            .collect()
    }

    /// Apply command-line and environment overrides. `--out` wins over the
    /// environment variable, which wins over the file.
    pub fn apply_overrides(&mut self, seed: Option<u64>, out: Option<PathBuf>, chains: Option<usize>) {
        if let Some(s) = seed {
            self.settings.seed = s;
        }
        if let Some(o) = out.or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from)) {
            self.settings.output = o;
        }
        if let Some(c) = chains {
            self.settings.chains = c;
        }
    }
}

fn ncfr(strategy: ProposalStrategy, noise_mode: NoiseMode, alpha_mode: AlphaMode, k_init: usize) -> ModelSpec {
    ModelSpec::Ncfr(NcfrSpec {
        noise_mode,
        alpha_mode,
        strategy,
        schedule: AnnealSchedule::default(),
        k_init,
    })
}

/// The comparison roster: FRR, CFR at three fixed sizes and ten NCFR
/// variants. `k_levels` are the three fixed/initial sizes and `k_init` the
/// starting size of the non-zero NCFR variants.
pub fn default_roster(k_levels: [usize; 3], k_init: usize, fixed_alpha: f64) -> Vec<NamedModel> {
    let named = |name: String, model| NamedModel { name, model };
    let sa = ProposalStrategy::simulated_annealing();
    let d = NoiseMode::Diagonal;
    let s = AlphaMode::Sampled;
    let mut out = vec![named("FRR".into(), ModelSpec::Frr { ridge: None })];
    for k in k_levels {
        out.push(named(format!("CFR{k}"), ModelSpec::Cfr { k, noise_mode: d }));
    }
    out.extend([
        named("NCFR-Fixa".into(), ncfr(sa, d, AlphaMode::Fixed { value: fixed_alpha }, k_init)),
        named("NCFR-Smpa".into(), ncfr(sa, d, s, k_init)),
        named("NCFR-Iso".into(), ncfr(sa, NoiseMode::Isotropic, s, k_init)),
        named("NCFR-Diag".into(), ncfr(sa, d, s, k_init)),
        named("NCFR-PMH".into(), ncfr(ProposalStrategy::plain_prior(), d, s, k_init)),
        named("NCFR-SAMH".into(), ncfr(sa, d, s, k_init)),
        named("NCFR-SSMH".into(), ncfr(ProposalStrategy::spike_slab(0.5), d, s, k_init)),
    ]);
    for k in k_levels {
        out.push(named(format!("NCFR-ZMH{k}"), ncfr(ProposalStrategy::new(ProposalKind::Zero), d, s, k)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
scheme = "holdout_100"
iterations = 50
retain = 10
seed = 3
output = "out"

[data]
source = "synth"
p = 4
q = 3
k_true = 2
n = 120

[[models]]
name = "FRR"
model = { kind = "frr" }

[[models]]
name = "NCFR-SAMH"
[models.model]
kind = "ncfr"
k_init = 3
strategy = { kind = "simulated_annealing" }
alpha_mode = { mode = "fixed", value = 2.0 }
"#;

    #[test]
    fn parses_an_experiment() {
        let cfg = ExperimentConfig::from_toml(EXAMPLE).unwrap();
        assert_eq!(cfg.models.len(), 2);
        let runs = cfg.runs();
        assert_eq!(runs[1].hyperparams().alpha_mode, AlphaMode::Fixed { value: 2.0 });
        assert_eq!(runs[0].settings.test_size, 100);
    }

    #[test]
    fn run_config_round_trips() {
        for run in ExperimentConfig::from_toml(EXAMPLE).unwrap().runs() {
            let text = run.to_toml().unwrap();
            assert_eq!(RunConfig::from_toml(&text).unwrap(), run, "{text}");
        }
    }

    #[test]
    fn experiment_round_trips_with_the_roster() {
        let mut cfg = ExperimentConfig::from_toml(EXAMPLE).unwrap();
        cfg.models = default_roster([15, 20, 25], 10, 1.0);
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.models.len(), 14);
    }

    #[test]
    fn errors_name_the_key() {
        let bad = EXAMPLE.replace("retain = 10", "retain = 0");
        match ExperimentConfig::from_toml(&bad) {
            Err(NcfrError::Config { key, .. }) => assert_eq!(key, "retain"),
            other => panic!("{other:?}"),
        }
        let missing = EXAMPLE.replace("iterations = 50\n", "");
        match ExperimentConfig::from_toml(&missing) {
            Err(NcfrError::Config { key, .. }) => assert_eq!(key, "iterations"),
            other => panic!("{other:?}"),
        }
        let too_long = EXAMPLE.replace("retain = 10", "retain = 10\nburn_in = 45");
        assert!(matches!(ExperimentConfig::from_toml(&too_long), Err(NcfrError::Config { key, .. }) if key == "burn_in"));
    }

    #[test]
    fn overrides_take_precedence() {
        let mut cfg = ExperimentConfig::from_toml(EXAMPLE).unwrap();
        cfg.apply_overrides(Some(9), Some(PathBuf::from("/tmp/x")), Some(4));
        assert_eq!((cfg.settings.seed, cfg.settings.chains), (9, 4));
        assert_eq!(cfg.settings.output, PathBuf::from("/tmp/x"));
    }
}
