use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ncfr::runner::{self, config::OUTPUT_ENV, ExperimentConfig};
use ncfr::synth::{self, SynthConfig};
use ncfr::{io, NcfrError};

#[derive(Parser)]
#[command(name = "ncfr", version, about = "Non-parametric conditional factor regression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its ground-truth sidecar.
    Generate {
        /// TOML file with the synthetic-data settings.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: $NCFR_OUT or the current directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every model of an experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        chains: Option<usize>,
    },
    /// Continue a chain from its checkpoint.
    Resume {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Additional iterations to run.
        #[arg(long)]
        iterations: u64,
    },
    /// Rebuild the metrics table from persisted run files.
    Report {
        /// Experiment output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output_or_env(out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn run(cli: Cli) -> ncfr::Result<()> {
    match cli.command {
        Command::Generate { config, seed, out } => {
            let text = std::fs::read_to_string(&config).map_err(|e| NcfrError::io(&config, e))?;
            let mut cfg: SynthConfig = toml::from_str(&text).map_err(|e| NcfrError::Config {
                key: "<document>".into(),
                reason: e.to_string(),
            })?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dir = output_or_env(out);
            let (data, truth) = synth::generate(&cfg)?;
            io::write_dataset(&dir.join("dataset.txt"), &data)?;
            let json = serde_json::to_string(&truth).map_err(|e| NcfrError::Serde(e.to_string()))?;
            io::write_file(&dir.join("truth.json"), &json)?;
            println!("wrote {}", dir.join("dataset.txt").display());
        }
        Command::Run { config, seed, out, chains } => {
            let mut exp = ExperimentConfig::load(&config)?;
            exp.apply_overrides(seed, out, chains);
            exp.validate()?;
            runner::run_all(&exp)?;
            let table = std::fs::read_to_string(exp.settings.output.join("metrics.tsv"))
                .map_err(|e| NcfrError::io(exp.settings.output.join("metrics.tsv"), e))?;
            print!("{table}");
        }
        Command::Resume { checkpoint, iterations } => {
            let outcome = runner::resume(&checkpoint, iterations)?;
            let rows = [(outcome.name.clone(), outcome.chain, outcome.report)];
            print!("{}", runner::metrics_table(&rows));
        }
        Command::Report { out } => {
            print!("{}", runner::report(&output_or_env(out))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
