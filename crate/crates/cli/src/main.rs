use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use aicau::acquisition::{BatchMode, Strategy};
use aicau::cobias::EstimatorKind;
use aicau::harness::{emit_outputs, plot_dir, prepare_output_dir, run_experiment, summarize, ExperimentConfig};
use aicau::oracle::ProblemType;

#[derive(Parser)]
#[command(name = "aicau", version, about = "Active learning benchmark for noisy regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write runs.csv, summary.csv and mse_curve.svg.
    Run(RunArgs),
    /// Redraw mse_curve.svg from every summary.csv under a directory.
    Plot {
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
    },
    /// Run the identity checks.
    Selftest {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON config; keys mirror the experiment fields, unknown keys are errors.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Starting point when no config file is given: desk, full-single or full-batch.
    #[arg(long, default_value = "desk", conflicts_with = "config")]
    preset: String,
    #[arg(long, value_parser = parse_problem_type)]
    problem_type: Option<ProblemType>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    estimator: Option<EstimatorKind>,
    #[arg(long)]
    batch_mode: Option<BatchMode>,
    #[arg(long, value_name = "N")]
    init_points: Option<usize>,
    #[arg(long, value_name = "N")]
    rounds: Option<usize>,
    #[arg(long, value_name = "M")]
    batch_size: Option<usize>,
    #[arg(long, value_name = "N")]
    grid: Option<usize>,
    #[arg(long, value_name = "N")]
    replicates: Option<usize>,
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn parse_problem_type(s: &str) -> Result<ProblemType, String> {
    let v: u8 = s.parse().map_err(|_| format!("expected 1, 2 or 3, got {s:?}"))?;
    ProblemType::try_from(v)
}

impl RunArgs {
    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                ExperimentConfig::from_json(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => ExperimentConfig::preset(&self.preset)?,
        };
        if let Some(v) = self.problem_type {
            c.problem_type = v;
        }
        if let Some(v) = self.strategy {
            c.strategy = v;
        }
        if let Some(v) = self.estimator {
            c.estimator = v;
        }
        if let Some(v) = self.batch_mode {
            c.batch_mode = v;
        }
        if let Some(v) = self.init_points {
            c.n_init = v;
        }
        if let Some(v) = self.rounds {
            c.n_rounds = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.grid {
            c.grid_resolution = v;
        }
        if let Some(v) = self.replicates {
            c.n_replicates = v;
        }
        if let Some(v) = self.seed {
            c.base_seed = v;
        }
        if let Some(v) = &self.out {
            c.output_path = v.to_string_lossy().into_owned();
        }
        c.validate()?;
        Ok(c)
    }
}

fn run(args: RunArgs) -> anyhow::Result<()> {
    let config = args.resolve()?;
    let dir = PathBuf::from(&config.output_path);
    prepare_output_dir(&dir, &config).with_context(|| format!("preparing {}", dir.display()))?;
    log::info!(
        "type {} {} / {} / {}: {} replicates x {} rounds",
        config.problem_type,
        config.strategy,
        config.estimator,
        config.batch_mode,
        config.n_replicates,
        config.n_rounds
    );
    let records = run_experiment(&config)?;
    emit_outputs(&records, &config, &dir)?;
    for r in records.iter().filter(|r| r.failed.is_some()) {
        log::warn!("seed {} failed: {}", r.seed, r.failed.as_deref().unwrap_or_default());
    }
    if let Some(last) = summarize(&records).last() {
        println!(
            "{}: round {} median mse {:.6e} (iqr {:.3e}, {} replicates) -> {}",
            last.label(),
            last.round,
            last.median,
            last.iqr,
            last.n_replicates,
            dir.display()
        );
    }
    if records.iter().all(|r| r.failed.is_some()) {
        bail!("every replicate failed");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match Cli::parse().command {
        Command::Run(args) => run(args),
        Command::Plot { input } => plot_dir(&input)
            .map(|p| println!("wrote {}", p.display()))
            .map_err(Into::into),
        Command::Selftest { seed } => {
            let results = aicau::selftest::run_all(seed);
            for r in &results {
                println!("[{}] {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            if results.iter().all(|r| r.passed) {
                Ok(())
            } else {
                Err(anyhow::anyhow!("selftest failed"))
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
