//! `epct` — desk-scale two-stage few-shot classification pipeline: dataset
//! synthesis, contrastive pre-training, cross-view episodic meta-training,
//! episodic evaluation, and the verification subcommands backing them.

mod fixtures;
mod report;

use clap::{Args, Parser, Subcommand};
use epct_core::data::split::load_split;
use epct_core::train::config::{ConfigError, RunConfig};
use epct_core::train::loops::{
    metatest_loop, metatrain_loop, pretrain_loop, synthesize_dataset, TrainError,
};
use epct_core::train::metrics::read_metrics;
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "epct",
    version,
    about = "Two-stage few-shot classification: contrastive pre-training, cross-view episodic meta-training and episodic evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Key-value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, repeatable: --set meta.beta=0.1
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test dataset pair.
    Synth {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Contrastive pre-training on the base split.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
        /// Resume from a mid-run checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Cross-view episodic meta-training from a pre-trained checkpoint.
    Metatrain {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint to initialize the encoder and projection head from.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Episodic evaluation of a checkpoint on the novel split.
    Metatest {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint to evaluate.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Finite-difference checks over every op and loss; prints one row each.
    Gradcheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Evaluate the losses on a fixture set through the library and the
    /// literal-summation reference, printing both to 12 significant digits.
    Oracle {
        /// Fixture directory to check.
        #[arg(long)]
        fixtures: Option<PathBuf>,
        /// Write a freshly generated fixture set here instead.
        #[arg(long)]
        emit: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Summarize a metrics stream into curves.csv and summary.txt.
    Report {
        /// Path to a metrics.jsonl file.
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Numeric(_) => "numeric",
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let msg = e.to_string();
        match e.exit_code() {
            2 => CliError::Config(msg),
            3 => CliError::Data(msg),
            _ => CliError::Numeric(msg),
        }
    }
}

fn main() {
    std::process::exit(run(Cli::parse()).map_or_else(
        |e| {
            eprintln!("error[{}]: {}", e.category(), e);
            e.code()
        },
        |_| 0,
    ));
}

fn build_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for pair in &common.set {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            CliError::Config(format!("--set expects KEY=VALUE, got `{pair}`"))
        })?;
        cfg.apply(key.trim(), value)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_train_split(cfg: &RunConfig, min: Option<usize>) -> Result<epct_core::data::DatasetSplit, CliError> {
    load_split(Path::new(&cfg.data.train_manifest), min)
        .map_err(|e| CliError::Data(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { common } => {
            let cfg = build_config(&common)?;
            let (train, test) = synthesize_dataset(&cfg, &common.out)?;
            println!("train manifest: {}", train.display());
            println!("test manifest: {}", test.display());
            Ok(())
        }
        Command::Pretrain { common, resume } => {
            let cfg = build_config(&common)?;
            let train = load_train_split(&cfg, None)?;
            let out = pretrain_loop(&cfg, &train, &common.out, resume.as_deref())?;
            println!("checkpoint: {}", out.final_checkpoint.display());
            println!("metrics: {}", out.metrics_path.display());
            Ok(())
        }
        Command::Metatrain {
            common,
            init,
            resume,
        } => {
            let cfg = build_config(&common)?;
            let min = cfg.meta.shots + cfg.meta.queries;
            let train = load_train_split(&cfg, Some(min))?;
            let out = metatrain_loop(&cfg, &train, &init, &common.out, resume.as_deref())?;
            println!("checkpoint: {}", out.final_checkpoint.display());
            println!("metrics: {}", out.metrics_path.display());
            Ok(())
        }
        Command::Metatest { common, ckpt } => {
            let cfg = build_config(&common)?;
            let min = cfg.test.shots + cfg.test.queries;
            let test = load_split(Path::new(&cfg.data.test_manifest), Some(min))
                .map_err(|e| CliError::Data(e.to_string()))?;
            let report = metatest_loop(&cfg, &test, &ckpt, &common.out)?;
            println!(
                "accuracy over {} episodes ({}-way {}-shot): {:.4} ± {:.4}",
                report.episodes, report.ways, report.shots, report.mean_accuracy, report.ci95
            );
            Ok(())
        }
        Command::Gradcheck { seed } => {
            let rows = epct_core::gradcheck::full_suite(seed)
                .map_err(|e| CliError::Numeric(e.to_string()))?;
            println!("{:<28} {:>14} {:>8}  status", "case", "max rel err", "coords");
            let mut worst = 0.0f64;
            for row in &rows {
                let ok = row.max_rel_err < 1e-4;
                worst = worst.max(row.max_rel_err);
                println!(
                    "{:<28} {:>14.3e} {:>8}  {}",
                    row.name,
                    row.max_rel_err,
                    row.checked,
                    if ok { "pass" } else { "FAIL" }
                );
            }
            if worst < 1e-4 {
                println!("all {} cases pass (worst {worst:.3e} < 1e-4)", rows.len());
                Ok(())
            } else {
                Err(CliError::Numeric(format!(
                    "gradient check failed: worst relative error {worst:.3e} >= 1e-4"
                )))
            }
        }
        Command::Oracle {
            fixtures: fixture_dir,
            emit,
            seed,
        } => match (fixture_dir, emit) {
            (None, Some(dir)) => {
                let mut set = fixtures::generate(seed);
                fixtures::save(&mut set, &dir).map_err(fixture_error)?;
                println!("fixture set written to {}", dir.display());
                Ok(())
            }
            (Some(dir), None) => {
                let set = fixtures::load(&dir).map_err(fixture_error)?;
                let comparisons = fixtures::compare(&set).map_err(fixture_error)?;
                let tol = 1e-9;
                let mut all_pass = true;
                for c in &comparisons {
                    let pass = c.pass(tol);
                    all_pass &= pass;
                    println!(
                        "{:<24} library {:>19.12e}  reference {:>19.12e}  |Δ| {:>10.3e}  {}",
                        c.name,
                        c.library,
                        c.oracle,
                        c.delta(),
                        if pass { "pass" } else { "FAIL" }
                    );
                }
                if all_pass {
                    Ok(())
                } else {
                    Err(CliError::Numeric(
                        "oracle comparison failed: library and reference disagree".to_string(),
                    ))
                }
            }
            _ => Err(CliError::Config(
                "oracle needs exactly one of --fixtures DIR or --emit DIR".to_string(),
            )),
        },
        Command::Report { metrics, out } => {
            let records = read_metrics(&metrics).map_err(|e| CliError::Data(e.to_string()))?;
            let rendered = report::render(&records);
            std::fs::create_dir_all(&out)
                .map_err(|e| CliError::Data(format!("cannot create {}: {e}", out.display())))?;
            let csv_path = out.join("curves.csv");
            let summary_path = out.join("summary.txt");
            std::fs::write(&csv_path, &rendered.csv)
                .map_err(|e| CliError::Data(format!("cannot write {}: {e}", csv_path.display())))?;
            std::fs::write(&summary_path, &rendered.summary).map_err(|e| {
                CliError::Data(format!("cannot write {}: {e}", summary_path.display()))
            })?;
            print!("{}", rendered.summary);
            println!("curves: {}", csv_path.display());
            Ok(())
        }
    }
}

fn fixture_error(e: fixtures::FixtureError) -> CliError {
    match &e {
        fixtures::FixtureError::Loss(_) => CliError::Numeric(e.to_string()),
        _ => CliError::Data(e.to_string()),
    }
}
