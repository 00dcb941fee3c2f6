use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use spheregate::config::RunConfig;
use spheregate::pipeline::{self, ScoreInput};
use spheregate::{Error, Result};

/// Two-stage family classifier with a z-score out-of-distribution gate.
///
/// Every stage reads and writes artifacts under the work directory, so
/// stages can be run one at a time or all together with `pipeline`.
#[derive(Parser, Debug)]
#[command(name = "spheregate", version)]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory holding every artifact (default `work`).
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    /// fusion_priority or gate_priority.
    #[arg(long, global = true)]
    policy: Option<String>,
    /// Gate band on the standardised distance.
    #[arg(long, global = true)]
    band: Option<f64>,
    /// Only distances above the family mean count against a sample.
    #[arg(long, global = true)]
    one_sided: bool,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic Gaussian family dataset.
    Synth,
    /// Featurize a directory with one subdirectory per family.
    Featurize {
        #[arg(long)]
        dir: Option<PathBuf>,
        /// byte_image_32x32 or byte_histogram_256.
        #[arg(long)]
        scheme: Option<String>,
    },
    /// Train the stage-one classifier.
    Train,
    /// Fit per-family boundaries on stage-one embeddings.
    FitBoundaries,
    /// Train the fusion network.
    TrainFusion,
    /// Score the test split and write the report.
    Evaluate,
    /// Score new samples against the trained stack.
    Score {
        /// Feature file with a `dim=… scheme=…` header.
        #[arg(long, conflicts_with = "line", required_unless_present = "line")]
        input: Option<PathBuf>,
        /// One `id<TAB>v1,…,vd` line or bare comma-separated values.
        #[arg(long)]
        line: Option<String>,
    },
    /// Run every stage in order.
    Pipeline,
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = &cli.work_dir {
        cfg.work_dir = w.clone();
    }
    if let Some(p) = &cli.policy {
        cfg.set("decision.policy", p)?;
    }
    if let Some(b) = cli.band {
        cfg.set("boundary.band", &b.to_string())?;
    }
    if cli.one_sided {
        cfg.set("boundary.one_sided", "true")?;
    }
    if let Command::Featurize { dir, scheme } = &cli.command {
        cfg.set("data.source", "directory")?;
        if let Some(d) = dir {
            cfg.data.dir = d.clone();
        }
        if let Some(s) = scheme {
            cfg.set("data.scheme", s)?;
        }
    }
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("override `{o}` is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<String> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::Synth => pipeline::run_synth(&cfg),
        Command::Featurize { .. } => pipeline::run_featurize(&cfg),
        Command::Train => pipeline::run_train(&cfg),
        Command::FitBoundaries => pipeline::run_fit_boundaries(&cfg),
        Command::TrainFusion => pipeline::run_train_fusion(&cfg),
        Command::Evaluate => pipeline::run_evaluate(&cfg).map(|(_, s)| s),
        Command::Score { input, line } => {
            let src = match (input, line) {
                (Some(p), _) => ScoreInput::File(p.clone()),
                (None, Some(l)) => ScoreInput::Line(l.clone()),
                (None, None) => unreachable!("clap requires one of --input/--line"),
            };
            pipeline::run_score(&cfg, &src)
        }
        Command::Pipeline => pipeline::run_pipeline(&cfg).map(|(_, s)| s),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
