//! `fsod`: runs the few-shot detection pipeline step by step.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fsod_core::pipeline::{self, ExperimentConfig, Outcome, PipelineError, RunOptions, Status};

#[derive(Parser)]
#[command(name = "fsod", version, about = "Few-shot object detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML, or JSON by extension).
    #[arg(long)]
    config: PathBuf,
    /// Run only this benchmark seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run only this shot count.
    #[arg(long)]
    k: Option<usize>,
    /// Recompute artifacts that already exist.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic benchmark for each seed.
    GenData(Common),
    /// Train on the base classes.
    TrainBase(Common),
    /// Fit only the classifiers on the K-shot support set.
    TrainPcf(Common),
    /// Fine-tune on the support set, from the base and from the PCF checkpoint.
    TrainNovel(Common),
    /// Train the reference backbone and build class prototypes.
    BuildPrototypes(Common),
    /// Detect on the test split and score all four ablation rows.
    Evaluate(Common),
    /// Run everything for the ablation shot count and write the matrix.
    Ablate(Common),
    /// Summarize finished runs into report.md and shot_curve.csv.
    Report(Common),
    /// Rescore a detections file against a prototype bank.
    Rescore {
        #[command(flatten)]
        common: Common,
        /// Input detections (JSON lines).
        #[arg(long)]
        detections: PathBuf,
        /// Prototype bank JSON.
        #[arg(long)]
        bank: PathBuf,
        /// Where to write the rescored detections.
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::TrainBase(_) => "train-base",
            Command::TrainPcf(_) => "train-pcf",
            Command::TrainNovel(_) => "train-novel",
            Command::BuildPrototypes(_) => "build-prototypes",
            Command::Evaluate(_) => "evaluate",
            Command::Ablate(_) => "ablate",
            Command::Report(_) => "report",
            Command::Rescore { .. } => "rescore",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData(c)
            | Command::TrainBase(c)
            | Command::TrainPcf(c)
            | Command::TrainNovel(c)
            | Command::BuildPrototypes(c)
            | Command::Evaluate(c)
            | Command::Ablate(c)
            | Command::Report(c) => c,
            Command::Rescore { common, .. } => common,
        }
    }
}

fn print_outcomes(outcomes: &[Outcome]) {
    for o in outcomes {
        let tag = match o.status {
            Status::Created => "created",
            Status::Skipped => "skipped",
        };
        println!("{tag}\t{}", o.artifact.display());
    }
}

fn run(cmd: &Command) -> Result<(), PipelineError> {
    let c = cmd.common();
    let cfg = ExperimentConfig::load(&c.config)?;
    let opts = RunOptions {
        seed: c.seed,
        k: c.k,
        force: c.force,
    };
    let step = match cmd {
        Command::GenData(_) => pipeline::gen_data,
        Command::TrainBase(_) => pipeline::train_base,
        Command::TrainPcf(_) => pipeline::train_pcf,
        Command::TrainNovel(_) => pipeline::train_novel,
        Command::BuildPrototypes(_) => pipeline::build_prototypes,
        Command::Evaluate(_) => pipeline::evaluate,
        Command::Ablate(_) => {
            let m = pipeline::ablation_matrix(&cfg, &opts)?;
            print!("{}", m.to_csv());
            return Ok(());
        }
        Command::Report(_) => {
            let path = pipeline::report(&cfg, &opts)?;
            println!("created\t{}", path.display());
            return Ok(());
        }
        Command::Rescore {
            detections, bank, out, ..
        } => {
            let seed = opts.seed.unwrap_or(cfg.seeds[0]);
            print_outcomes(&[pipeline::rescore_file(&cfg, seed, detections, bank, out)?]);
            return Ok(());
        }
    };
    print_outcomes(&step(&cfg, &opts)?);
    Ok(())
}

/// Machine-readable error line: kind, command, message and the source chain.
fn diagnostic(command: &str, e: &PipelineError) -> String {
    let kind = match e {
        PipelineError::Config { .. } => "config",
        PipelineError::Missing { .. } => "missing-artifact",
        PipelineError::Io { .. } => "io",
        PipelineError::ConfigChanged { .. } => "config-changed",
        PipelineError::Empty(_) => "empty",
        _ => "runtime",
    };
    let mut causes = Vec::new();
    let mut src = std::error::Error::source(e);
    while let Some(s) = src {
        causes.push(s.to_string());
        src = s.source();
    }
    let mut v = serde_json::json!({
        "error": kind,
        "command": command,
        "message": e.to_string(),
        "causes": causes,
    });
    match e {
        PipelineError::Config { path, .. } => v["field"] = path.clone().into(),
        PipelineError::Missing { command, .. } => v["requires"] = format!("fsod {command}").into(),
        _ => {}
    }
    v.to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", diagnostic(cli.command.name(), &e));
            ExitCode::from(match e {
                PipelineError::Config { .. } => 2,
                _ => 1,
            })
        }
    }
}
