//! Experiment driver: persisted, resumable pipeline steps from dataset
//! generation to the ablation matrix and summary report.

mod config;
mod layout;
mod report;
mod steps;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{ExperimentConfig, StageSettings, StagesConfig, ALLOWED_SHOTS, OUTPUT_ENV};
pub use layout::{Layout, Row, ROWS};
pub use report::{ablation_matrix, alpha_sweep, report, AblationMatrix, AblationRow, AlphaSweep, MetricTriple};
pub use steps::{build_prototypes, evaluate, gen_data, rescore_file, train_base, train_novel, train_pcf, Outcome, RunOptions, Status};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("missing {artifact}; run `fsod {command}` first")]
    Missing { artifact: PathBuf, command: &'static str },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("output directory {dir} holds artifacts of a different config (hash {found}); use --force or another directory")]
    ConfigChanged { dir: PathBuf, found: String },
    #[error("nothing to report in {0}")]
    Empty(PathBuf),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Synth(#[from] crate::synthdata::SynthError),
    #[error(transparent)]
    Detector(#[from] crate::detector::DetectorError),
    #[error(transparent)]
    Schedule(#[from] crate::schedule::ScheduleError),
    #[error(transparent)]
    Ensemble(#[from] crate::ensemble::EnsembleError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error(transparent)]
    Diff(#[from] crate::diffcore::DiffError),
}

impl PipelineError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| PipelineError::Io { path, source }
    }
}
