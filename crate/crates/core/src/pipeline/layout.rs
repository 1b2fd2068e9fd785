use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

/// Evaluated variants of one (seed, K) run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Row {
    Baseline,
    Pcf,
    Me,
    PcfMe,
}

pub const ROWS: [Row; 4] = [Row::Baseline, Row::Pcf, Row::Me, Row::PcfMe];

impl Row {
    pub fn dir_name(self) -> &'static str {
        match self {
            Row::Baseline => "baseline",
            Row::Pcf => "pcf",
            Row::Me => "me",
            Row::PcfMe => "pcf_me",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Row::Baseline => "baseline",
            Row::Pcf => "+PCF",
            Row::Me => "+ME",
            Row::PcfMe => "+PCF+ME",
        }
    }

    /// Whether the row uses the three-stage procedure.
    pub fn three_stage(self) -> bool {
        matches!(self, Row::Pcf | Row::PcfMe)
    }

    pub fn rescored(self) -> bool {
        matches!(self, Row::Me | Row::PcfMe)
    }
}

/// Paths of every artifact under an output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }

    pub fn data(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("data")
    }

    pub fn base_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("base")
    }

    pub fn reference_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("reference")
    }

    pub fn shot_dir(&self, seed: u64, k: usize) -> PathBuf {
        self.seed_dir(seed).join(format!("k{k}"))
    }

    pub fn support(&self, seed: u64, k: usize) -> PathBuf {
        self.shot_dir(seed, k).join("support.json")
    }

    pub fn pcf_dir(&self, seed: u64, k: usize) -> PathBuf {
        self.shot_dir(seed, k).join("pcf")
    }

    /// NOVEL-stage output of the two-stage (`false`) or three-stage procedure.
    pub fn novel_dir(&self, seed: u64, k: usize, three_stage: bool) -> PathBuf {
        let proc = if three_stage { "three_stage" } else { "two_stage" };
        self.shot_dir(seed, k).join(proc).join("novel")
    }

    pub fn prototypes(&self, seed: u64, k: usize) -> PathBuf {
        self.shot_dir(seed, k).join("prototypes.json")
    }

    pub fn eval_dir(&self, seed: u64, k: usize, row: Row) -> PathBuf {
        self.shot_dir(seed, k).join("eval").join(row.dir_name())
    }

    pub fn ablation_json(&self) -> PathBuf {
        self.root.join("ablation.json")
    }

    pub fn ablation_csv(&self) -> PathBuf {
        self.root.join("ablation.csv")
    }

    pub fn alpha_sweep_csv(&self) -> PathBuf {
        self.root.join("alpha_sweep.csv")
    }

    pub fn report_md(&self) -> PathBuf {
        self.root.join("report.md")
    }

    pub fn shot_curve_csv(&self) -> PathBuf {
        self.root.join("shot_curve.csv")
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const STAGE_FILE: &str = "stage.json";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
