use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::DetectorConfig;
use crate::ensemble::{EnsembleConfig, ReferenceConfig};
use crate::eval::EvalConfig;
use crate::schedule::{DatasetRef, EarlyStop, StageKind, StagePlan};
use crate::seeds::derive_seed;
use crate::synthdata::{BenchmarkConfig, MAX_CLASSES};

use super::PipelineError;

/// Shot counts an experiment may request.
pub const ALLOWED_SHOTS: [usize; 6] = [1, 2, 3, 5, 10, 30];

/// Environment variable overriding the output directory.
pub const OUTPUT_ENV: &str = "FSOD_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSettings {
    pub steps: usize,
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub early_stop: Option<EarlyStop>,
}

fn default_weight_decay() -> f64 {
    1e-4
}

fn default_batch() -> usize {
    4
}

impl StageSettings {
    fn from_plan(p: StagePlan) -> Self {
        Self {
            steps: p.steps,
            learning_rate: p.learning_rate,
            weight_decay: p.weight_decay,
            batch_size: p.batch_size,
            early_stop: p.early_stop,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagesConfig {
    pub base: StageSettings,
    pub pcf: StageSettings,
    pub novel: StageSettings,
}

impl Default for StagesConfig {
    fn default() -> Self {
        let mut base = StagePlan::default_for(StageKind::Base, 0);
        base.steps = 2000;
        Self {
            base: StageSettings::from_plan(base),
            pcf: StageSettings::from_plan(StagePlan::default_for(StageKind::Pcf, 0)),
            novel: StageSettings::from_plan(StagePlan::default_for(StageKind::Novel, 0)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Shot counts for the shot curve.
    pub shots: Vec<usize>,
    /// Shot count of the ablation matrix.
    pub ablation_shots: usize,
    pub benchmark: BenchmarkConfig,
    pub detector: DetectorConfig,
    pub stages: StagesConfig,
    pub reference: ReferenceConfig,
    /// Classes the reference backbone trains on; defaults to the twelve
    /// classes following the benchmark classes.
    pub aux_classes: Option<Vec<usize>>,
    pub ensemble: EnsembleConfig,
    /// Candidate detector weights for the held-out sweep.
    pub alpha_grid: Vec<f64>,
    /// Seed of the held-out benchmark used by the sweep.
    pub validation_seed: Option<u64>,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/fsod"),
            seeds: vec![0, 1, 2],
            shots: vec![1, 5, 10],
            ablation_shots: 10,
            benchmark: BenchmarkConfig::default(),
            detector: DetectorConfig::default(),
            stages: StagesConfig::default(),
            reference: ReferenceConfig::default(),
            aux_classes: None,
            ensemble: EnsembleConfig::default(),
            alpha_grid: vec![0.5, 0.6, 0.7, 0.8, 0.9],
            validation_seed: None,
            eval: EvalConfig::default(),
        }
    }
}

fn field(path: &str, message: impl Into<String>) -> PipelineError {
    PipelineError::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Parses TOML or JSON (chosen by extension, JSON for `.json`).
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let cfg = if is_json {
            Self::from_json_str(&text)?
        } else {
            Self::from_toml_str(&text)?
        };
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        let de = toml::Deserializer::new(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| field(&e.path().to_string(), e.inner().message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self, PipelineError> {
        let mut de = serde_json::Deserializer::from_str(text);
        let cfg: Self =
            serde_path_to_error::deserialize(&mut de).map_err(|e| field(&e.path().to_string(), e.inner().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.seeds.is_empty() {
            return Err(field("seeds", "at least one seed is required"));
        }
        for (i, k) in self.shots.iter().enumerate() {
            if !ALLOWED_SHOTS.contains(k) {
                return Err(field(&format!("shots[{i}]"), format!("{k} is not one of {ALLOWED_SHOTS:?}")));
            }
        }
        if !ALLOWED_SHOTS.contains(&self.ablation_shots) {
            return Err(field("ablation_shots", format!("{} is not one of {ALLOWED_SHOTS:?}", self.ablation_shots)));
        }
        let b = &self.benchmark;
        if b.num_base_classes == 0 || b.num_novel_classes == 0 {
            return Err(field("benchmark", "class counts must be positive"));
        }
        if b.image_size != self.detector.image_size {
            return Err(field(
                "detector.image_size",
                format!("{} differs from benchmark.image_size {}", self.detector.image_size, b.image_size),
            ));
        }
        if self.reference.image_size != b.image_size {
            return Err(field("reference.image_size", "must equal benchmark.image_size"));
        }
        self.detector.validate().map_err(|e| field("detector", e.to_string()))?;
        for (name, kind) in [("base", StageKind::Base), ("pcf", StageKind::Pcf), ("novel", StageKind::Novel)] {
            self.plan(kind, 0).validate().map_err(|e| field(&format!("stages.{name}"), e.to_string()))?;
        }
        let aux = self.aux_class_ids();
        let used = b.num_base_classes + b.num_novel_classes;
        if aux.len() < 2 {
            return Err(field("aux_classes", "need at least two auxiliary classes"));
        }
        if let Some(c) = aux.iter().find(|c| **c < used || **c >= MAX_CLASSES) {
            return Err(field(
                "aux_classes",
                format!("class {c} overlaps the benchmark classes or exceeds the catalog"),
            ));
        }
        for (i, a) in self.alpha_grid.iter().enumerate() {
            EnsembleConfig::from_alpha(*a).map_err(|e| field(&format!("alpha_grid[{i}]"), e.to_string()))?;
        }
        self.eval.validate().map_err(|e| field("eval", e.to_string()))?;
        Ok(())
    }

    pub fn aux_class_ids(&self) -> Vec<usize> {
        self.aux_classes.clone().unwrap_or_else(|| {
            let start = self.benchmark.num_base_classes + self.benchmark.num_novel_classes;
            (start..(start + 12).min(MAX_CLASSES)).collect()
        })
    }

    /// Output directory, honoring the environment override.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }

    /// Stage plan for one benchmark seed. NOVEL plans do not depend on the
    /// procedure, so both procedures see the same batches.
    pub fn plan(&self, kind: StageKind, seed: u64) -> StagePlan {
        let (s, dataset, stream) = match kind {
            StageKind::Base => (&self.stages.base, DatasetRef::Base, 11),
            StageKind::Pcf => (&self.stages.pcf, DatasetRef::Support, 13),
            StageKind::Novel => (&self.stages.novel, DatasetRef::Support, 14),
        };
        StagePlan {
            stage: kind,
            dataset,
            steps: s.steps,
            learning_rate: s.learning_rate,
            weight_decay: s.weight_decay,
            batch_size: s.batch_size,
            seed: derive_seed(seed, stream),
            early_stop: s.early_stop,
        }
    }

    /// SHA-256 of the configuration with the output location removed.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    /// A configuration with tiny budgets for smoke runs.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.seeds = vec![0];
        c.shots = vec![1, 5];
        c.ablation_shots = 5;
        c.benchmark.base_images = 24;
        c.benchmark.novel_pool_images = 40;
        c.benchmark.test_images = 16;
        c.detector.cascade.num_stages = 2;
        for s in [&mut c.stages.base, &mut c.stages.pcf, &mut c.stages.novel] {
            s.steps = 10;
            s.early_stop = None;
        }
        c.reference.images_per_class = 4;
        c.reference.max_steps = 10;
        c.reference.check_every = 10;
        c.reference.target_accuracy = 0.0;
        c
    }
}
