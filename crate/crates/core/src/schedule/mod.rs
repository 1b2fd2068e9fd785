//! Parameter partition, classifier re-initialization and staged fine-tuning
//! (base training, classifier-only plasticity stage, novel fine-tuning).

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{Detector, DetectorError, HeadCache, Target};
use crate::diffcore::{adamw_step, Checkpoint, DiffError, OptimConfig, Param, ParamGroup, ParamId, Tape};
use crate::synthdata::SceneImage;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("unknown stage {0:?} (expected BASE, PCF or NOVEL)")]
    UnknownStage(String),
    #[error("invalid stage plan: {0}")]
    InvalidPlan(String),
    #[error("procedure needs stages {expected}, got {got}")]
    MissingStage { expected: String, got: String },
    #[error("stage {stage} modified frozen parameters")]
    FreezeViolation { stage: StageKind },
    #[error("partition error: {0}")]
    Partition(String),
}

/// Classifier (`C_set`) and everything else (`E_set`), by parameter name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamPartition {
    pub c_set: Vec<String>,
    pub e_set: Vec<String>,
}

/// Splits a detector's parameters by group tag.
pub fn partition_params(model: &Detector) -> Result<ParamPartition, ScheduleError> {
    let mut c_set = Vec::new();
    let mut e_set = Vec::new();
    for (_, p) in model.store().iter() {
        match p.group() {
            ParamGroup::Classifier => c_set.push(p.name().to_string()),
            ParamGroup::Other | ParamGroup::BackboneBottom => e_set.push(p.name().to_string()),
        }
    }
    if c_set.len() != 2 * model.num_stages() {
        return Err(ScheduleError::Partition(format!(
            "expected {} classifier params for {} stages, found {}",
            2 * model.num_stages(),
            model.num_stages(),
            c_set.len()
        )));
    }
    Ok(ParamPartition { c_set, e_set })
}

/// Re-initializes every stage classifier for `new_label_map`; all other
/// parameters are untouched.
pub fn reinit_classifiers(model: &mut Detector, new_label_map: Vec<usize>, seed: u64) -> Result<(), ScheduleError> {
    if new_label_map.is_empty() {
        return Err(ScheduleError::InvalidPlan("new_num_classes must be at least 1".into()));
    }
    model.reinit_classifiers(new_label_map, seed)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StageKind {
    Base,
    Pcf,
    Novel,
}

impl StageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::Base => "BASE",
            StageKind::Pcf => "PCF",
            StageKind::Novel => "NOVEL",
        }
    }

    /// Whether `p` is updated during this stage.
    pub fn trains(self, p: &Param) -> bool {
        match self {
            StageKind::Base => true,
            StageKind::Pcf => p.group() == ParamGroup::Classifier,
            StageKind::Novel => p.group() != ParamGroup::BackboneBottom,
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageKind {
    type Err = ScheduleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "BASE" => Ok(StageKind::Base),
            "PCF" => Ok(StageKind::Pcf),
            "NOVEL" => Ok(StageKind::Novel),
            _ => Err(ScheduleError::UnknownStage(s.to_string())),
        }
    }
}

/// Which data a stage trains on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRef {
    Base,
    Support,
}

/// Stop once the mean loss of the latest `window` steps improves on the
/// window before it by less than `min_delta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub window: usize,
    pub min_delta: f64,
}

impl EarlyStop {
    pub fn should_stop(&self, losses: &[f64]) -> bool {
        let w = self.window;
        if w == 0 || losses.len() < 2 * w || !losses.len().is_multiple_of(w) {
            return false;
        }
        let n = losses.len();
        let recent: f64 = losses[n - w..].iter().sum::<f64>() / w as f64;
        let before: f64 = losses[n - 2 * w..n - w].iter().sum::<f64>() / w as f64;
        before - recent < self.min_delta
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: StageKind,
    pub dataset: DatasetRef,
    pub steps: usize,
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub early_stop: Option<EarlyStop>,
}

fn default_weight_decay() -> f64 {
    1e-4
}

impl StagePlan {
    /// Defaults per stage: BASE lr 1e-3, PCF lr 1e-3 for up to 2000 steps with
    /// early stopping, NOVEL lr 1e-4.
    pub fn default_for(stage: StageKind, seed: u64) -> Self {
        let (dataset, steps, lr, early_stop) = match stage {
            StageKind::Base => (DatasetRef::Base, 3000, 1e-3, None),
            StageKind::Pcf => (
                DatasetRef::Support,
                2000,
                1e-3,
                Some(EarlyStop {
                    window: 200,
                    min_delta: 1e-4,
                }),
            ),
            StageKind::Novel => (DatasetRef::Support, 400, 1e-4, None),
        };
        Self {
            stage,
            dataset,
            steps,
            learning_rate: lr,
            weight_decay: default_weight_decay(),
            batch_size: 4,
            seed,
            early_stop,
        }
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        let bad = |m: String| Err(ScheduleError::InvalidPlan(m));
        if self.steps == 0 {
            return bad(format!("{}: steps must be positive", self.stage));
        }
        if self.batch_size == 0 {
            return bad(format!("{}: batch_size must be positive", self.stage));
        }
        let expected = match self.stage {
            StageKind::Base => DatasetRef::Base,
            StageKind::Pcf | StageKind::Novel => DatasetRef::Support,
        };
        if self.dataset != expected {
            return bad(format!("{} trains on {:?} data, plan names {:?}", self.stage, expected, self.dataset));
        }
        self.optim().validate().map_err(|e| ScheduleError::InvalidPlan(format!("{}: {e}", self.stage)))?;
        Ok(())
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..OptimConfig::default()
        }
    }
}

/// Outcome of one stage.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: StageKind,
    pub losses: Vec<f64>,
    pub steps_run: usize,
    pub early_stopped: bool,
    /// Checksum of the parameters outside the trainable set, taken on entry
    /// and verified on exit.
    pub frozen_checksum: String,
    pub trainable_checksum_before: String,
    pub trainable_checksum_after: String,
    pub seconds: f64,
}

/// Trains `model` for one stage. Frozen parameters are checked bitwise on
/// exit; optimizer moments start fresh.
pub fn run_stage(model: &mut Detector, plan: &StagePlan, data: &[SceneImage]) -> Result<(StageReport, Checkpoint), ScheduleError> {
    plan.validate()?;
    if data.is_empty() {
        return Err(ScheduleError::InvalidPlan(format!("{}: empty dataset", plan.stage)));
    }
    let start = Instant::now();
    let stage = plan.stage;
    let store = model.store_mut();
    store.set_trainable_where(|p| stage.trains(p));
    store.reset_optimizer_state();
    store.zero_grads();
    let frozen_checksum = store.checksum_where(|p| !stage.trains(p));
    let trainable_before = store.checksum_where(|p| stage.trains(p));
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| stage.trains(p)).map(|(id, _)| id).collect();
    if ids.is_empty() {
        return Err(ScheduleError::InvalidPlan(format!("{stage}: trainable set is empty")));
    }

    let targets: Vec<Vec<Target>> = data
        .iter()
        .map(|img| model.targets(&img.instances))
        .collect::<Result<_, _>>()?;
    // With only classifiers trainable, everything upstream of them is constant.
    let caches: Option<Vec<HeadCache>> = if stage == StageKind::Pcf {
        Some(data.iter().map(|img| model.head_cache(&img.raster)).collect::<Result<_, _>>()?)
    } else {
        None
    };

    let optim = plan.optim();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(plan.steps);
    let mut early_stopped = false;
    let bs = plan.batch_size.min(data.len());
    for _ in 0..plan.steps {
        let mut batch = Vec::with_capacity(bs);
        while batch.len() < bs {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            batch.push(order.pop().expect("refilled"));
        }
        let mut tape = Tape::new();
        let mut total = None;
        for &i in &batch {
            let l = match &caches {
                Some(c) => model.cached_loss(&mut tape, &c[i], &targets[i])?,
                None => {
                    let pass = model.forward(&mut tape, &data[i].raster)?;
                    crate::detector::set_loss(&mut tape, &pass.stages, &targets[i], &model.config().loss)?
                }
            };
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        let loss = tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
        losses.push(tape.values(loss)[0]);
        let store = model.store_mut();
        tape.backward(loss, store)?;
        adamw_step(store, &ids, &optim)?;
        store.zero_grads();
        if plan.early_stop.is_some_and(|e| e.should_stop(&losses)) {
            early_stopped = true;
            break;
        }
    }

    let store = model.store_mut();
    if store.checksum_where(|p| !stage.trains(p)) != frozen_checksum {
        return Err(ScheduleError::FreezeViolation { stage });
    }
    let trainable_after = store.checksum_where(|p| stage.trains(p));
    let report = StageReport {
        stage,
        steps_run: losses.len(),
        losses,
        early_stopped,
        frozen_checksum,
        trainable_checksum_before: trainable_before,
        trainable_checksum_after: trainable_after,
        seconds: start.elapsed().as_secs_f64(),
    };
    let ck = model.to_checkpoint();
    Ok((report, ck))
}

#[derive(Clone, Debug)]
pub struct ProcedureResult {
    pub reports: Vec<StageReport>,
    pub checkpoints: Vec<Checkpoint>,
    pub seconds: f64,
}

fn check_kinds(plans: &[StagePlan], expected: &[StageKind]) -> Result<(), ScheduleError> {
    let got: Vec<StageKind> = plans.iter().map(|p| p.stage).collect();
    if got != expected {
        let fmt = |v: &[StageKind]| v.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(",");
        return Err(ScheduleError::MissingStage {
            expected: fmt(expected),
            got: fmt(&got),
        });
    }
    Ok(())
}

/// Fine-tuning after base training: classifiers are re-initialized for
/// `novel_labels`, then every plan in `plans` (PCF and/or NOVEL) runs on the
/// support images in order.
pub fn fine_tune_from_base(
    model: &mut Detector,
    support: &[SceneImage],
    plans: &[StagePlan],
    novel_labels: Vec<usize>,
    reinit_seed: u64,
) -> Result<ProcedureResult, ScheduleError> {
    let start = Instant::now();
    for p in plans {
        p.validate()?;
    }
    reinit_classifiers(model, novel_labels, reinit_seed)?;
    let mut reports = Vec::new();
    let mut checkpoints = Vec::new();
    for p in plans {
        let (r, ck) = run_stage(model, p, support)?;
        reports.push(r);
        checkpoints.push(ck);
    }
    Ok(ProcedureResult {
        reports,
        checkpoints,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn transfer(
    model: &mut Detector,
    base: &[SceneImage],
    support: &[SceneImage],
    plans: &[StagePlan],
    novel_labels: Vec<usize>,
    reinit_seed: u64,
) -> Result<ProcedureResult, ScheduleError> {
    let start = Instant::now();
    for p in plans {
        p.validate()?;
    }
    let (r, ck) = run_stage(model, &plans[0], base)?;
    let mut rest = fine_tune_from_base(model, support, &plans[1..], novel_labels, reinit_seed)?;
    rest.reports.insert(0, r);
    rest.checkpoints.insert(0, ck);
    rest.seconds = start.elapsed().as_secs_f64();
    Ok(rest)
}

/// Baseline: BASE, classifier re-initialization, NOVEL.
pub fn transfer_two_stage(
    model: &mut Detector,
    base: &[SceneImage],
    support: &[SceneImage],
    plans: &[StagePlan],
    novel_labels: Vec<usize>,
    reinit_seed: u64,
) -> Result<ProcedureResult, ScheduleError> {
    check_kinds(plans, &[StageKind::Base, StageKind::Novel])?;
    transfer(model, base, support, plans, novel_labels, reinit_seed)
}

/// BASE, classifier re-initialization, PCF, NOVEL. PCF and NOVEL share the
/// same support images.
pub fn transfer_three_stage(
    model: &mut Detector,
    base: &[SceneImage],
    support: &[SceneImage],
    plans: &[StagePlan],
    novel_labels: Vec<usize>,
    reinit_seed: u64,
) -> Result<ProcedureResult, ScheduleError> {
    check_kinds(plans, &[StageKind::Base, StageKind::Pcf, StageKind::Novel])?;
    transfer(model, base, support, plans, novel_labels, reinit_seed)
}

#[cfg(test)]
mod tests;
