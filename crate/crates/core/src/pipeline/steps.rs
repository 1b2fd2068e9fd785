use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::detector::Detector;
use crate::diffcore::Checkpoint;
use crate::ensemble::{self, PrototypeBank, ReferenceBackbone};
use crate::eval::{self, read_detections, write_detections, EvalReport, ImageDetections};
use crate::schedule::{reinit_classifiers, run_stage, StageKind, StageReport};
use crate::seeds::derive_seed;
use crate::synthdata::{gen_dataset, load_benchmark, sample_kshot, save_benchmark, Benchmark, DatasetSplit, SupportSet};

use super::config::{ExperimentConfig, ALLOWED_SHOTS};
use super::layout::{Layout, Row, CHECKPOINT_FILE, DETECTIONS_FILE, REPORT_CSV, REPORT_JSON, STAGE_FILE};
use super::PipelineError;

/// Seed streams of the per-seed random choices.
const MODEL_INIT_STREAM: u64 = 10;
const REINIT_STREAM: u64 = 12;
const REFERENCE_STREAM: u64 = 20;
const SUPPORT_STREAM: u64 = 100;

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Restrict to one benchmark seed (default: every configured seed).
    pub seed: Option<u64>,
    /// Restrict to one shot count (default: the shot list plus the ablation K).
    pub k: Option<usize>,
    /// Recompute artifacts that already exist.
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Created,
    Skipped,
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub artifact: PathBuf,
    pub status: Status,
}

#[derive(Serialize, Deserialize)]
struct RunManifest {
    format: String,
    config_hash: String,
    version: String,
    created_unix: u64,
    updated_unix: u64,
    commands: Vec<String>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(PipelineError::io(dir))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(PipelineError::io(path))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(PipelineError::io(path))?;
    Ok(serde_json::from_str(&text)?)
}

fn require(path: PathBuf, command: &'static str) -> Result<PathBuf, PipelineError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::Missing { artifact: path, command })
    }
}

/// Validates options, checks the output directory belongs to this config and
/// records the command in the run manifest.
pub(crate) fn prepare(cfg: &ExperimentConfig, opts: &RunOptions, command: &str) -> Result<Layout, PipelineError> {
    cfg.validate()?;
    if let Some(k) = opts.k {
        if !ALLOWED_SHOTS.contains(&k) {
            return Err(PipelineError::Config {
                path: "--k".into(),
                message: format!("{k} is not one of {ALLOWED_SHOTS:?}"),
            });
        }
    }
    let layout = Layout::new(cfg.resolved_output_dir());
    let root = layout.root().to_path_buf();
    std::fs::create_dir_all(&root).map_err(PipelineError::io(&root))?;
    let hash = cfg.hash();
    let mut manifest = match read_json::<RunManifest>(&layout.manifest()) {
        Ok(m) if m.config_hash != hash && !opts.force => {
            return Err(PipelineError::ConfigChanged {
                dir: root,
                found: m.config_hash,
            })
        }
        Ok(m) if m.config_hash == hash => m,
        _ => RunManifest {
            format: "fsod-run".into(),
            config_hash: hash.clone(),
            version: env!("CARGO_PKG_VERSION").into(),
            created_unix: now(),
            updated_unix: 0,
            commands: Vec::new(),
        },
    };
    manifest.config_hash = hash;
    manifest.updated_unix = now();
    manifest.commands.push(command.to_string());
    write_json(&layout.manifest(), &manifest)?;
    write_json(&layout.config(), cfg)?;
    Ok(layout)
}

pub(crate) fn seeds(cfg: &ExperimentConfig, opts: &RunOptions) -> Vec<u64> {
    opts.seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s])
}

pub(crate) fn shots(cfg: &ExperimentConfig, opts: &RunOptions) -> Vec<usize> {
    opts.k.map_or_else(
        || {
            let mut v = cfg.shots.clone();
            v.push(cfg.ablation_shots);
            v.sort_unstable();
            v.dedup();
            v
        },
        |k| vec![k],
    )
}

fn outcome(artifact: PathBuf, status: Status) -> Outcome {
    if status == Status::Skipped {
        log::info!("{} exists, skipping", artifact.display());
    } else {
        log::info!("wrote {}", artifact.display());
    }
    Outcome { artifact, status }
}

fn gen_seed(cfg: &ExperimentConfig, layout: &Layout, seed: u64, force: bool) -> Result<Outcome, PipelineError> {
    let dir = layout.data(seed);
    if dir.join("manifest.json").exists() && !force {
        return Ok(outcome(dir, Status::Skipped));
    }
    let b = gen_dataset(&cfg.benchmark, seed)?;
    save_benchmark(&b, &dir)?;
    Ok(outcome(dir, Status::Created))
}

pub fn gen_data(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<Outcome>, PipelineError> {
    let layout = prepare(cfg, opts, "gen-data")?;
    seeds(cfg, opts).into_iter().map(|s| gen_seed(cfg, &layout, s, opts.force)).collect()
}

pub(crate) fn load_data(layout: &Layout, seed: u64) -> Result<Benchmark, PipelineError> {
    let dir = layout.data(seed);
    require(dir.join("manifest.json"), "gen-data")?;
    Ok(load_benchmark(&dir)?)
}

fn save_stage(dir: &Path, report: &StageReport, ck: &Checkpoint) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(PipelineError::io(dir))?;
    ck.save(dir.join(CHECKPOINT_FILE))?;
    log::info!("{} stage: {} steps in {:.1}s", report.stage, report.steps_run, report.seconds);
    // wall time is left out so reruns reproduce the file byte for byte
    let mut value = serde_json::to_value(report)?;
    if let Some(obj) = value.as_object_mut() {
        obj.remove("seconds");
    }
    write_json(&dir.join(STAGE_FILE), &value)
}

fn load_detector(path: &Path, command: &'static str) -> Result<Detector, PipelineError> {
    let path = require(path.to_path_buf(), command)?;
    Ok(Detector::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn base_seed(cfg: &ExperimentConfig, layout: &Layout, seed: u64, force: bool) -> Result<Outcome, PipelineError> {
    let dir = layout.base_dir(seed);
    if dir.join(CHECKPOINT_FILE).exists() && !force {
        return Ok(outcome(dir, Status::Skipped));
    }
    let bench = load_data(layout, seed)?;
    let mut det = Detector::new(
        cfg.detector.clone(),
        bench.base_class_ids().to_vec(),
        derive_seed(seed, MODEL_INIT_STREAM),
    )?;
    log::info!("seed {seed}: BASE stage, {} steps", cfg.stages.base.steps);
    let (report, ck) = run_stage(&mut det, &cfg.plan(StageKind::Base, seed), &bench.base.images)?;
    save_stage(&dir, &report, &ck)?;
    Ok(outcome(dir, Status::Created))
}

pub fn train_base(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<Outcome>, PipelineError> {
    let layout = prepare(cfg, opts, "train-base")?;
    seeds(cfg, opts).into_iter().map(|s| base_seed(cfg, &layout, s, opts.force)).collect()
}

#[derive(Serialize, Deserialize)]
struct SupportRecord {
    k: usize,
    seed: u64,
    fingerprint: String,
    instance_refs: Vec<(usize, usize)>,
}

/// The K-shot support set of a seed; identical for every procedure.
pub(crate) fn support_set(layout: &Layout, bench: &Benchmark, seed: u64, k: usize) -> Result<SupportSet, PipelineError> {
    let s = sample_kshot(&bench.novel_pool, k, derive_seed(seed, SUPPORT_STREAM + k as u64))?;
    let path = layout.support(seed, k);
    let rec = SupportRecord {
        k,
        seed: s.seed,
        fingerprint: s.fingerprint(),
        instance_refs: s.instance_refs.clone(),
    };
    write_json(&path, &rec)?;
    Ok(s)
}

/// Base checkpoint with classifiers re-initialized for the novel classes.
fn reinitialized_base(layout: &Layout, bench: &Benchmark, seed: u64) -> Result<Detector, PipelineError> {
    let mut det = load_detector(&layout.base_dir(seed).join(CHECKPOINT_FILE), "train-base")?;
    reinit_classifiers(&mut det, bench.novel_class_ids().to_vec(), derive_seed(seed, REINIT_STREAM))?;
    Ok(det)
}

fn pcf_seed(cfg: &ExperimentConfig, layout: &Layout, seed: u64, k: usize, force: bool) -> Result<Outcome, PipelineError> {
    let dir = layout.pcf_dir(seed, k);
    if dir.join(CHECKPOINT_FILE).exists() && !force {
        return Ok(outcome(dir, Status::Skipped));
    }
    let bench = load_data(layout, seed)?;
    let mut det = reinitialized_base(layout, &bench, seed)?;
    let support = support_set(layout, &bench, seed, k)?;
    log::info!("seed {seed}, K={k}: PCF stage");
    let (report, ck) = run_stage(&mut det, &cfg.plan(StageKind::Pcf, seed), &support.split.images)?;
    save_stage(&dir, &report, &ck)?;
    Ok(outcome(dir, Status::Created))
}

pub fn train_pcf(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<Outcome>, PipelineError> {
    let layout = prepare(cfg, opts, "train-pcf")?;
    let mut out = Vec::new();
    for s in seeds(cfg, opts) {
        for k in shots(cfg, opts) {
            out.push(pcf_seed(cfg, &layout, s, k, opts.force)?);
        }
    }
    Ok(out)
}

fn novel_seed(cfg: &ExperimentConfig, layout: &Layout, seed: u64, k: usize, force: bool) -> Result<Vec<Outcome>, PipelineError> {
    let base_ck = require(layout.base_dir(seed).join(CHECKPOINT_FILE), "train-base")?;
    let pcf_ck = require(layout.pcf_dir(seed, k).join(CHECKPOINT_FILE), "train-pcf")?;
    let bench = load_data(layout, seed)?;
    let support = support_set(layout, &bench, seed, k)?;
    let plan = cfg.plan(StageKind::Novel, seed);
    let mut out = Vec::new();
    for three in [false, true] {
        let dir = layout.novel_dir(seed, k, three);
        if dir.join(CHECKPOINT_FILE).exists() && !force {
            out.push(outcome(dir, Status::Skipped));
            continue;
        }
        let mut det = if three {
            load_detector(&pcf_ck, "train-pcf")?
        } else {
            let _ = &base_ck;
            reinitialized_base(layout, &bench, seed)?
        };
        log::info!("seed {seed}, K={k}: NOVEL stage ({})", if three { "three-stage" } else { "two-stage" });
        let (report, ck) = run_stage(&mut det, &plan, &support.split.images)?;
        save_stage(&dir, &report, &ck)?;
        out.push(outcome(dir, Status::Created));
    }
    Ok(out)
}

pub fn train_novel(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<Outcome>, PipelineError> {
    let layout = prepare(cfg, opts, "train-novel")?;
    let mut out = Vec::new();
    for s in seeds(cfg, opts) {
        for k in shots(cfg, opts) {
            out.extend(novel_seed(cfg, &layout, s, k, opts.force)?);
        }
    }
    Ok(out)
}

fn reference_seed(cfg: &ExperimentConfig, layout: &Layout, bench: &Benchmark, seed: u64, force: bool) -> Result<ReferenceBackbone, PipelineError> {
    let path = layout.reference_dir(seed).join(CHECKPOINT_FILE);
    if path.exists() && !force {
        return Ok(ReferenceBackbone::from_checkpoint(&Checkpoint::load(&path)?)?);
    }
    let used: Vec<usize> = bench.base_class_ids().iter().chain(bench.novel_class_ids()).copied().collect();
    log::info!("seed {seed}: training reference backbone");
    let r = ReferenceBackbone::train(&cfg.aux_class_ids(), &used, cfg.reference.clone(), derive_seed(seed, REFERENCE_STREAM))?;
    std::fs::create_dir_all(layout.reference_dir(seed)).map_err(PipelineError::io(layout.reference_dir(seed)))?;
    r.to_checkpoint().save(&path)?;
    Ok(r)
}

pub(crate) fn load_reference(layout: &Layout, seed: u64) -> Result<ReferenceBackbone, PipelineError> {
    let path = require(layout.reference_dir(seed).join(CHECKPOINT_FILE), "build-prototypes")?;
    Ok(ReferenceBackbone::from_checkpoint(&Checkpoint::load(path)?)?)
}

pub fn build_prototypes(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<Outcome>, PipelineError> {
    let layout = prepare(cfg, opts, "build-prototypes")?;
    let mut out = Vec::new();
    for s in seeds(cfg, opts) {
        let bench = load_data(&layout, s)?;
        let mut reference = None;
        for k in shots(cfg, opts) {
            let path = layout.prototypes(s, k);
            if path.exists() && !opts.force {
                out.push(outcome(path, Status::Skipped));
                continue;
            }
            if reference.is_none() {
                reference = Some(reference_seed(cfg, &layout, &bench, s, opts.force)?);
            }
            let r = reference.as_ref().expect("just set");
            let support = support_set(&layout, &bench, s, k)?;
            let bank = ensemble::build_prototypes(r, &support.split.images, bench.novel_class_ids(), support.fingerprint())?;
            bank.save(&path)?;
            out.push(outcome(path, Status::Created));
        }
    }
    Ok(out)
}

pub(crate) fn detect_split(det: &Detector, test: &DatasetSplit) -> Result<Vec<ImageDetections>, PipelineError> {
    test.images
        .iter()
        .map(|im| {
            Ok(ImageDetections {
                image_id: im.image_id,
                detections: det.detect(&im.raster)?,
            })
        })
        .collect()
}

pub(crate) fn rescore_split(
    reference: &ReferenceBackbone,
    bank: &PrototypeBank,
    test: &DatasetSplit,
    dets: &[ImageDetections],
    cfg: &ensemble::EnsembleConfig,
) -> Result<Vec<ImageDetections>, PipelineError> {
    let rasters: std::collections::HashMap<usize, _> = test.images.iter().map(|im| (im.image_id, &im.raster)).collect();
    dets.iter()
        .map(|d| {
            let raster = rasters
                .get(&d.image_id)
                .ok_or(eval::EvalError::UnknownImage(d.image_id))?;
            Ok(ImageDetections {
                image_id: d.image_id,
                detections: ensemble::rescore(reference, bank, raster, &d.detections, cfg)?,
            })
        })
        .collect()
}

fn write_eval(dir: &Path, dets: &[ImageDetections], report: &EvalReport) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(PipelineError::io(dir))?;
    write_detections(&dir.join(DETECTIONS_FILE), dets)?;
    write_json(&dir.join(REPORT_JSON), report)?;
    std::fs::write(dir.join(REPORT_CSV), report.to_csv()).map_err(PipelineError::io(dir.join(REPORT_CSV)))
}

pub(crate) fn load_report(layout: &Layout, seed: u64, k: usize, row: Row) -> Result<EvalReport, PipelineError> {
    let path = require(layout.eval_dir(seed, k, row).join(REPORT_JSON), "evaluate")?;
    read_json(&path)
}

pub(crate) fn load_row_detections(layout: &Layout, seed: u64, k: usize, row: Row) -> Result<Vec<ImageDetections>, PipelineError> {
    let path = require(layout.eval_dir(seed, k, row).join(DETECTIONS_FILE), "evaluate")?;
    Ok(read_detections(&path)?)
}

fn evaluate_seed(cfg: &ExperimentConfig, layout: &Layout, seed: u64, k: usize, force: bool) -> Result<Vec<Outcome>, PipelineError> {
    let done = |row: Row| layout.eval_dir(seed, k, row).join(REPORT_JSON).exists();
    if !force && super::layout::ROWS.iter().all(|r| done(*r)) {
        return Ok(super::layout::ROWS
            .iter()
            .map(|r| outcome(layout.eval_dir(seed, k, *r), Status::Skipped))
            .collect());
    }
    let two = require(layout.novel_dir(seed, k, false).join(CHECKPOINT_FILE), "train-novel")?;
    let three = require(layout.novel_dir(seed, k, true).join(CHECKPOINT_FILE), "train-novel")?;
    let bank_path = require(layout.prototypes(seed, k), "build-prototypes")?;
    let reference = load_reference(layout, seed)?;
    let bank = PrototypeBank::load(&bank_path)?;
    let bench = load_data(layout, seed)?;
    let mut out = Vec::new();
    for (ck, plain, ens) in [(two, Row::Baseline, Row::Me), (three, Row::Pcf, Row::PcfMe)] {
        let det = load_detector(&ck, "train-novel")?;
        let dets = detect_split(&det, &bench.test)?;
        let rep = eval::evaluate(&dets, &bench.test, &cfg.eval)?;
        write_eval(&layout.eval_dir(seed, k, plain), &dets, &rep)?;
        out.push(outcome(layout.eval_dir(seed, k, plain), Status::Created));
        let rescored = rescore_split(&reference, &bank, &bench.test, &dets, &cfg.ensemble)?;
        let rep = eval::evaluate(&rescored, &bench.test, &cfg.eval)?;
        write_eval(&layout.eval_dir(seed, k, ens), &rescored, &rep)?;
        out.push(outcome(layout.eval_dir(seed, k, ens), Status::Created));
    }
    Ok(out)
}

pub fn evaluate(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<Outcome>, PipelineError> {
    let layout = prepare(cfg, opts, "evaluate")?;
    let mut out = Vec::new();
    for s in seeds(cfg, opts) {
        for k in shots(cfg, opts) {
            out.extend(evaluate_seed(cfg, &layout, s, k, opts.force)?);
        }
    }
    Ok(out)
}

/// Rescores a detections file on the test split of `seed` against a prototype
/// bank and writes the result with the same schema.
pub fn rescore_file(
    cfg: &ExperimentConfig,
    seed: u64,
    detections: &Path,
    bank: &Path,
    out: &Path,
) -> Result<Outcome, PipelineError> {
    cfg.validate()?;
    let layout = Layout::new(cfg.resolved_output_dir());
    let reference = load_reference(&layout, seed)?;
    let bank = PrototypeBank::load(bank)?;
    let bench = load_data(&layout, seed)?;
    let dets = read_detections(detections)?;
    let rescored = rescore_split(&reference, &bank, &bench.test, &dets, &cfg.ensemble)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(PipelineError::io(dir))?;
    }
    write_detections(out, &rescored)?;
    Ok(outcome(out.to_path_buf(), Status::Created))
}

/// Every step for one seed and shot count, reusing existing artifacts.
pub(crate) fn run_all(cfg: &ExperimentConfig, layout: &Layout, seed: u64, k: usize, force: bool) -> Result<(), PipelineError> {
    gen_seed(cfg, layout, seed, force)?;
    base_seed(cfg, layout, seed, force)?;
    pcf_seed(cfg, layout, seed, k, force)?;
    novel_seed(cfg, layout, seed, k, force)?;
    let proto = layout.prototypes(seed, k);
    if force || !proto.exists() {
        let bench = load_data(layout, seed)?;
        let r = reference_seed(cfg, layout, &bench, seed, force)?;
        let support = support_set(layout, &bench, seed, k)?;
        let bank = ensemble::build_prototypes(&r, &support.split.images, bench.novel_class_ids(), support.fingerprint())?;
        bank.save(&proto)?;
    }
    evaluate_seed(cfg, layout, seed, k, force)?;
    Ok(())
}
