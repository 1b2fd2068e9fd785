//! COCO-style detection evaluation: greedy IoU matching, 101-point
//! interpolated AP per class and threshold, AP / AP50 / AP75 summaries.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::{self, BoxCxcywh};
use crate::detector::Detection;
use crate::synthdata::DatasetSplit;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("detection names class {0}, which is not evaluated")]
    UnknownClass(usize),
    #[error("detections reference unknown image {0}")]
    UnknownImage(usize),
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// IoU of two normalized cxcywh boxes; 0 when the union is empty.
pub fn iou(a: BoxCxcywh, b: BoxCxcywh) -> f64 {
    boxes::iou(a, b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    /// Index into the detection list that was matched.
    pub detection: usize,
    pub score: f64,
    /// Index of the matched ground truth, if any.
    pub gt: Option<usize>,
    pub is_tp: bool,
    pub threshold: f64,
}

/// Greedy matching in the given (score-descending) order: each detection
/// takes the unmatched ground truth of highest IoU, provided IoU ≥ `thresh`;
/// equal IoUs go to the lowest ground-truth index.
pub fn match_detections(dets: &[(f64, BoxCxcywh)], gts: &[BoxCxcywh], thresh: f64) -> Vec<MatchRecord> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .enumerate()
        .map(|(i, (score, b))| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let v = iou(*b, *gt);
                if v >= thresh && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            MatchRecord {
                detection: i,
                score: *score,
                gt: best.map(|(g, _)| g),
                is_tp: best.is_some(),
                threshold: thresh,
            }
        })
        .collect()
}

/// 101-point interpolated average precision of records sorted by score
/// descending. `None` when there is no ground truth.
pub fn average_precision(records: &[MatchRecord], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(records.len());
    let mut precision = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        if r.is_tp {
            tp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut j = 0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        while j < recall.len() && recall[j] < r {
            j += 1;
        }
        if j < recall.len() {
            sum += precision[j];
        }
    }
    Some(sum / 101.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub max_detections: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            max_detections: 100,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.iou_thresholds.is_empty() || self.iou_thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(EvalError::Config("iou_thresholds must be non-empty and within [0, 1]".into()));
        }
        if self.max_detections == 0 {
            return Err(EvalError::Config("max_detections must be positive".into()));
        }
        Ok(())
    }

    fn index_of(&self, t: f64) -> Option<usize> {
        self.iou_thresholds.iter().position(|x| (x - t).abs() < 1e-9)
    }
}

/// Detections produced for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub image_id: usize,
    pub detections: Vec<Detection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub num_gt: usize,
    pub num_detections: usize,
    /// AP at each threshold; empty when the class has no ground truth.
    pub ap_per_threshold: Vec<f64>,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_thresholds: Vec<f64>,
    pub classes: Vec<ClassReport>,
    /// Mean over thresholds and classes with ground truth.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Mean AP over the evaluated (novel) classes.
    pub novel_map: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Canonical order: score descending, then box coordinates, so equal-score
/// detections evaluate identically however they were listed.
fn canonical_cmp(a: &(f64, BoxCxcywh), b: &(f64, BoxCxcywh)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| {
        a.1.iter()
            .zip(&b.1)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    })
}

/// Scores `detections` against the annotations of `test`, over the classes
/// listed in `test.class_ids`.
pub fn evaluate(detections: &[ImageDetections], test: &DatasetSplit, cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let image_index: HashMap<usize, usize> = test.images.iter().enumerate().map(|(i, im)| (im.image_id, i)).collect();
    // Per image: kept detections grouped by class.
    let mut per_image: Vec<BTreeMap<usize, Vec<(f64, BoxCxcywh)>>> = vec![BTreeMap::new(); test.images.len()];
    for im in detections {
        let idx = *image_index.get(&im.image_id).ok_or(EvalError::UnknownImage(im.image_id))?;
        let mut all: Vec<(usize, f64, BoxCxcywh)> = Vec::with_capacity(im.detections.len());
        for d in &im.detections {
            if !test.class_ids.contains(&d.class_id) {
                return Err(EvalError::UnknownClass(d.class_id));
            }
            all.push((d.class_id, d.score, d.bbox));
        }
        all.sort_by(|a, b| canonical_cmp(&(a.1, a.2), &(b.1, b.2)).then(a.0.cmp(&b.0)));
        all.truncate(cfg.max_detections);
        for (c, s, b) in all {
            per_image[idx].entry(c).or_default().push((s, b));
        }
    }

    let mut classes = Vec::with_capacity(test.class_ids.len());
    for &c in &test.class_ids {
        let gts: Vec<Vec<BoxCxcywh>> = test
            .images
            .iter()
            .map(|im| im.instances.iter().filter(|x| x.class_id == c).map(|x| x.bbox).collect())
            .collect();
        let num_gt: usize = gts.iter().map(Vec::len).sum();
        let num_detections = per_image.iter().map(|m| m.get(&c).map_or(0, Vec::len)).sum();
        let mut aps = Vec::new();
        if num_gt > 0 {
            for &t in &cfg.iou_thresholds {
                let mut recs: Vec<(f64, BoxCxcywh, bool)> = Vec::new();
                for (i, g) in gts.iter().enumerate() {
                    let dets = per_image[i].get(&c).cloned().unwrap_or_default();
                    for m in match_detections(&dets, g, t) {
                        recs.push((m.score, dets[m.detection].1, m.is_tp));
                    }
                }
                recs.sort_by(|a, b| canonical_cmp(&(a.0, a.1), &(b.0, b.1)).then(b.2.cmp(&a.2)));
                let records: Vec<MatchRecord> = recs
                    .iter()
                    .enumerate()
                    .map(|(i, (s, _, tp))| MatchRecord {
                        detection: i,
                        score: *s,
                        gt: None,
                        is_tp: *tp,
                        threshold: t,
                    })
                    .collect();
                aps.push(average_precision(&records, num_gt).expect("num_gt > 0"));
            }
        }
        let at = |t: f64| cfg.index_of(t).and_then(|i| aps.get(i).copied());
        classes.push(ClassReport {
            class_id: c,
            num_gt,
            num_detections,
            ap: (!aps.is_empty()).then(|| mean(aps.iter().copied())),
            ap50: at(0.5),
            ap75: at(0.75),
            ap_per_threshold: aps,
        });
    }
    let ap = mean(classes.iter().filter_map(|c| c.ap));
    Ok(EvalReport {
        iou_thresholds: cfg.iou_thresholds.clone(),
        ap50: mean(classes.iter().filter_map(|c| c.ap50)),
        ap75: mean(classes.iter().filter_map(|c| c.ap75)),
        novel_map: ap,
        ap,
        classes,
    })
}

impl EvalReport {
    pub fn save_json(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self, EvalError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// One row per class plus an `all` row.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut s = String::from("class_id,num_gt,AP,AP50,AP75\n");
        for c in &self.classes {
            s.push_str(&format!("{},{},{},{},{}\n", c.class_id, c.num_gt, fmt(c.ap), fmt(c.ap50), fmt(c.ap75)));
        }
        let total: usize = self.classes.iter().map(|c| c.num_gt).sum();
        s.push_str(&format!("all,{total},{:.6},{:.6},{:.6}\n", self.ap, self.ap50, self.ap75));
        s
    }
}

/// One line of a detections file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: usize,
    pub category_id: usize,
    pub bbox: [f64; 4],
    pub score: f64,
}

pub fn write_detections(path: &Path, dets: &[ImageDetections]) -> Result<(), EvalError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for im in dets {
        for d in &im.detections {
            let rec = DetectionRecord {
                image_id: im.image_id,
                category_id: d.class_id,
                bbox: d.bbox,
                score: d.score,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a detections file, grouping records by image in first-seen order.
pub fn read_detections(path: &Path) -> Result<Vec<ImageDetections>, EvalError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out: Vec<ImageDetections> = Vec::new();
    let mut pos: HashMap<usize, usize> = HashMap::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: DetectionRecord = serde_json::from_str(&line)?;
        let i = *pos.entry(r.image_id).or_insert_with(|| {
            out.push(ImageDetections {
                image_id: r.image_id,
                detections: Vec::new(),
            });
            out.len() - 1
        });
        out[i].detections.push(Detection {
            class_id: r.category_id,
            score: r.score,
            bbox: r.bbox,
        });
    }
    Ok(out)
}
