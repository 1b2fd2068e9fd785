use serde::{Deserialize, Serialize};

use crate::boxes::{giou, BoxCxcywh};
use crate::diffcore::{focal_term, Tape, Tensor, Var};

use super::head::StageOutput;
use super::matcher::hungarian_match;
use super::DetectorError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Transition point of the smooth-L1 box loss (normalized units).
    pub smooth_l1_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_cls: 2.0,
            lambda_l1: 5.0,
            lambda_giou: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            smooth_l1_beta: 0.02,
        }
    }
}

/// A ground-truth object in classifier index space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub class_index: usize,
    pub bbox: BoxCxcywh,
}

/// `P × G` matching cost from raw logits `[P, C]` and boxes `[P, 4]`.
pub fn matching_cost(logits: &[f64], boxes: &[f64], num_classes: usize, targets: &[Target], cfg: &LossConfig) -> Vec<Vec<f64>> {
    let p = boxes.len() / 4;
    (0..p)
        .map(|i| {
            let bi = [boxes[4 * i], boxes[4 * i + 1], boxes[4 * i + 2], boxes[4 * i + 3]];
            targets
                .iter()
                .map(|t| {
                    let z = logits[i * num_classes + t.class_index];
                    let cls = focal_term(z, 1.0, cfg.focal_alpha, cfg.focal_gamma).0
                        - focal_term(z, 0.0, cfg.focal_alpha, cfg.focal_gamma).0;
                    let l1: f64 = bi.iter().zip(&t.bbox).map(|(a, b)| (a - b).abs()).sum();
                    cfg.lambda_cls * cls + cfg.lambda_l1 * l1 + cfg.lambda_giou * (1.0 - giou(bi, t.bbox))
                })
                .collect()
        })
        .collect()
}

/// Row-major matrix mapping `[cx, cy, w, h]` to `[x1, y1, x2, y2]`.
const TO_XYXY: [f64; 16] = [
    1.0, 0.0, 1.0, 0.0, //
    0.0, 1.0, 0.0, 1.0, //
    -0.5, 0.0, 0.5, 0.0, //
    0.0, -0.5, 0.0, 0.5,
];

/// `Σ (1 − GIoU)` between predicted boxes `[M, 4]` (cxcywh) and fixed targets.
pub fn giou_loss(tape: &mut Tape, pred: Var, targets: &[BoxCxcywh]) -> Result<Var, DetectorError> {
    let m = targets.len();
    let conv = tape.constant(Tensor::new(vec![4, 4], TO_XYXY.to_vec())?)?;
    let xyxy = tape.matmul(pred, conv)?;
    let mut p = Vec::with_capacity(4);
    let mut t = Vec::with_capacity(4);
    for j in 0..4 {
        p.push(tape.slice_last(xyxy, j, 1)?);
        let col = targets
            .iter()
            .map(|b| {
                let h = if j < 2 { -0.5 } else { 0.5 };
                b[j % 2] + h * b[2 + j % 2]
            })
            .collect();
        t.push(tape.constant(Tensor::new(vec![m, 1], col)?)?);
    }
    let area_t: Vec<f64> = targets.iter().map(|b| b[2] * b[3]).collect();
    let area_t = tape.constant(Tensor::new(vec![m, 1], area_t)?)?;

    let mut inter_sides = Vec::with_capacity(2);
    let mut hull_sides = Vec::with_capacity(2);
    for a in 0..2 {
        let lo = tape.maximum(p[a], t[a])?;
        let hi = tape.minimum(p[a + 2], t[a + 2])?;
        let side = tape.sub(hi, lo)?;
        inter_sides.push(tape.relu(side)?);
        let hlo = tape.minimum(p[a], t[a])?;
        let hhi = tape.maximum(p[a + 2], t[a + 2])?;
        hull_sides.push(tape.sub(hhi, hlo)?);
    }
    let inter = tape.mul(inter_sides[0], inter_sides[1])?;
    let pw = tape.slice_last(pred, 2, 1)?;
    let ph = tape.slice_last(pred, 3, 1)?;
    let area_p = tape.mul(pw, ph)?;
    let union = tape.add(area_p, area_t)?;
    let union = tape.sub(union, inter)?;
    let iou = tape.div(inter, union)?;
    let hull = tape.mul(hull_sides[0], hull_sides[1])?;
    let gap = tape.sub(hull, union)?;
    let penalty = tape.div(gap, hull)?;
    let g = tape.sub(iou, penalty)?;
    let s = tape.sum(g)?;
    let s = tape.scale(s, -1.0)?;
    Ok(tape.add_scalar(s, m as f64)?)
}

/// Set-prediction loss summed over stages. Each stage is matched to the
/// targets independently; classification covers every proposal, box terms
/// only matched ones. All terms are normalized by `max(1, |targets|)`.
pub fn set_loss(tape: &mut Tape, stages: &[StageOutput], targets: &[Target], cfg: &LossConfig) -> Result<Var, DetectorError> {
    if stages.is_empty() {
        return Err(DetectorError::Config("set_loss needs at least one stage".into()));
    }
    let norm = 1.0 / targets.len().max(1) as f64;
    let mut total: Option<Var> = None;
    for st in stages {
        let (p, c) = {
            let s = tape.shape(st.c);
            (s[0], s[1])
        };
        if let Some(t) = targets.iter().find(|t| t.class_index >= c) {
            return Err(DetectorError::UnknownClass(t.class_index));
        }
        let mut cls_target = vec![0.0; p * c];
        let mut stage_loss;
        if targets.is_empty() {
            let f = tape.sigmoid_focal(st.c, &cls_target, cfg.focal_alpha, cfg.focal_gamma)?;
            stage_loss = tape.scale(f, cfg.lambda_cls * norm)?;
        } else {
            let cost = matching_cost(tape.values(st.c), tape.values(st.b), c, targets, cfg);
            let asg = hungarian_match(&cost)?;
            let mut rows = Vec::with_capacity(targets.len());
            let mut tgt_flat = Vec::with_capacity(4 * targets.len());
            let mut tgt_boxes = Vec::with_capacity(targets.len());
            for &(pi, ti) in &asg.pairs {
                cls_target[pi * c + targets[ti].class_index] = 1.0;
                rows.push(pi);
                tgt_flat.extend_from_slice(&targets[ti].bbox);
                tgt_boxes.push(targets[ti].bbox);
            }
            let f = tape.sigmoid_focal(st.c, &cls_target, cfg.focal_alpha, cfg.focal_gamma)?;
            stage_loss = tape.scale(f, cfg.lambda_cls * norm)?;
            let matched = tape.gather_rows(st.b, &rows)?;
            let l1 = tape.smooth_l1(matched, &tgt_flat, cfg.smooth_l1_beta)?;
            let l1 = tape.sum(l1)?;
            let l1 = tape.scale(l1, cfg.lambda_l1 * norm)?;
            let g = giou_loss(tape, matched, &tgt_boxes)?;
            let g = tape.scale(g, cfg.lambda_giou * norm)?;
            stage_loss = tape.add(stage_loss, l1)?;
            stage_loss = tape.add(stage_loss, g)?;
        }
        total = Some(match total {
            Some(t) => tape.add(t, stage_loss)?,
            None => stage_loss,
        });
    }
    Ok(total.expect("at least one stage"))
}
