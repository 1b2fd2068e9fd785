//! Prototype-based rescoring with an independent, frozen reference backbone.
//!
//! The reference backbone shares the detector's backbone topology but is
//! trained on an auxiliary classification task over classes disjoint from
//! every benchmark class, then frozen. Class prototypes are mean ROI-aligned
//! features of the support instances; a detection's score is blended with
//! the cosine similarity between its own feature and its class prototype.

mod reference;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::BoxCxcywh;
use crate::detector::{sort_detections, Detection, DetectorError};
use crate::diffcore::DiffError;
use crate::synthdata::{Raster, SceneImage, SynthError};

pub use reference::{aux_dataset, ReferenceBackbone, ReferenceConfig, AuxSample};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("auxiliary classes overlap benchmark classes: {0:?}")]
    ClassOverlap(Vec<usize>),
    #[error("reference backbone reached {accuracy:.3} train accuracy after {steps} steps (needs {target:.2})")]
    Undertrained { accuracy: f64, steps: usize, target: f64 },
    #[error("class {0} has no support instances")]
    EmptyClass(usize),
    #[error("prototype bank has no class {0}")]
    MissingPrototype(usize),
    #[error("degenerate prototype for class {0}")]
    DegeneratePrototype(usize),
    #[error("invalid ensemble config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Per-class prototype vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub prototypes: BTreeMap<usize, Vec<f64>>,
    pub dim: usize,
    pub support_fingerprint: String,
}

impl PrototypeBank {
    /// Arithmetic mean of the features of each class.
    pub fn from_features(features: &[(usize, Vec<f64>)], support_fingerprint: String) -> Result<Self, EnsembleError> {
        let dim = features.first().map(|f| f.1.len()).unwrap_or(0);
        let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for (c, f) in features {
            if f.len() != dim {
                return Err(EnsembleError::Config("feature dimensions differ".into()));
            }
            let e = sums.entry(*c).or_insert_with(|| (vec![0.0; dim], 0));
            for (s, v) in e.0.iter_mut().zip(f) {
                *s += v;
            }
            e.1 += 1;
        }
        let mut prototypes = BTreeMap::new();
        for (c, (sum, n)) in sums {
            let r: Vec<f64> = sum.into_iter().map(|s| s / n as f64).collect();
            if r.iter().any(|v| !v.is_finite()) || r.iter().all(|v| *v == 0.0) {
                return Err(EnsembleError::DegeneratePrototype(c));
            }
            prototypes.insert(c, r);
        }
        Ok(Self {
            prototypes,
            dim,
            support_fingerprint,
        })
    }

    pub fn get(&self, class_id: usize) -> Result<&[f64], EnsembleError> {
        self.prototypes
            .get(&class_id)
            .map(Vec::as_slice)
            .ok_or(EnsembleError::MissingPrototype(class_id))
    }

    pub fn save(&self, path: &Path) -> Result<(), EnsembleError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EnsembleError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Prototypes for every class in `class_ids` from the annotated support
/// images.
pub fn build_prototypes(
    reference: &ReferenceBackbone,
    support: &[SceneImage],
    class_ids: &[usize],
    support_fingerprint: String,
) -> Result<PrototypeBank, EnsembleError> {
    let mut features = Vec::new();
    for img in support {
        if img.instances.is_empty() {
            continue;
        }
        let boxes: Vec<BoxCxcywh> = img.instances.iter().map(|i| i.bbox).collect();
        let feats = reference.embed(&img.raster, &boxes)?;
        for (inst, f) in img.instances.iter().zip(feats) {
            features.push((inst.class_id, f));
        }
    }
    for c in class_ids {
        if !features.iter().any(|(k, _)| k == c) {
            return Err(EnsembleError::EmptyClass(*c));
        }
    }
    features.retain(|(c, _)| class_ids.contains(c));
    PrototypeBank::from_features(&features, support_fingerprint)
}

/// Cosine similarity; 0 (with a warning) when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!("zero-norm feature in cosine similarity; using 0");
        return 0.0;
    }
    dot / (na * nb)
}

/// `cos(z, r_c)` for the feature `z` of `bbox` in `image`.
pub fn similarity_score(
    reference: &ReferenceBackbone,
    image: &Raster,
    bbox: BoxCxcywh,
    bank: &PrototypeBank,
    class_id: usize,
) -> Result<f64, EnsembleError> {
    let r = bank.get(class_id)?;
    let z = reference.embed(image, &[bbox])?;
    Ok(cosine(&z[0], r))
}

/// Weights of the detector score (`alpha`) and the prototype similarity
/// (`beta`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEnsembleConfig")]
pub struct EnsembleConfig {
    alpha: f64,
    beta: f64,
}

#[derive(Deserialize)]
struct RawEnsembleConfig {
    alpha: f64,
    beta: Option<f64>,
}

impl TryFrom<RawEnsembleConfig> for EnsembleConfig {
    type Error = EnsembleError;

    fn try_from(r: RawEnsembleConfig) -> Result<Self, Self::Error> {
        EnsembleConfig::new(r.alpha, r.beta.unwrap_or(1.0 - r.alpha))
    }
}

pub const DEFAULT_ALPHA: f64 = 0.5;

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self::from_alpha(DEFAULT_ALPHA).expect("default alpha is valid")
    }
}

impl EnsembleConfig {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, EnsembleError> {
        if !(0.0..=1.0).contains(&alpha) || !(0.0..=1.0).contains(&beta) {
            return Err(EnsembleError::Config(format!("alpha {alpha} and beta {beta} must lie in [0, 1]")));
        }
        if (alpha + beta - 1.0).abs() > 1e-12 {
            return Err(EnsembleError::Config(format!("alpha + beta must equal 1, got {}", alpha + beta)));
        }
        Ok(Self { alpha, beta })
    }

    pub fn from_alpha(alpha: f64) -> Result<Self, EnsembleError> {
        Self::new(alpha, 1.0 - alpha)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

/// `alpha · s + beta · s_im`.
pub fn ensemble_scores(s: f64, s_im: f64, cfg: &EnsembleConfig) -> f64 {
    cfg.alpha * s + cfg.beta * s_im
}

/// Replaces each detection's score with its ensemble score and re-sorts.
/// With `beta = 0` the detector's scores and ranking are kept exactly.
pub fn rescore(
    reference: &ReferenceBackbone,
    bank: &PrototypeBank,
    image: &Raster,
    detections: &[Detection],
    cfg: &EnsembleConfig,
) -> Result<Vec<Detection>, EnsembleError> {
    if cfg.beta == 0.0 || detections.is_empty() {
        return Ok(detections.to_vec());
    }
    let boxes: Vec<BoxCxcywh> = detections.iter().map(|d| d.bbox).collect();
    let feats = reference.embed(image, &boxes)?;
    let sims = detections
        .iter()
        .zip(&feats)
        .map(|(d, z)| Ok(cosine(z, bank.get(d.class_id)?)))
        .collect::<Result<Vec<_>, EnsembleError>>()?;
    Ok(rescore_with(detections, &sims, cfg))
}

/// Rescoring with precomputed similarities.
pub fn rescore_with(detections: &[Detection], sims: &[f64], cfg: &EnsembleConfig) -> Vec<Detection> {
    let mut out: Vec<Detection> = detections
        .iter()
        .zip(sims)
        .map(|(d, s_im)| Detection {
            score: ensemble_scores(d.score, *s_im, cfg),
            ..d.clone()
        })
        .collect();
    sort_detections(&mut out);
    out
}

#[cfg(test)]
mod tests;
