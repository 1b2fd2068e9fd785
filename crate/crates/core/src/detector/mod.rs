//! Miniature cascaded set-prediction detector.
//!
//! A conv backbone with a top-down neck produces a feature pyramid. Learned
//! proposal boxes and encodings are refined by `N_H` head stages; each stage
//! pools features under the previous boxes, correlates them with the proposal
//! encodings through attention, decodes box and class features, and applies a
//! linear regressor and a linear classifier. Training matches predictions to
//! targets one-to-one per stage.

mod backbone;
mod head;
mod layers;
mod loss;
mod matcher;
mod model;
pub mod roi;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::DiffError;

pub use backbone::{Backbone, BackboneConfig, Neck, BOTTOM_BLOCKS};
pub use head::{HeadStage, StageOutput};
pub use layers::{Conv, LayerNorm, Linear};
pub use loss::{giou_loss, matching_cost, set_loss, LossConfig, Target};
pub use matcher::{hungarian_match, Assignment};
pub use model::{Detector, ForwardPass, HeadCache};
pub use roi::{roi_align, roi_pool};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid detector config: {0}")]
    Config(String),
    #[error("image has {got} channels, backbone expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("stage index {index} out of range (model has {stages} stages)")]
    StageOutOfRange { index: usize, stages: usize },
    #[error("matching failed: {0}")]
    Matching(String),
    #[error("class id {0} is not in the detector's label map")]
    UnknownClass(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeConfig {
    pub num_stages: usize,
    pub num_proposals: usize,
    pub encoding_dim: usize,
    pub roi_output_size: usize,
    pub num_classes: usize,
    pub ffn_dim: usize,
    /// Cut the gradient path through box logits between stages.
    pub detach_boxes: bool,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            num_stages: 6,
            num_proposals: 20,
            encoding_dim: 64,
            roi_output_size: 5,
            num_classes: 8,
            ffn_dim: 128,
            detach_boxes: false,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: &str| Err(DetectorError::Config(m.to_string()));
        if self.num_stages == 0 {
            return bad("num_stages must be at least 1");
        }
        if self.num_proposals == 0 {
            return bad("num_proposals must be at least 1");
        }
        if self.encoding_dim == 0 || self.ffn_dim == 0 {
            return bad("encoding_dim and ffn_dim must be positive");
        }
        if self.roi_output_size == 0 {
            return bad("roi_output_size must be at least 1");
        }
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub image_size: usize,
    pub backbone: BackboneConfig,
    pub cascade: CascadeConfig,
    pub loss: LossConfig,
    /// Minimum sigmoid score for a (proposal, class) pair to be emitted.
    pub score_floor: f64,
    /// Prior foreground probability used to initialize classifier biases.
    pub prior_prob: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            backbone: BackboneConfig::default(),
            cascade: CascadeConfig::default(),
            loss: LossConfig::default(),
            score_floor: 0.01,
            prior_prob: 0.01,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        self.backbone.validate()?;
        self.cascade.validate()?;
        let blocks = self.backbone.block_channel_widths.len();
        if self.image_size == 0 || !self.image_size.is_multiple_of(1 << blocks) {
            return Err(DetectorError::Config(format!(
                "image_size {} must be a positive multiple of {}",
                self.image_size,
                1 << blocks
            )));
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return Err(DetectorError::Config("prior_prob must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Classifier bias giving every class the prior probability at init.
    pub fn prior_bias(&self) -> f64 {
        -((1.0 - self.prior_prob) / self.prior_prob).ln()
    }
}

/// One predicted object: `(c_k, s_k, b_k)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    /// Normalized `[cx, cy, w, h]`.
    pub bbox: [f64; 4],
}

/// Sorts by score descending; equal scores keep their input order.
pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
}

#[cfg(test)]
mod tests;
