use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Checkpoint, ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};
use crate::seeds::derive_seed;
use crate::synthdata::{Raster, SceneImage, SceneInstance};

use super::backbone::{Backbone, Neck};
use super::head::{HeadStage, StageOutput};
use super::layers::uniform;
use super::loss::{set_loss, Target};
use super::{sort_detections, Detection, DetectorConfig, DetectorError};

/// Initial proposal side length (normalized).
const PROPOSAL_SIDE: f64 = 0.35;

/// Tape handles produced by a full forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub pyramid: Vec<Var>,
    pub stages: Vec<StageOutput>,
}

/// Per-stage class features `v_i` and boxes `b_i` of one image. Valid as long
/// as every non-classifier parameter stays fixed, which lets classifier-only
/// training skip the frozen part of the network.
#[derive(Clone, Debug)]
pub struct HeadCache {
    pub v: Vec<Tensor>,
    pub b: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    architecture: String,
    config: DetectorConfig,
    label_map: Vec<usize>,
}

const ARCHITECTURE: &str = "cascade-set-detector";

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// The detector together with its parameters.
#[derive(Clone, Debug)]
pub struct Detector {
    config: DetectorConfig,
    label_map: Vec<usize>,
    store: ParamStore,
    backbone: Backbone,
    neck: Neck,
    stages: Vec<HeadStage>,
    proposal_boxes: ParamId,
    proposal_feats: ParamId,
}

fn check_label_map(label_map: &[usize]) -> Result<(), DetectorError> {
    if label_map.is_empty() {
        return Err(DetectorError::Config("label map must name at least one class".into()));
    }
    let uniq: HashSet<_> = label_map.iter().collect();
    if uniq.len() != label_map.len() {
        return Err(DetectorError::Config("label map has duplicate class ids".into()));
    }
    Ok(())
}

impl Detector {
    /// `label_map[i]` is the dataset class id predicted by classifier row `i`.
    pub fn new(mut config: DetectorConfig, label_map: Vec<usize>, seed: u64) -> Result<Self, DetectorError> {
        check_label_map(&label_map)?;
        config.cascade.num_classes = label_map.len();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, "backbone", &config.backbone, &mut rng)?;
        let neck = Neck::new(&mut store, "neck", &config.backbone, &mut rng)?;
        let cc = &config.cascade;
        let p = cc.num_proposals;
        let mut z0 = Vec::with_capacity(4 * p);
        for _ in 0..p {
            let cx: f64 = rand::Rng::gen_range(&mut rng, 0.2..0.8);
            let cy: f64 = rand::Rng::gen_range(&mut rng, 0.2..0.8);
            z0.extend([logit(cx), logit(cy), logit(PROPOSAL_SIDE), logit(PROPOSAL_SIDE)]);
        }
        let proposal_boxes = store.add("proposals.boxes", Tensor::new(vec![p, 4], z0)?, ParamGroup::Other)?;
        let q0 = Tensor::new(vec![p, cc.encoding_dim], uniform(&mut rng, p * cc.encoding_dim, 1.0))?;
        let proposal_feats = store.add("proposals.feats", q0, ParamGroup::Other)?;
        let prior = config.prior_bias();
        let stages = (0..cc.num_stages)
            .map(|i| {
                HeadStage::new(
                    &mut store,
                    i,
                    config.backbone.neck_dim,
                    cc.encoding_dim,
                    cc.ffn_dim,
                    cc.roi_output_size * cc.roi_output_size,
                    cc.num_classes,
                    prior,
                    &mut rng,
                )
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            config,
            label_map,
            store,
            backbone,
            neck,
            stages,
            proposal_boxes,
            proposal_feats,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn label_map(&self) -> &[usize] {
        &self.label_map
    }

    pub fn num_classes(&self) -> usize {
        self.label_map.len()
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn head_stage(&self, index: usize) -> Result<&HeadStage, DetectorError> {
        self.stages.get(index).ok_or(DetectorError::StageOutOfRange {
            index,
            stages: self.stages.len(),
        })
    }

    pub fn proposal_params(&self) -> (ParamId, ParamId) {
        (self.proposal_boxes, self.proposal_feats)
    }

    fn check_image(&self, image: &Raster) -> Result<(), DetectorError> {
        let s = self.config.image_size;
        if image.height != s || image.width != s {
            return Err(DetectorError::Config(format!(
                "image is {}x{}, detector expects {s}x{s}",
                image.height, image.width
            )));
        }
        Ok(())
    }

    /// Feature pyramid (finest first).
    pub fn features(&self, tape: &mut Tape, image: &Raster) -> Result<Vec<Var>, DetectorError> {
        self.check_image(image)?;
        let x = self.backbone.input(tape, image)?;
        let blocks = self.backbone.forward(tape, &self.store, x)?;
        self.neck.forward(tape, &self.store, &blocks)
    }

    /// Runs stage `index` on the previous encodings and box logits.
    pub fn run_head_stage(
        &self,
        tape: &mut Tape,
        index: usize,
        pyramid: &[Var],
        q_prev: Var,
        z_prev: Var,
    ) -> Result<StageOutput, DetectorError> {
        let cc = &self.config.cascade;
        self.head_stage(index)?
            .forward(tape, &self.store, pyramid, q_prev, z_prev, cc.roi_output_size, cc.detach_boxes)
    }

    pub fn forward(&self, tape: &mut Tape, image: &Raster) -> Result<ForwardPass, DetectorError> {
        let pyramid = self.features(tape, image)?;
        let mut q = tape.param(&self.store, self.proposal_feats)?;
        let mut z = tape.param(&self.store, self.proposal_boxes)?;
        let mut stages = Vec::with_capacity(self.stages.len());
        for i in 0..self.stages.len() {
            let out = self.run_head_stage(tape, i, &pyramid, q, z)?;
            q = out.q;
            z = out.z;
            stages.push(out);
        }
        Ok(ForwardPass { pyramid, stages })
    }

    /// Maps annotations to classifier indices.
    pub fn targets(&self, instances: &[SceneInstance]) -> Result<Vec<Target>, DetectorError> {
        instances
            .iter()
            .map(|inst| {
                let idx = self
                    .label_map
                    .iter()
                    .position(|c| *c == inst.class_id)
                    .ok_or(DetectorError::UnknownClass(inst.class_id))?;
                Ok(Target {
                    class_index: idx,
                    bbox: inst.bbox,
                })
            })
            .collect()
    }

    pub fn image_loss(&self, tape: &mut Tape, image: &SceneImage) -> Result<Var, DetectorError> {
        let targets = self.targets(&image.instances)?;
        let pass = self.forward(tape, &image.raster)?;
        set_loss(tape, &pass.stages, &targets, &self.config.loss)
    }

    /// Mean of per-image losses.
    pub fn batch_loss(&self, tape: &mut Tape, images: &[&SceneImage]) -> Result<Var, DetectorError> {
        if images.is_empty() {
            return Err(DetectorError::Config("empty batch".into()));
        }
        let mut total: Option<Var> = None;
        for img in images {
            let l = self.image_loss(tape, img)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        Ok(tape.scale(total.expect("non-empty"), 1.0 / images.len() as f64)?)
    }

    pub fn head_cache(&self, image: &Raster) -> Result<HeadCache, DetectorError> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, image)?;
        Ok(HeadCache {
            v: pass.stages.iter().map(|s| tape.value(s.v).clone()).collect(),
            b: pass.stages.iter().map(|s| tape.value(s.b).clone()).collect(),
        })
    }

    /// Same value as [`Detector::image_loss`] for the cached image, with only
    /// the classifiers on the tape.
    pub fn cached_loss(&self, tape: &mut Tape, cache: &HeadCache, targets: &[Target]) -> Result<Var, DetectorError> {
        if cache.v.len() != self.stages.len() {
            return Err(DetectorError::Config("head cache does not match the cascade depth".into()));
        }
        let mut outs = Vec::with_capacity(self.stages.len());
        for (st, (v, b)) in self.stages.iter().zip(cache.v.iter().zip(&cache.b)) {
            let v = tape.constant(v.clone())?;
            let b = tape.constant(b.clone())?;
            let c = st.classifier().forward(tape, &self.store, v)?;
            outs.push(StageOutput {
                q: v,
                u: v,
                v,
                z: b,
                b,
                c,
                pooled_boxes: Vec::new(),
            });
        }
        set_loss(tape, &outs, targets, &self.config.loss)
    }

    /// Final-stage detections above the configured score floor.
    pub fn detect(&self, image: &Raster) -> Result<Vec<Detection>, DetectorError> {
        self.detect_with_floor(image, self.config.score_floor)
    }

    pub fn detect_with_floor(&self, image: &Raster, score_floor: f64) -> Result<Vec<Detection>, DetectorError> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, image)?;
        let last = pass.stages.last().expect("at least one stage");
        Ok(self.decode(tape.values(last.c), tape.values(last.b), score_floor))
    }

    /// Turns raw logits `[P, C]` and boxes `[P, 4]` into sorted detections.
    pub fn decode(&self, logits: &[f64], boxes: &[f64], score_floor: f64) -> Vec<Detection> {
        let c = self.label_map.len();
        let mut dets = Vec::new();
        for (p, row) in logits.chunks(c).enumerate() {
            let b = &boxes[4 * p..4 * p + 4];
            for (j, z) in row.iter().enumerate() {
                let score = 1.0 / (1.0 + (-z).exp());
                if score >= score_floor {
                    dets.push(Detection {
                        class_id: self.label_map[j],
                        score,
                        bbox: [b[0], b[1], b[2], b[3]],
                    });
                }
            }
        }
        sort_detections(&mut dets);
        dets
    }

    /// Fresh classifiers for a new label map on every stage. Only the
    /// classifier parameters are touched.
    pub fn reinit_classifiers(&mut self, label_map: Vec<usize>, seed: u64) -> Result<(), DetectorError> {
        check_label_map(&label_map)?;
        let prior = self.config.prior_bias();
        for (i, st) in self.stages.iter_mut().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            st.reinit_classifier(&mut self.store, label_map.len(), prior, &mut rng)?;
        }
        self.config.cascade.num_classes = label_map.len();
        self.label_map = label_map;
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let m = Manifest {
            architecture: ARCHITECTURE.to_string(),
            config: self.config.clone(),
            label_map: self.label_map.clone(),
        };
        Checkpoint::from_store(&self.store, serde_json::to_value(m).expect("manifest serializes"))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, DetectorError> {
        let m: Manifest = serde_json::from_value(ck.manifest.clone())
            .map_err(|e| DetectorError::Config(format!("checkpoint manifest: {e}")))?;
        if m.architecture != ARCHITECTURE {
            return Err(DetectorError::Config(format!("unknown architecture {:?}", m.architecture)));
        }
        let mut det = Self::new(m.config, m.label_map, 0)?;
        ck.load_into(&mut det.store)?;
        Ok(det)
    }
}
