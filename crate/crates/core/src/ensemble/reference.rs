use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BoxCxcywh;
use crate::detector::roi::roi_align;
use crate::detector::{Backbone, BackboneConfig, Linear};
use crate::diffcore::{adamw_step_all, Checkpoint, OptimConfig, ParamGroup, ParamStore, Tape, Var};
use crate::seeds::derive_seed;
use crate::synthdata::{class_spec, render_image, Raster, SceneInstance};

use super::EnsembleError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceConfig {
    pub backbone: BackboneConfig,
    pub image_size: usize,
    /// Block whose output feeds ROI align.
    pub feature_block: usize,
    pub roi_size: usize,
    pub images_per_class: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub target_accuracy: f64,
    /// Accuracy is measured on the full training set every this many steps.
    pub check_every: usize,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            image_size: 32,
            feature_block: 1,
            roi_size: 2,
            images_per_class: 40,
            max_steps: 3000,
            batch_size: 8,
            learning_rate: 2e-3,
            target_accuracy: 0.9,
            check_every: 100,
        }
    }
}

/// One single-object image of an auxiliary class.
#[derive(Clone, Debug)]
pub struct AuxSample {
    pub raster: Raster,
    pub label: usize,
    pub bbox: BoxCxcywh,
}

/// `images_per_class` single-object images for each auxiliary class, label =
/// position in `aux_classes`.
pub fn aux_dataset(aux_classes: &[usize], images_per_class: usize, image_size: usize, seed: u64) -> Result<Vec<AuxSample>, EnsembleError> {
    let specs = aux_classes.iter().map(|c| class_spec(*c)).collect::<Result<Vec<_>, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = image_size as f64;
    let (lo, hi) = ((image_size / 4).max(4), (image_size * 7 / 16).max(4));
    let mut out = Vec::with_capacity(aux_classes.len() * images_per_class);
    for i in 0..images_per_class {
        for (label, &c) in aux_classes.iter().enumerate() {
            let w = rng.gen_range(lo..=hi);
            let h = rng.gen_range(lo..=hi);
            let x0 = rng.gen_range(0..=image_size - w);
            let y0 = rng.gen_range(0..=image_size - h);
            let bbox = [
                (x0 as f64 + w as f64 / 2.0) / n,
                (y0 as f64 + h as f64 / 2.0) / n,
                w as f64 / n,
                h as f64 / n,
            ];
            let inst = SceneInstance {
                class_id: c,
                bbox,
                rotation: rng.gen_range(-0.25..=0.25),
                intensity: rng.gen_range(0.7..=1.0),
            };
            let img_seed = derive_seed(seed, (i * aux_classes.len() + label) as u64);
            let raster = render_image(&[inst], &specs, image_size, img_seed)?;
            out.push(AuxSample { raster, label, bbox });
        }
    }
    Ok(out)
}

/// Frozen feature extractor trained on auxiliary classes.
#[derive(Clone, Debug)]
pub struct ReferenceBackbone {
    config: ReferenceConfig,
    aux_classes: Vec<usize>,
    backbone: Backbone,
    store: ParamStore,
    train_accuracy: f64,
    steps: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    config: ReferenceConfig,
    aux_classes: Vec<usize>,
    train_accuracy: f64,
    steps: usize,
}

const KIND: &str = "reference-backbone";

fn gap_logits(tape: &mut Tape, store: &ParamStore, backbone: &Backbone, head: &Linear, img: &Raster) -> Result<Var, EnsembleError> {
    let x = backbone.input(tape, img)?;
    let blocks = backbone.forward(tape, store, x)?;
    let last = *blocks.last().expect("backbone has blocks");
    let s = tape.shape(last).to_vec();
    let flat = tape.reshape(last, &[s[0], s[1] * s[2]])?;
    let pooled = tape.mean_last(flat)?;
    let pooled = tape.reshape(pooled, &[1, s[0]])?;
    Ok(head.forward(tape, store, pooled)?)
}

impl ReferenceBackbone {
    /// Trains a fresh backbone plus a linear head on single-object images of
    /// `aux_classes` until train accuracy reaches the target, then discards
    /// the head and freezes the backbone.
    pub fn train(
        aux_classes: &[usize],
        benchmark_classes: &[usize],
        config: ReferenceConfig,
        seed: u64,
    ) -> Result<Self, EnsembleError> {
        let overlap: Vec<usize> = aux_classes.iter().filter(|c| benchmark_classes.contains(c)).copied().collect();
        if !overlap.is_empty() {
            return Err(EnsembleError::ClassOverlap(overlap));
        }
        if aux_classes.len() < 2 {
            return Err(EnsembleError::Config("need at least two auxiliary classes".into()));
        }
        if config.feature_block >= config.backbone.block_channel_widths.len() || config.roi_size == 0 {
            return Err(EnsembleError::Config("feature_block or roi_size out of range".into()));
        }
        let data = aux_dataset(aux_classes, config.images_per_class, config.image_size, derive_seed(seed, 1))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, "reference", &config.backbone, &mut rng)?;
        let width = *config.backbone.block_channel_widths.last().expect("blocks");
        let head = Linear::new(&mut store, "reference_head", width, aux_classes.len(), ParamGroup::Other, &mut rng)?;
        let optim = OptimConfig::with_lr(config.learning_rate);

        let accuracy = |store: &ParamStore| -> Result<f64, EnsembleError> {
            let mut correct = 0;
            for s in &data {
                let mut t = Tape::new();
                let l = gap_logits(&mut t, store, &backbone, &head, &s.raster)?;
                let v = t.values(l);
                let arg = (0..v.len()).max_by(|a, b| v[*a].total_cmp(&v[*b])).expect("classes");
                correct += usize::from(arg == s.label);
            }
            Ok(correct as f64 / data.len() as f64)
        };

        let mut order: Vec<usize> = Vec::new();
        let mut acc = 0.0;
        let mut steps = 0;
        while steps < config.max_steps {
            let mut tape = Tape::new();
            let mut total = None;
            for _ in 0..config.batch_size {
                if order.is_empty() {
                    order = (0..data.len()).collect();
                    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
                }
                let s = &data[order.pop().expect("refilled")];
                let logits = gap_logits(&mut tape, &store, &backbone, &head, &s.raster)?;
                let l = tape.cross_entropy(logits, &[s.label])?;
                total = Some(match total {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
            }
            let loss = tape.scale(total.expect("batch"), 1.0 / config.batch_size as f64)?;
            tape.backward(loss, &mut store)?;
            adamw_step_all(&mut store, &optim)?;
            store.zero_grads();
            steps += 1;
            if steps % config.check_every == 0 || steps == config.max_steps {
                acc = accuracy(&store)?;
                log::debug!("reference backbone step {steps}: train accuracy {acc:.3}");
                if acc >= config.target_accuracy {
                    break;
                }
            }
        }
        if acc < config.target_accuracy {
            return Err(EnsembleError::Undertrained {
                accuracy: acc,
                steps,
                target: config.target_accuracy,
            });
        }

        // Keep only the backbone, frozen.
        let mut frozen = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let backbone_only = Backbone::new(&mut frozen, "reference", &config.backbone, &mut rng)?;
        for (_, p) in frozen.clone().iter() {
            let src = store.by_name(p.name())?;
            let id = frozen.id(p.name()).expect("same names");
            frozen.set_values(id, src.values())?;
        }
        frozen.set_trainable_where(|_| false);
        Ok(Self {
            config,
            aux_classes: aux_classes.to_vec(),
            backbone: backbone_only,
            store: frozen,
            train_accuracy: acc,
            steps,
        })
    }

    pub fn config(&self) -> &ReferenceConfig {
        &self.config
    }

    pub fn aux_classes(&self) -> &[usize] {
        &self.aux_classes
    }

    pub fn train_accuracy(&self) -> f64 {
        self.train_accuracy
    }

    pub fn training_steps(&self) -> usize {
        self.steps
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Mutable access for update attempts; every parameter stays frozen.
    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Feature map used for ROI align, `[C, H, W]`.
    pub fn feature_map(&self, tape: &mut Tape, image: &Raster) -> Result<Var, EnsembleError> {
        let x = self.backbone.input(tape, image)?;
        let blocks = self.backbone.forward(tape, &self.store, x)?;
        Ok(blocks[self.config.feature_block])
    }

    /// Flattened ROI-aligned features of each box.
    pub fn embed(&self, image: &Raster, boxes: &[BoxCxcywh]) -> Result<Vec<Vec<f64>>, EnsembleError> {
        if boxes.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let map = self.feature_map(&mut tape, image)?;
        let y = roi_align(&mut tape, map, boxes, self.config.roi_size)?;
        let per = tape.values(y).len() / boxes.len();
        Ok(tape.values(y).chunks(per).map(<[f64]>::to_vec).collect())
    }

    /// Global-average-pooled final block output, for separation audits.
    pub fn global_feature(&self, image: &Raster) -> Result<Vec<f64>, EnsembleError> {
        let mut tape = Tape::new();
        let x = self.backbone.input(&mut tape, image)?;
        let blocks = self.backbone.forward(&mut tape, &self.store, x)?;
        let last = *blocks.last().expect("blocks");
        let s = tape.shape(last).to_vec();
        let flat = tape.reshape(last, &[s[0], s[1] * s[2]])?;
        let pooled = tape.mean_last(flat)?;
        Ok(tape.values(pooled).to_vec())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let m = Manifest {
            kind: KIND.to_string(),
            config: self.config.clone(),
            aux_classes: self.aux_classes.clone(),
            train_accuracy: self.train_accuracy,
            steps: self.steps,
        };
        Checkpoint::from_store(&self.store, serde_json::to_value(m).expect("manifest serializes"))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, EnsembleError> {
        let m: Manifest = serde_json::from_value(ck.manifest.clone())?;
        if m.kind != KIND {
            return Err(EnsembleError::Config(format!("checkpoint is a {:?}, not a reference backbone", m.kind)));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let backbone = Backbone::new(&mut store, "reference", &m.config.backbone, &mut rng)?;
        ck.load_into(&mut store)?;
        store.set_trainable_where(|_| false);
        Ok(Self {
            config: m.config,
            aux_classes: m.aux_classes,
            backbone,
            store,
            train_accuracy: m.train_accuracy,
            steps: m.steps,
        })
    }
}
