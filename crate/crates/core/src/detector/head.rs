use rand::Rng;

use crate::boxes::BoxCxcywh;
use crate::diffcore::{ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};

use super::layers::{uniform, LayerNorm, Linear};
use super::roi::roi_pool;
use super::DetectorError;

/// Init bound of the box regressor, kept small so fresh stages barely move
/// the boxes.
const BOX_INIT_BOUND: f64 = 1e-3;

/// Outputs of one cascade stage. Box logits `z` satisfy `b = sigmoid(z)`.
#[derive(Clone, Debug)]
pub struct StageOutput {
    pub q: Var,
    pub u: Var,
    pub v: Var,
    pub z: Var,
    pub b: Var,
    pub c: Var,
    /// Boxes from the previous stage that this stage pooled under.
    pub pooled_boxes: Vec<BoxCxcywh>,
}

/// Two linear layers with ReLU after each.
#[derive(Clone, Debug)]
struct Decoder {
    l0: Linear,
    l1: Linear,
}

impl Decoder {
    fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Result<Self, DetectorError> {
        Ok(Self {
            l0: Linear::new(store, &format!("{name}.0"), dim, dim, ParamGroup::Other, rng)?,
            l1: Linear::new(store, &format!("{name}.1"), dim, dim, ParamGroup::Other, rng)?,
        })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, DetectorError> {
        let h = self.l0.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        let h = self.l1.forward(tape, store, h)?;
        Ok(tape.relu(h)?)
    }
}

/// One refinement stage: attention of proposal encodings over pooled ROI
/// cells, feed-forward update, box/class decoders and the linear regressor
/// and classifier.
#[derive(Clone, Debug)]
pub struct HeadStage {
    index: usize,
    cell_proj: Linear,
    pos: ParamId,
    query: Linear,
    attn_out: Linear,
    norm1: LayerNorm,
    ffn0: Linear,
    ffn1: Linear,
    norm2: LayerNorm,
    box_dec: Decoder,
    cls_dec: Decoder,
    box_out: Linear,
    cls: Linear,
}

impl HeadStage {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        index: usize,
        feat_dim: usize,
        dim: usize,
        ffn_dim: usize,
        cells: usize,
        num_classes: usize,
        prior_bias: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, DetectorError> {
        let p = format!("head{index}");
        let other = ParamGroup::Other;
        let cell_proj = Linear::new(store, &format!("{p}.cell_proj"), feat_dim, dim, other, rng)?;
        let pos_t = Tensor::new(vec![cells, dim], uniform(rng, cells * dim, 0.1))?;
        let pos = store.add(format!("{p}.pos_embed"), pos_t, other)?;
        let query = Linear::new(store, &format!("{p}.query"), dim, dim, other, rng)?;
        let attn_out = Linear::new(store, &format!("{p}.attn_out"), dim, dim, other, rng)?;
        let norm1 = LayerNorm::new(store, &format!("{p}.norm1"), dim, other)?;
        let ffn0 = Linear::new(store, &format!("{p}.ffn.0"), dim, ffn_dim, other, rng)?;
        let ffn1 = Linear::new(store, &format!("{p}.ffn.1"), ffn_dim, dim, other, rng)?;
        let norm2 = LayerNorm::new(store, &format!("{p}.norm2"), dim, other)?;
        let box_dec = Decoder::new(store, &format!("{p}.box_decoder"), dim, rng)?;
        let cls_dec = Decoder::new(store, &format!("{p}.cls_decoder"), dim, rng)?;
        let box_out = Linear::with_bound(store, &format!("{p}.box_out"), dim, 4, other, BOX_INIT_BOUND, rng)?;
        let cls = Linear::new(store, &format!("{p}.cls"), dim, num_classes, ParamGroup::Classifier, rng)?;
        store.set_values(cls.bias, &vec![prior_bias; num_classes])?;
        Ok(Self {
            index,
            cell_proj,
            pos,
            query,
            attn_out,
            norm1,
            ffn0,
            ffn1,
            norm2,
            box_dec,
            cls_dec,
            box_out,
            cls,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn classifier(&self) -> &Linear {
        &self.cls
    }

    /// Replaces the classifier with a fresh `num_classes`-way layer: weights
    /// uniform in `±1/√fan_in`, biases at `prior_bias`.
    pub fn reinit_classifier(
        &mut self,
        store: &mut ParamStore,
        num_classes: usize,
        prior_bias: f64,
        rng: &mut impl Rng,
    ) -> Result<(), DetectorError> {
        let fan_in = self.cls.in_dim;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::new(vec![fan_in, num_classes], uniform(rng, fan_in * num_classes, bound))?;
        store.replace(self.cls.weight, w);
        store.replace(self.cls.bias, Tensor::full(&[num_classes], prior_bias));
        self.cls.out_dim = num_classes;
        Ok(())
    }

    /// `q_prev` is `[P, D]`, `z_prev` the `[P, 4]` box logits of the previous
    /// stage.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pyramid: &[Var],
        q_prev: Var,
        z_prev: Var,
        k: usize,
        detach_boxes: bool,
    ) -> Result<StageOutput, DetectorError> {
        let (p, d) = {
            let s = tape.shape(q_prev);
            (s[0], s[1])
        };
        let b_prev = tape.sigmoid(z_prev)?;
        let pooled_boxes: Vec<BoxCxcywh> =
            tape.values(b_prev).chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();

        let x = roi_pool(tape, pyramid, &pooled_boxes, k)?;
        let c_in = tape.shape(x)[2];
        let cells = k * k;
        let x = tape.reshape(x, &[p * cells, c_in])?;
        let f = self.cell_proj.forward(tape, store, x)?;
        let f = tape.reshape(f, &[p, cells, d])?;
        let pos = tape.param(store, self.pos)?;
        let f = tape.add_bcast(f, pos)?;

        let qh = self.query.forward(tape, store, q_prev)?;
        let qh = tape.reshape(qh, &[p, 1, d])?;
        let att = tape.attention(qh, f, f)?;
        let att = tape.reshape(att, &[p, d])?;
        let att = self.attn_out.forward(tape, store, att)?;
        let h = tape.add(q_prev, att)?;
        let h = self.norm1.forward(tape, store, h)?;
        let ff = self.ffn0.forward(tape, store, h)?;
        let ff = tape.relu(ff)?;
        let ff = self.ffn1.forward(tape, store, ff)?;
        let h = tape.add(h, ff)?;
        let q = self.norm2.forward(tape, store, h)?;

        let u = self.box_dec.forward(tape, store, q)?;
        let v = self.cls_dec.forward(tape, store, q)?;
        let delta = self.box_out.forward(tape, store, u)?;
        let base = if detach_boxes { tape.detach(z_prev)? } else { z_prev };
        let z = tape.add(base, delta)?;
        let b = tape.sigmoid(z)?;
        let c = self.cls.forward(tape, store, v)?;
        Ok(StageOutput {
            q,
            u,
            v,
            z,
            b,
            c,
            pooled_boxes,
        })
    }
}
