//! Parameterized building blocks shared by the detector and the reference
//! backbone.

use rand::Rng;

use crate::diffcore::{ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};

use super::DetectorError;

pub(crate) fn uniform(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
}

/// `y = x · W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform init in `±1/√fan_in`, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Result<Self, DetectorError> {
        Self::with_bound(store, name, in_dim, out_dim, group, 1.0 / (in_dim as f64).sqrt(), rng)
    }

    pub fn with_bound(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        group: ParamGroup,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, DetectorError> {
        let w = Tensor::new(vec![in_dim, out_dim], uniform(rng, in_dim * out_dim, bound))?;
        let weight = store.add(format!("{name}.weight"), w, group)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), group)?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, DetectorError> {
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        let y = tape.matmul(x, w)?;
        Ok(tape.add_bcast(y, b)?)
    }
}

/// Layer norm over the last axis with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Result<Self, DetectorError> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0), group)?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), group)?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, DetectorError> {
        let n = tape.layer_norm(x, LAYER_NORM_EPS)?;
        let g = tape.param(store, self.gamma)?;
        let b = tape.param(store, self.beta)?;
        let y = tape.mul_bcast(n, g)?;
        Ok(tape.add_bcast(y, b)?)
    }
}

/// Square-kernel convolution with Kaiming-uniform init.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Result<Self, DetectorError> {
        let fan_in = in_ch * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = Tensor::new(vec![out_ch, in_ch, kernel, kernel], uniform(rng, out_ch * fan_in, bound))?;
        let weight = store.add(format!("{name}.weight"), w, group)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]), group)?;
        Ok(Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, DetectorError> {
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        Ok(tape.conv2d(x, w, b, self.stride, self.pad)?)
    }
}
