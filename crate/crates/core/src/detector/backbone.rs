use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamGroup, ParamStore, Tape, Var};
use crate::synthdata::Raster;

use super::layers::Conv;
use super::DetectorError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub block_channel_widths: Vec<usize>,
    pub pyramid_levels: usize,
    /// Channel width of every pyramid map after the neck.
    pub neck_dim: usize,
    pub in_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            block_channel_widths: vec![16, 32, 64],
            pyramid_levels: 2,
            neck_dim: 32,
            in_channels: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        if self.block_channel_widths.len() < 3 {
            return Err(DetectorError::Config("backbone needs at least 3 blocks".into()));
        }
        if self.pyramid_levels == 0 || self.pyramid_levels > self.block_channel_widths.len() {
            return Err(DetectorError::Config("pyramid_levels must be in 1..=blocks".into()));
        }
        if self.block_channel_widths.contains(&0) || self.neck_dim == 0 || self.in_channels == 0 {
            return Err(DetectorError::Config("channel widths must be positive".into()));
        }
        Ok(())
    }

    /// Output stride of each pyramid level, finest first.
    pub fn strides(&self) -> Vec<usize> {
        let n = self.block_channel_widths.len();
        (n - self.pyramid_levels..n).map(|b| 1 << (b + 1)).collect()
    }
}

/// Number of lowest blocks tagged `BACKBONE_BOTTOM`.
pub const BOTTOM_BLOCKS: usize = 2;

/// Stack of conv blocks; block `b` halves the resolution (3×3 stride-2 conv)
/// and refines it (3×3 stride-1 conv), both followed by ReLU.
#[derive(Clone, Debug)]
pub struct Backbone {
    blocks: Vec<[Conv; 2]>,
    in_channels: usize,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &BackboneConfig, rng: &mut impl Rng) -> Result<Self, DetectorError> {
        cfg.validate()?;
        let mut blocks = Vec::new();
        let mut in_ch = cfg.in_channels;
        for (b, &w) in cfg.block_channel_widths.iter().enumerate() {
            let group = if b < BOTTOM_BLOCKS { ParamGroup::BackboneBottom } else { ParamGroup::Other };
            let down = Conv::new(store, &format!("{prefix}.block{b}.conv0"), in_ch, w, 3, 2, group, rng)?;
            let refine = Conv::new(store, &format!("{prefix}.block{b}.conv1"), w, w, 3, 1, group, rng)?;
            blocks.push([down, refine]);
            in_ch = w;
        }
        Ok(Self {
            blocks,
            in_channels: cfg.in_channels,
        })
    }

    pub fn input(&self, tape: &mut Tape, image: &Raster) -> Result<Var, DetectorError> {
        if image.channels != self.in_channels {
            return Err(DetectorError::ChannelMismatch {
                expected: self.in_channels,
                got: image.channels,
            });
        }
        Ok(tape.constant(image.to_tensor())?)
    }

    /// Output of every block, lowest first.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Vec<Var>, DetectorError> {
        let mut outs = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for [down, refine] in &self.blocks {
            let a = down.forward(tape, store, h)?;
            let a = tape.relu(a)?;
            let r = refine.forward(tape, store, a)?;
            h = tape.relu(r)?;
            outs.push(h);
        }
        Ok(outs)
    }
}

/// Top-down feature pyramid: 1×1 laterals to `neck_dim`, coarser levels
/// upsampled and added into finer ones.
#[derive(Clone, Debug)]
pub struct Neck {
    laterals: Vec<Conv>,
    levels: usize,
}

impl Neck {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &BackboneConfig, rng: &mut impl Rng) -> Result<Self, DetectorError> {
        let n = cfg.block_channel_widths.len();
        let laterals = (n - cfg.pyramid_levels..n)
            .enumerate()
            .map(|(l, b)| {
                Conv::new(
                    store,
                    &format!("{prefix}.lateral{l}"),
                    cfg.block_channel_widths[b],
                    cfg.neck_dim,
                    1,
                    1,
                    ParamGroup::Other,
                    rng,
                )
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            laterals,
            levels: cfg.pyramid_levels,
        })
    }

    /// Pyramid maps, finest first.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, blocks: &[Var]) -> Result<Vec<Var>, DetectorError> {
        let feats = &blocks[blocks.len() - self.levels..];
        let mut out: Vec<Var> = Vec::with_capacity(self.levels);
        let mut above: Option<Var> = None;
        for l in (0..self.levels).rev() {
            let mut p = self.laterals[l].forward(tape, store, feats[l])?;
            if let Some(up) = above {
                let up = tape.upsample2x(up)?;
                p = tape.add(p, up)?;
            }
            above = Some(p);
            out.push(p);
        }
        out.reverse();
        Ok(out)
    }
}
