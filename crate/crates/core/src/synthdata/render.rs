use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::catalog::{ClassSpec, Texture};
use super::SynthError;
use crate::boxes::iou;
use crate::diffcore::Tensor;

/// Channel-major `C × H × W` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.channels, self.height, self.width],
            self.data.iter().map(|v| f64::from(*v)).collect(),
        )
        .expect("raster dimensions are positive")
    }
}

/// One annotated object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneInstance {
    pub class_id: usize,
    /// Normalized `[cx, cy, w, h]`.
    pub bbox: [f64; 4],
    pub rotation: f64,
    pub intensity: f64,
}

pub const BACKGROUND_AMPLITUDE: f64 = 0.1;
/// Fraction of the box half-extent the shape's local frame spans.
pub const SHAPE_SCALE: f64 = 0.9;
pub const MAX_PAIR_IOU: f64 = 0.1;
const SUPERSAMPLE: usize = 4;
const STRIPE_DIM: f64 = 0.35;
const STRIPE_FREQ: f64 = 1.5;

/// Local shape coordinates of a normalized image point.
pub(crate) fn local_coords(inst: &SceneInstance, x: f64, y: f64) -> (f64, f64) {
    let [cx, cy, w, h] = inst.bbox;
    let (dx, dy) = (x - cx, y - cy);
    let (s, c) = inst.rotation.sin_cos();
    let rx = dx * c + dy * s;
    let ry = -dx * s + dy * c;
    (rx / (SHAPE_SCALE * w / 2.0), ry / (SHAPE_SCALE * h / 2.0))
}

/// Shape intensity factor at a local point (0 outside).
pub(crate) fn shape_factor(spec: &ClassSpec, u: f64, v: f64) -> f64 {
    if !spec.kind.contains(u, v) {
        return 0.0;
    }
    match spec.texture {
        Texture::Solid => 1.0,
        Texture::Striped => {
            if ((u + v) * STRIPE_FREQ).floor().rem_euclid(2.0) == 0.0 {
                1.0
            } else {
                STRIPE_DIM
            }
        }
    }
}

pub(crate) fn validate_instances(instances: &[SceneInstance], image_size: usize) -> Result<(), SynthError> {
    let min_side = 4.0 / image_size as f64;
    for inst in instances {
        let [cx, cy, w, h] = inst.bbox;
        let inside = cx - w / 2.0 >= -1e-12 && cy - h / 2.0 >= -1e-12 && cx + w / 2.0 <= 1.0 + 1e-12 && cy + h / 2.0 <= 1.0 + 1e-12;
        if !inside || w < min_side - 1e-12 || h < min_side - 1e-12 {
            return Err(SynthError::InvalidInstance(format!("box {:?} violates bounds", inst.bbox)));
        }
    }
    for (i, a) in instances.iter().enumerate() {
        for b in &instances[i + 1..] {
            let o = iou(a.bbox, b.bbox);
            if o >= MAX_PAIR_IOU {
                return Err(SynthError::Overlap(o));
            }
        }
    }
    Ok(())
}

/// Renders instances over low-amplitude noise with supersampled edges.
pub fn render_image(
    instances: &[SceneInstance],
    classes: &[ClassSpec],
    image_size: usize,
    seed: u64,
) -> Result<Raster, SynthError> {
    validate_instances(instances, image_size)?;
    let specs: Vec<&ClassSpec> = instances
        .iter()
        .map(|inst| {
            classes
                .iter()
                .find(|c| c.id == inst.class_id)
                .ok_or(SynthError::UnknownClass(inst.class_id))
        })
        .collect::<Result<_, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = image_size;
    let mut img = Raster::zeros(3, n, n);
    for v in img.data.iter_mut() {
        *v = rng.gen_range(0.0..BACKGROUND_AMPLITUDE) as f32;
    }
    let inv = 1.0 / n as f64;
    let sub = 1.0 / SUPERSAMPLE as f64;
    for (inst, spec) in instances.iter().zip(&specs) {
        let rgb = spec.color.rgb();
        let [cx, cy, w, h] = inst.bbox;
        // Only pixels near the box can be touched.
        let reach = 0.75 * w.max(h);
        let x0 = (((cx - reach) * n as f64).floor().max(0.0)) as usize;
        let x1 = (((cx + reach) * n as f64).ceil() as usize).min(n);
        let y0 = (((cy - reach) * n as f64).floor().max(0.0)) as usize;
        let y1 = (((cy + reach) * n as f64).ceil() as usize).min(n);
        for py in y0..y1 {
            for px in x0..x1 {
                let mut acc = 0.0;
                let mut cover = 0.0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let x = (px as f64 + (sx as f64 + 0.5) * sub) * inv;
                        let y = (py as f64 + (sy as f64 + 0.5) * sub) * inv;
                        let (u, v) = local_coords(inst, x, y);
                        let f = shape_factor(spec, u, v);
                        if f > 0.0 {
                            acc += f;
                            cover += 1.0;
                        }
                    }
                }
                if cover == 0.0 {
                    continue;
                }
                let total = (SUPERSAMPLE * SUPERSAMPLE) as f64;
                let (coverage, mean_factor) = (cover / total, acc / cover);
                for (c, col) in rgb.iter().enumerate() {
                    let idx = (c * n + py) * n + px;
                    let bg = f64::from(img.data[idx]);
                    let fg = col * inst.intensity * mean_factor;
                    img.data[idx] = (bg + coverage * (fg - bg)).clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    Ok(img)
}

/// Fraction of an instance's supersampled shape coverage that falls inside
/// its annotation box.
pub fn shape_mass_inside_box(inst: &SceneInstance, spec: &ClassSpec, image_size: usize) -> f64 {
    let n = image_size * SUPERSAMPLE;
    let [cx, cy, w, h] = inst.bbox;
    let (mut inside, mut total) = (0.0, 0.0);
    for iy in 0..n {
        for ix in 0..n {
            let x = (ix as f64 + 0.5) / n as f64;
            let y = (iy as f64 + 0.5) / n as f64;
            let (u, v) = local_coords(inst, x, y);
            let f = shape_factor(spec, u, v);
            if f > 0.0 {
                total += f;
                if (x - cx).abs() <= w / 2.0 && (y - cy).abs() <= h / 2.0 {
                    inside += f;
                }
            }
        }
    }
    if total == 0.0 {
        0.0
    } else {
        inside / total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::catalog::class_spec;

    #[test]
    fn empty_scene_is_background_noise() {
        let img = render_image(&[], &[], 32, 5).unwrap();
        assert!(img.data.iter().all(|v| (0.0..=BACKGROUND_AMPLITUDE as f32).contains(v)));
    }

    #[test]
    fn centered_square_concentrates_mass() {
        let spec = class_spec(1).unwrap();
        let inst = SceneInstance {
            class_id: 1,
            bbox: [0.5, 0.5, 0.5, 0.5],
            rotation: 0.0,
            intensity: 1.0,
        };
        let img = render_image(&[inst], &[spec], 32, 9).unwrap();
        let (mut center, mut nc, mut outer, mut no) = (0.0, 0, 0.0, 0);
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let v = f64::from(img.at(c, y, x));
                    if (10..22).contains(&x) && (10..22).contains(&y) {
                        center += v;
                        nc += 1;
                    } else if !(6..26).contains(&x) || !(6..26).contains(&y) {
                        outer += v;
                        no += 1;
                    }
                }
            }
        }
        let (cm, om) = (center / nc as f64, outer / no as f64);
        assert!(cm >= 5.0 * om, "center mean {cm} vs background mean {om}");
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = class_spec(4).unwrap();
        let inst = SceneInstance {
            class_id: 4,
            bbox: [0.3, 0.6, 0.3, 0.35],
            rotation: 0.2,
            intensity: 0.8,
        };
        let a = render_image(&[inst.clone()], &[spec], 32, 1).unwrap();
        let b = render_image(&[inst], &[spec], 32, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overlap_is_rejected() {
        let spec = class_spec(0).unwrap();
        let a = SceneInstance {
            class_id: 0,
            bbox: [0.5, 0.5, 0.4, 0.4],
            rotation: 0.0,
            intensity: 1.0,
        };
        let mut b = a.clone();
        b.bbox[0] = 0.55;
        assert!(matches!(render_image(&[a, b], &[spec], 32, 0), Err(SynthError::Overlap(_))));
    }
}
