//! Box-conditioned feature extraction: max ROI pooling for the cascade and
//! bilinear ROI align for prototype features.

use crate::boxes::BoxCxcywh;
use crate::diffcore::{Tape, Var, Window};

use super::DetectorError;

/// Boxes at least this large (normalized area) pool from the coarsest level.
pub const COARSE_AREA_THRESHOLD: f64 = 0.25;
const EDGE_TOL: f64 = 1e-9;

pub fn pool_level(b: BoxCxcywh, levels: usize) -> usize {
    if levels > 1 && b[2] * b[3] >= COARSE_AREA_THRESHOLD {
        levels - 1
    } else {
        0
    }
}

/// Extent of a box along one axis in cell units, clamped to the map. Spans
/// narrower than one cell snap to the cell holding the clamped center.
pub fn cell_span(center: f64, len: f64, cells: usize) -> (f64, f64) {
    let n = cells as f64;
    let lo = ((center - len / 2.0) * n).clamp(0.0, n);
    let hi = ((center + len / 2.0) * n).clamp(0.0, n);
    if hi - lo >= 1.0 {
        return (lo, hi);
    }
    let cell = (center * n).clamp(0.0, n - 1.0).floor();
    (cell, cell + 1.0)
}

fn bin_cells(lo: f64, hi: f64, k: usize, bin: usize, cells: usize) -> (usize, usize) {
    let step = (hi - lo) / k as f64;
    let start = lo + bin as f64 * step;
    let end = lo + (bin + 1) as f64 * step;
    let a = ((start + EDGE_TOL).floor().max(0.0) as usize).min(cells - 1);
    let b = ((end - EDGE_TOL).ceil() as usize).clamp(a + 1, cells);
    (a, b)
}

/// The `k × k` pooling windows of a box on an `h × w` map, row-major.
pub fn pool_windows(b: BoxCxcywh, level: usize, h: usize, w: usize, k: usize) -> Vec<Window> {
    let (x_lo, x_hi) = cell_span(b[0], b[2], w);
    let (y_lo, y_hi) = cell_span(b[1], b[3], h);
    let mut out = Vec::with_capacity(k * k);
    for by in 0..k {
        let (y0, y1) = bin_cells(y_lo, y_hi, k, by, h);
        for bx in 0..k {
            let (x0, x1) = bin_cells(x_lo, x_hi, k, bx, w);
            out.push(Window { level, y0, y1, x0, x1 });
        }
    }
    out
}

/// Bin-center sample points (index coordinates, cell `j` centered at `j`).
pub fn align_points(b: BoxCxcywh, h: usize, w: usize, k: usize) -> Vec<(f64, f64)> {
    let (x_lo, x_hi) = cell_span(b[0], b[2], w);
    let (y_lo, y_hi) = cell_span(b[1], b[3], h);
    let (sx, sy) = ((x_hi - x_lo) / k as f64, (y_hi - y_lo) / k as f64);
    let mut pts = Vec::with_capacity(k * k);
    for by in 0..k {
        for bx in 0..k {
            let x = x_lo + (bx as f64 + 0.5) * sx - 0.5;
            let y = y_lo + (by as f64 + 0.5) * sy - 0.5;
            pts.push((x, y));
        }
    }
    pts
}

fn map_hw(tape: &Tape, map: Var) -> Result<(usize, usize), DetectorError> {
    let s = tape.shape(map);
    if s.len() != 3 {
        return Err(DetectorError::Config(format!("feature map must be [C, H, W], got {s:?}")));
    }
    Ok((s[1], s[2]))
}

/// Max ROI pooling over a pyramid; each box picks its level by area.
/// Output `[boxes, k·k, C]`.
pub fn roi_pool(tape: &mut Tape, pyramid: &[Var], boxes: &[BoxCxcywh], k: usize) -> Result<Var, DetectorError> {
    if k == 0 || boxes.is_empty() || pyramid.is_empty() {
        return Err(DetectorError::Config("roi_pool needs k ≥ 1, boxes and maps".into()));
    }
    let sizes = pyramid.iter().map(|m| map_hw(tape, *m)).collect::<Result<Vec<_>, _>>()?;
    let mut windows = Vec::with_capacity(boxes.len() * k * k);
    for b in boxes {
        let level = pool_level(*b, pyramid.len());
        let (h, w) = sizes[level];
        windows.extend(pool_windows(*b, level, h, w, k));
    }
    let flat = tape.window_max(pyramid, &windows)?;
    let c = tape.shape(flat)[1];
    Ok(tape.reshape(flat, &[boxes.len(), k * k, c])?)
}

/// Bilinear ROI align with one sample per bin center. Output `[boxes, k·k, C]`.
pub fn roi_align(tape: &mut Tape, map: Var, boxes: &[BoxCxcywh], k: usize) -> Result<Var, DetectorError> {
    if k == 0 || boxes.is_empty() {
        return Err(DetectorError::Config("roi_align needs k ≥ 1 and boxes".into()));
    }
    let (h, w) = map_hw(tape, map)?;
    let pts: Vec<(f64, f64)> = boxes.iter().flat_map(|b| align_points(*b, h, w, k)).collect();
    let flat = tape.bilinear_sample(map, &pts)?;
    let c = tape.shape(flat)[1];
    Ok(tape.reshape(flat, &[boxes.len(), k * k, c])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, ParamGroup, ParamStore, Tensor};

    fn map(tape: &mut Tape, c: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Var {
        let vals = (0..c * h * w).map(|i| f(i / (h * w), (i / w) % h, i % w)).collect();
        tape.constant(Tensor::new(vec![c, h, w], vals).unwrap()).unwrap()
    }

    #[test]
    fn constant_field_pools_to_constant() {
        let mut t = Tape::new();
        let m = map(&mut t, 2, 8, 8, |_, _, _| 3.25);
        let y = roi_pool(&mut t, &[m], &[[0.3, 0.6, 0.37, 0.2], [0.9, 0.1, 0.5, 0.5]], 3).unwrap();
        assert_eq!(t.shape(y), &[2, 9, 2]);
        assert!(t.values(y).iter().all(|v| *v == 3.25));
        let a = roi_align(&mut t, m, &[[0.3, 0.6, 0.37, 0.2]], 4).unwrap();
        assert!(t.values(a).iter().all(|v| (*v - 3.25).abs() < 1e-15));
    }

    #[test]
    fn full_box_k1_gives_map_maximum() {
        let mut t = Tape::new();
        let m = map(&mut t, 1, 2, 2, |_, y, x| [[0.1, 0.7], [-0.3, 0.2]][y][x]);
        let y = roi_pool(&mut t, &[m], &[[0.5, 0.5, 1.0, 1.0]], 1).unwrap();
        assert_eq!(t.values(y), &[0.7]);
    }

    #[test]
    fn sub_cell_box_snaps_to_its_cell() {
        let mut t = Tape::new();
        let m = map(&mut t, 1, 4, 4, |_, y, x| (y * 4 + x) as f64);
        // center (0.6, 0.3) → cell x=2, y=1 → value 6
        let y = roi_pool(&mut t, &[m], &[[0.6, 0.3, 0.05, 0.05]], 2).unwrap();
        assert_eq!(t.values(y), &[6.0; 4]);
    }

    #[test]
    fn large_boxes_use_coarse_level() {
        assert_eq!(pool_level([0.5, 0.5, 0.5, 0.5], 2), 1);
        assert_eq!(pool_level([0.5, 0.5, 0.49, 0.5], 2), 0);
        assert_eq!(pool_level([0.5, 0.5, 1.0, 1.0], 1), 0);
    }

    #[test]
    fn align_on_ramp_returns_bin_centres() {
        // Cell (i, j) holds the x-coordinate of its center, j + 0.5, in cell units.
        let mut t = Tape::new();
        let (h, w) = (6, 8);
        let m = map(&mut t, 1, h, w, |_, _, x| x as f64 + 0.5);
        let b = [0.45, 0.5, 0.5, 0.5];
        let k = 4;
        let y = roi_align(&mut t, m, &[b], k).unwrap();
        let x_lo = (b[0] - b[2] / 2.0) * w as f64;
        let step = b[2] * w as f64 / k as f64;
        for by in 0..k {
            for bx in 0..k {
                let expect = x_lo + (bx as f64 + 0.5) * step;
                let got = t.values(y)[by * k + bx];
                assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
            }
        }
    }

    #[test]
    fn align_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let vals: Vec<f64> = (0..2 * 5 * 5).map(|i| ((i * 37 % 11) as f64) / 7.0 - 0.6).collect();
        let id = store.add("fm", Tensor::new(vec![2, 5, 5], vals).unwrap(), ParamGroup::Other).unwrap();
        let boxes = [[0.41, 0.52, 0.63, 0.38], [0.2, 0.8, 0.3, 0.3]];
        let weights: Vec<f64> = (0..2 * 9 * 2).map(|i| (i as f64 * 0.37).sin()).collect();
        let err = grad_check(&mut store, 1e-5, |t, s| {
            let m = t.param(s, id)?;
            let y = roi_align(t, m, &boxes, 3).map_err(|e| match e {
                DetectorError::Diff(d) => d,
                other => panic!("{other}"),
            })?;
            let w = t.constant(Tensor::new(vec![2, 9, 2], weights.clone())?)?;
            let p = t.mul(y, w)?;
            t.sum(p)
        })
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
