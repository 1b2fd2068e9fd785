//! Box geometry on normalized `[cx, cy, w, h]` and corner `[x1, y1, x2, y2]` boxes.

pub type BoxCxcywh = [f64; 4];
pub type BoxXyxy = [f64; 4];

pub fn cxcywh_to_xyxy(b: BoxCxcywh) -> BoxXyxy {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0]
}

pub fn xyxy_to_cxcywh(b: BoxXyxy) -> BoxCxcywh {
    [(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0, b[2] - b[0], b[3] - b[1]]
}

fn area(b: BoxXyxy) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

fn intersection(a: BoxXyxy, b: BoxXyxy) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    w * h
}

/// Intersection over union; 0 when the union has no area.
pub fn iou_xyxy(a: BoxXyxy, b: BoxXyxy) -> f64 {
    let inter = intersection(a, b);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU − (hull − union) / hull`. A zero-area box counts as a
/// point with IoU 0.
pub fn giou_xyxy(a: BoxXyxy, b: BoxXyxy) -> f64 {
    let (aa, ab) = (area(a), area(b));
    let inter = intersection(a, b);
    let union = aa + ab - inter;
    let iou = if aa <= 0.0 || ab <= 0.0 || union <= 0.0 { 0.0 } else { inter / union };
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    if hull <= 0.0 {
        return iou;
    }
    iou - (hull - union) / hull
}

pub fn iou(a: BoxCxcywh, b: BoxCxcywh) -> f64 {
    iou_xyxy(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b))
}

pub fn giou(a: BoxCxcywh, b: BoxCxcywh) -> f64 {
    giou_xyxy(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlapping_squares() {
        let (a, b) = ([0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 3.0, 3.0]);
        assert!((iou_xyxy(a, b) - 1.0 / 7.0).abs() < 1e-15);
        assert!((giou_xyxy(a, b) - (1.0 / 7.0 - 2.0 / 9.0)).abs() < 1e-15);
    }

    #[test]
    fn identical_and_disjoint() {
        let a = [0.2, 0.3, 0.5, 0.9];
        assert_eq!(iou_xyxy(a, a), 1.0);
        assert_eq!(giou_xyxy(a, a), 1.0);
        let (u, v) = ([0.0, 0.0, 1.0, 1.0], [3.0, 0.0, 4.0, 1.0]);
        assert_eq!(iou_xyxy(u, v), 0.0);
        // hull 4, union 2 → −0.5
        assert!((giou_xyxy(u, v) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn degenerate_box_is_a_point() {
        let p = [0.5, 0.5, 0.5, 0.5];
        let b = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(iou_xyxy(p, b), 0.0);
        assert!(giou_xyxy(p, b) <= 0.0);
        assert_eq!(iou_xyxy(p, p), 0.0);
    }

    #[test]
    fn conversions_invert() {
        let b = [0.4, 0.6, 0.2, 0.3];
        let back = xyxy_to_cxcywh(cxcywh_to_xyxy(b));
        for i in 0..4 {
            assert!((b[i] - back[i]).abs() < 1e-15);
        }
    }
}
