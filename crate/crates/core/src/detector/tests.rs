use proptest::prelude::*;

use super::*;
use crate::boxes::giou;
use crate::diffcore::{grad_check, DiffError, ParamGroup, ParamStore, Tape, Tensor};
use crate::synthdata::{Raster, SceneImage, SceneInstance};

fn diff(e: DetectorError) -> DiffError {
    match e {
        DetectorError::Diff(d) => d,
        other => DiffError::InvalidConfig(other.to_string()),
    }
}

fn small_config(stages: usize) -> DetectorConfig {
    let mut cfg = DetectorConfig::default();
    cfg.cascade.num_stages = stages;
    cfg
}

fn test_raster(seed: u64) -> Raster {
    let mut r = Raster::zeros(3, 32, 32);
    for (i, v) in r.data.iter_mut().enumerate() {
        *v = (((i as u64 * 2654435761 + seed) % 1000) as f32) / 1000.0;
    }
    r
}

#[test]
fn pyramid_shapes_and_zero_image() {
    let det = Detector::new(small_config(1), vec![0, 1], 3).unwrap();
    let mut t = Tape::new();
    let pyr = det.features(&mut t, &Raster::zeros(3, 32, 32)).unwrap();
    assert_eq!(t.shape(pyr[0]), &[32, 8, 8]);
    assert_eq!(t.shape(pyr[1]), &[32, 4, 4]);
    assert!(pyr.iter().all(|p| t.values(*p).iter().all(|v| v.is_finite())));
    assert_eq!(det.config().backbone.strides(), vec![4, 8]);
}

#[test]
fn features_are_deterministic() {
    let det = Detector::new(small_config(1), vec![0], 3).unwrap();
    let img = test_raster(1);
    let mut a = Tape::new();
    let mut b = Tape::new();
    let pa = det.features(&mut a, &img).unwrap();
    let pb = det.features(&mut b, &img).unwrap();
    for (x, y) in pa.iter().zip(&pb) {
        let xs: Vec<u64> = a.values(*x).iter().map(|v| v.to_bits()).collect();
        let ys: Vec<u64> = b.values(*y).iter().map(|v| v.to_bits()).collect();
        assert_eq!(xs, ys);
    }
}

#[test]
fn wrong_channel_count_is_rejected() {
    let det = Detector::new(small_config(1), vec![0], 3).unwrap();
    let mut t = Tape::new();
    let err = det.features(&mut t, &Raster::zeros(1, 32, 32)).unwrap_err();
    assert!(matches!(err, DetectorError::ChannelMismatch { expected: 3, got: 1 }));
}

#[test]
fn classifier_group_holds_one_weight_and_bias_per_stage() {
    let det = Detector::new(small_config(6), (0..8).collect(), 0).unwrap();
    let cls: Vec<_> = det
        .store()
        .iter()
        .filter(|(_, p)| p.group() == ParamGroup::Classifier)
        .map(|(_, p)| p.name().to_string())
        .collect();
    assert_eq!(cls.len(), 12);
    assert_eq!(cls.iter().filter(|n| n.ends_with(".weight")).count(), 6);
    assert_eq!(cls.iter().filter(|n| n.ends_with(".bias")).count(), 6);
    for (_, p) in det.store().iter() {
        if p.group() == ParamGroup::Classifier {
            assert_eq!(p.shape().last(), Some(&8));
        }
    }
}

#[test]
fn each_stage_pools_under_previous_boxes() {
    let det = Detector::new(small_config(6), vec![0, 1, 2], 5).unwrap();
    let mut t = Tape::new();
    let pass = det.forward(&mut t, &test_raster(2)).unwrap();
    assert_eq!(pass.stages.len(), 6);
    let z0 = det.store().get(det.proposal_params().0).values().to_vec();
    let b0: Vec<f64> = z0.iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect();
    let flat = |bs: &[[f64; 4]]| bs.iter().flatten().copied().collect::<Vec<_>>();
    let first = flat(&pass.stages[0].pooled_boxes);
    assert!(first.iter().zip(&b0).all(|(a, b)| (a - b).abs() < 1e-12));
    for w in pass.stages.windows(2) {
        assert_eq!(flat(&w[1].pooled_boxes), t.values(w[0].b));
    }
    for st in &pass.stages {
        assert_eq!(t.shape(st.c), &[20, 3]);
        assert!(t.values(st.b).iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn zero_delta_keeps_boxes() {
    let mut det = Detector::new(small_config(2), vec![0], 9).unwrap();
    let names: Vec<_> = det
        .store()
        .iter()
        .filter(|(_, p)| p.name().contains(".box_out."))
        .map(|(id, p)| (id, p.values().len()))
        .collect();
    for (id, n) in names {
        det.store_mut().set_values(id, &vec![0.0; n]).unwrap();
    }
    let mut t = Tape::new();
    let pass = det.forward(&mut t, &test_raster(3)).unwrap();
    let b0: Vec<f64> = pass.stages[0].pooled_boxes.iter().flatten().copied().collect();
    assert_eq!(t.values(pass.stages[0].b), b0.as_slice());
    assert_eq!(t.values(pass.stages[1].b), t.values(pass.stages[0].b));
}

#[test]
fn stage_index_out_of_range() {
    let det = Detector::new(small_config(3), vec![0], 0).unwrap();
    assert!(matches!(
        det.head_stage(3),
        Err(DetectorError::StageOutOfRange { index: 3, stages: 3 })
    ));
}

#[test]
fn detect_contract() {
    let mut det = Detector::new(small_config(2), vec![4, 7], 1).unwrap();
    let img = test_raster(4);
    let dets = det.detect(&img).unwrap();
    assert!(dets.len() <= 20 * 2);
    assert!(!dets.is_empty());
    for d in &dets {
        assert!([4, 7].contains(&d.class_id));
        assert!((0.0..=1.0).contains(&d.score) && d.score >= 0.01);
        assert!(d.bbox.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(d.bbox[2] > 0.0 && d.bbox[3] > 0.0);
    }
    assert!(dets.windows(2).all(|w| w[0].score >= w[1].score));
    assert!(det.detect_with_floor(&img, 1.0).unwrap().is_empty());
    det.reinit_classifiers(vec![9], 3).unwrap();
    assert!(det.detect(&img).unwrap().iter().all(|d| d.class_id == 9));
}

#[test]
fn reinit_only_touches_classifiers() {
    let mut det = Detector::new(small_config(3), (0..8).collect(), 2).unwrap();
    let not_cls = |p: &crate::diffcore::Param| p.group() != ParamGroup::Classifier;
    let before = det.store().checksum_where(not_cls);
    det.reinit_classifiers(vec![8, 9, 10, 11], 17).unwrap();
    assert_eq!(det.store().checksum_where(not_cls), before);
    let first = det.store().checksum_where(|p| !not_cls(p));
    det.reinit_classifiers(vec![8, 9, 10, 11], 17).unwrap();
    assert_eq!(det.store().checksum_where(|p| !not_cls(p)), first);
    let bound = 1.0 / 64f64.sqrt();
    let prior = det.config().prior_bias();
    for (_, p) in det.store().iter().filter(|(_, p)| p.group() == ParamGroup::Classifier) {
        if p.name().ends_with(".weight") {
            assert_eq!(p.shape(), &[64, 4]);
            assert!(p.values().iter().all(|v| v.abs() <= bound));
        } else {
            assert!(p.values().iter().all(|v| *v == prior));
        }
    }
    assert!(matches!(det.reinit_classifiers(vec![], 0), Err(DetectorError::Config(_))));
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let mut det = Detector::new(small_config(2), vec![3, 5], 11).unwrap();
    det.reinit_classifiers(vec![8, 9, 10], 1).unwrap();
    let ck = det.to_checkpoint();
    let back = Detector::from_checkpoint(&ck).unwrap();
    assert_eq!(back.label_map(), det.label_map());
    assert_eq!(back.store().checksum(), det.store().checksum());
    let img = test_raster(6);
    assert_eq!(back.detect(&img).unwrap(), det.detect(&img).unwrap());
}

#[test]
fn unknown_class_in_targets() {
    let det = Detector::new(small_config(1), vec![0, 1], 0).unwrap();
    let inst = SceneInstance {
        class_id: 5,
        bbox: [0.5, 0.5, 0.3, 0.3],
        rotation: 0.0,
        intensity: 1.0,
    };
    assert!(matches!(det.targets(&[inst]), Err(DetectorError::UnknownClass(5))));
}

fn fixed_stage(t: &mut Tape, logits: Vec<f64>, boxes: Vec<f64>, c: usize) -> StageOutput {
    let p = boxes.len() / 4;
    let cv = t.constant(Tensor::new(vec![p, c], logits).unwrap()).unwrap();
    let bv = t.constant(Tensor::new(vec![p, 4], boxes).unwrap()).unwrap();
    StageOutput {
        q: cv,
        u: cv,
        v: cv,
        z: bv,
        b: bv,
        c: cv,
        pooled_boxes: vec![],
    }
}

#[test]
fn empty_targets_give_closed_form_focal() {
    let cfg = LossConfig::default();
    let mut t = Tape::new();
    let st = fixed_stage(&mut t, vec![0.0; 3 * 2], vec![0.5; 12], 2);
    let l = set_loss(&mut t, &[st], &[], &cfg).unwrap();
    // At p = 1/2 every entry contributes (1 − α)·(1/2)^γ·ln 2.
    let per = (1.0 - 0.25) * 0.25 * 2f64.ln();
    let expected = cfg.lambda_cls * 6.0 * per;
    assert!((t.values(l)[0] - expected).abs() < 1e-12);
}

#[test]
fn perfect_prediction_loss_vanishes() {
    let cfg = LossConfig::default();
    let target = Target {
        class_index: 1,
        bbox: [0.4, 0.5, 0.2, 0.3],
    };
    let mut t = Tape::new();
    let logits = vec![-30.0, 30.0, -30.0, -30.0];
    let boxes = vec![0.4, 0.5, 0.2, 0.3, 0.8, 0.8, 0.1, 0.1];
    let st = fixed_stage(&mut t, logits, boxes, 2);
    let l = set_loss(&mut t, &[st], &[target], &cfg).unwrap();
    let v = t.values(l)[0];
    assert!((0.0..1e-9).contains(&v), "{v}");
}

#[test]
fn giou_loss_matches_scalar_formula() {
    let preds = [[0.3, 0.4, 0.2, 0.3], [0.7, 0.7, 0.1, 0.2], [0.5, 0.5, 0.4, 0.4]];
    let tgts = [[0.35, 0.42, 0.25, 0.2], [0.2, 0.2, 0.1, 0.1], [0.5, 0.5, 0.4, 0.4]];
    let mut t = Tape::new();
    let p = t
        .constant(Tensor::new(vec![3, 4], preds.iter().flatten().copied().collect()).unwrap())
        .unwrap();
    let l = giou_loss(&mut t, p, &tgts).unwrap();
    let expected: f64 = preds.iter().zip(&tgts).map(|(a, b)| 1.0 - giou(*a, *b)).sum();
    assert!((t.values(l)[0] - expected).abs() < 1e-12);
}

#[test]
fn set_loss_gradient_on_toy_instance() {
    let cfg = LossConfig::default();
    for seed in 0..5u64 {
        let mut store = ParamStore::new();
        let r = |i: u64| ((seed * 31 + i) as f64 * 0.7131).sin();
        let logits = store
            .add("c", Tensor::new(vec![2, 3], (0..6).map(r).collect()).unwrap(), ParamGroup::Classifier)
            .unwrap();
        let z = store
            .add("z", Tensor::new(vec![2, 4], (0..8).map(|i| 0.8 * r(10 + i)).collect()).unwrap(), ParamGroup::Other)
            .unwrap();
        let target = Target {
            class_index: 2,
            bbox: [0.45, 0.55, 0.4, 0.35],
        };
        let err = grad_check(&mut store, 1e-5, |t, s| {
            let c = t.param(s, logits)?;
            let zv = t.param(s, z)?;
            let b = t.sigmoid(zv)?;
            let st = StageOutput {
                q: c,
                u: c,
                v: c,
                z: zv,
                b,
                c,
                pooled_boxes: vec![],
            };
            set_loss(t, &[st.clone(), st], &[target], &cfg).map_err(diff)
        })
        .unwrap();
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn full_detector_loss_gradient_spot_check() {
    let mut cfg = small_config(2);
    cfg.cascade.num_proposals = 2;
    cfg.cascade.encoding_dim = 8;
    cfg.cascade.ffn_dim = 8;
    cfg.cascade.roi_output_size = 2;
    cfg.backbone.block_channel_widths = vec![4, 4, 4];
    cfg.backbone.neck_dim = 4;
    let det = Detector::new(cfg, vec![0, 1], 4).unwrap();
    let img = SceneImage {
        image_id: 0,
        raster: test_raster(7),
        instances: vec![SceneInstance {
            class_id: 1,
            bbox: [0.4, 0.6, 0.3, 0.25],
            rotation: 0.0,
            intensity: 1.0,
        }],
    };
    let mut store = det.store().clone();
    let report = crate::diffcore::grad_check_sampled(&mut store, 1e-5, Some(3), 9, |t, s| {
        let mut d = det.clone();
        *d.store_mut() = s.clone();
        d.image_loss(t, &img).map_err(diff)
    })
    .unwrap();
    assert!(report.max_relative_error <= 1e-4, "{report:?}");
}

fn brute_force(cost: &[Vec<f64>]) -> f64 {
    fn rec(cost: &[Vec<f64>], col: usize, used: &mut Vec<bool>) -> f64 {
        if col == cost[0].len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for r in 0..cost.len() {
            if !used[r] {
                used[r] = true;
                best = best.min(cost[r][col] + rec(cost, col + 1, used));
                used[r] = false;
            }
        }
        best
    }
    rec(cost, 0, &mut vec![false; cost.len()])
}

fn cost_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=6, 1usize..=6).prop_flat_map(|(a, b)| {
        let (p, g) = (a.max(b), a.min(b));
        prop::collection::vec(prop::collection::vec(0u32..1000, g), p)
            .prop_map(|m| m.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn hungarian_matches_brute_force(cost in cost_matrix()) {
        let asg = hungarian_match(&cost).unwrap();
        let direct: f64 = asg.pairs.iter().map(|(p, g)| cost[*p][*g]).sum();
        prop_assert_eq!(direct, asg.total_cost);
        prop_assert_eq!(asg.total_cost, brute_force(&cost));
        let mut preds: Vec<_> = asg.pairs.iter().map(|(p, _)| *p).collect();
        preds.sort();
        preds.dedup();
        prop_assert_eq!(preds.len(), cost[0].len());
    }
}

#[test]
fn cached_loss_equals_full_loss() {
    let det = Detector::new(small_config(3), vec![0, 1], 8).unwrap();
    let img = SceneImage {
        image_id: 0,
        raster: test_raster(5),
        instances: vec![SceneInstance {
            class_id: 0,
            bbox: [0.3, 0.6, 0.3, 0.25],
            rotation: 0.0,
            intensity: 1.0,
        }],
    };
    let mut a = Tape::new();
    let full = det.image_loss(&mut a, &img).unwrap();
    let cache = det.head_cache(&img.raster).unwrap();
    let mut b = Tape::new();
    let targets = det.targets(&img.instances).unwrap();
    let cached = det.cached_loss(&mut b, &cache, &targets).unwrap();
    assert_eq!(a.values(full)[0].to_bits(), b.values(cached)[0].to_bits());
}
