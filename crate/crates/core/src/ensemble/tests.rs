use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::{adamw_step_all, OptimConfig, Tape};
use crate::synthdata::SceneInstance;

fn quick_config() -> ReferenceConfig {
    ReferenceConfig {
        images_per_class: 12,
        max_steps: 1500,
        check_every: 50,
        ..ReferenceConfig::default()
    }
}

const AUX: [usize; 4] = [12, 13, 14, 15];

fn shared_reference() -> &'static ReferenceBackbone {
    static R: OnceLock<ReferenceBackbone> = OnceLock::new();
    R.get_or_init(|| ReferenceBackbone::train(&AUX, &[0, 1, 2, 8], quick_config(), 3).unwrap())
}

fn det(class_id: usize, score: f64, x: f64) -> Detection {
    Detection {
        class_id,
        score,
        bbox: [x, 0.5, 0.3, 0.3],
    }
}

#[test]
fn overlapping_aux_classes_are_rejected() {
    let err = ReferenceBackbone::train(&[3, 12], &[0, 1, 2, 3], quick_config(), 0).unwrap_err();
    assert!(matches!(err, EnsembleError::ClassOverlap(v) if v == vec![3]));
}

#[test]
fn reference_reaches_target_and_stays_frozen() {
    let mut r = shared_reference().clone();
    assert!(r.train_accuracy() >= 0.9);
    let before = r.store().checksum();
    let img = aux_dataset(&AUX, 1, 32, 99).unwrap().remove(0).raster;
    for _ in 0..100 {
        let mut t = Tape::new();
        let m = r.feature_map(&mut t, &img).unwrap();
        let s = t.sum(m).unwrap();
        t.backward(s, r.store_mut()).unwrap();
        adamw_step_all(r.store_mut(), &OptimConfig::with_lr(0.1)).unwrap();
    }
    assert_eq!(r.store().checksum(), before);
    assert!(r.store().iter().all(|(_, p)| !p.trainable() && p.grad().is_none()));
}

#[test]
fn same_class_features_are_closer() {
    let r = shared_reference();
    let data = aux_dataset(&AUX, 6, 32, 1234).unwrap();
    let feats: Vec<(usize, Vec<f64>)> = data.iter().map(|s| (s.label, r.global_feature(&s.raster).unwrap())).collect();
    let (mut same, mut ns, mut cross, mut nc) = (0.0, 0, 0.0, 0);
    for i in 0..feats.len() {
        for j in i + 1..feats.len() {
            let c = cosine(&feats[i].1, &feats[j].1);
            if feats[i].0 == feats[j].0 {
                same += c;
                ns += 1;
            } else {
                cross += c;
                nc += 1;
            }
        }
    }
    assert!(same / ns as f64 > cross / nc as f64);
}

#[test]
fn checkpoint_round_trip() {
    let r = shared_reference();
    let back = ReferenceBackbone::from_checkpoint(&r.to_checkpoint()).unwrap();
    let img = aux_dataset(&AUX, 1, 32, 5).unwrap().remove(0).raster;
    let b = [[0.5, 0.5, 0.4, 0.3]];
    assert_eq!(back.embed(&img, &b).unwrap(), r.embed(&img, &b).unwrap());
}

#[test]
fn prototype_arithmetic() {
    let bank = PrototypeBank::from_features(&[(8, vec![1.0, 0.0]), (8, vec![0.0, 1.0])], "fp".into()).unwrap();
    assert_eq!(bank.get(8).unwrap(), &[0.5, 0.5]);
    let one = PrototypeBank::from_features(&[(9, vec![0.3, 0.7, 0.1])], "fp".into()).unwrap();
    assert_eq!(one.get(9).unwrap(), &[0.3, 0.7, 0.1]);
    assert!(matches!(bank.get(3), Err(EnsembleError::MissingPrototype(3))));
    assert!(matches!(
        PrototypeBank::from_features(&[(1, vec![0.0, 0.0])], String::new()),
        Err(EnsembleError::DegeneratePrototype(1))
    ));
}

#[test]
fn build_prototypes_matches_independent_mean() {
    let r = shared_reference();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for k in [1usize, 2, 3, 5, 10, 30] {
        // k single-instance images per class, rendered from aux data.
        let data = aux_dataset(&AUX[..2], k, 32, k as u64).unwrap();
        let images: Vec<SceneImage> = data
            .iter()
            .enumerate()
            .map(|(i, s)| SceneImage {
                image_id: i,
                raster: s.raster.clone(),
                instances: vec![SceneInstance {
                    class_id: 100 + s.label,
                    bbox: s.bbox,
                    rotation: rng.gen_range(-0.1..0.1),
                    intensity: 1.0,
                }],
            })
            .collect();
        let bank = build_prototypes(r, &images, &[100, 101], "fp".into()).unwrap();
        for c in [100usize, 101] {
            let mut acc: Vec<f64> = Vec::new();
            let mut n = 0;
            for im in images.iter().filter(|im| im.instances[0].class_id == c) {
                let f = r.embed(&im.raster, &[im.instances[0].bbox]).unwrap().remove(0);
                if acc.is_empty() {
                    acc = vec![0.0; f.len()];
                }
                for (a, v) in acc.iter_mut().zip(&f) {
                    *a += v;
                }
                n += 1;
            }
            assert_eq!(n, k);
            let proto = bank.get(c).unwrap();
            for (p, s) in proto.iter().zip(&acc) {
                assert!((p - s / k as f64).abs() <= 1e-12, "K={k}");
            }
        }
    }
    assert!(matches!(
        build_prototypes(r, &[], &[100], String::new()),
        Err(EnsembleError::EmptyClass(100))
    ));
}

#[test]
fn bank_json_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let bank = PrototypeBank::from_features(&[(8, vec![0.1, 0.2]), (9, vec![1.0 / 3.0, 2.0])], "abc".into()).unwrap();
    let p = dir.path().join("bank.json");
    bank.save(&p).unwrap();
    assert_eq!(PrototypeBank::load(&p).unwrap(), bank);
}

#[test]
fn cosine_examples() {
    assert!((cosine(&[0.3, 0.4], &[0.3, 0.4]) - 1.0).abs() < 1e-15);
    assert_eq!(cosine(&[1.0, 0.0], &[0.0, 2.0]), 0.0);
    assert!((cosine(&[3.0, 4.0], &[4.0, 3.0]) - 24.0 / 25.0).abs() < 1e-15);
    assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    let z = [0.2, -1.3, 0.7];
    let r = [1.1, 0.4, -0.2];
    for l in [1e-3, 0.5, 7.0, 1e4] {
        let zl: Vec<f64> = z.iter().map(|v| v * l).collect();
        assert!((cosine(&zl, &r) - cosine(&z, &r)).abs() <= 1e-12);
    }
}

#[test]
fn similarity_of_a_support_box_with_its_own_prototype() {
    let r = shared_reference();
    let s = &aux_dataset(&AUX[..1], 1, 32, 77).unwrap()[0];
    let f = r.embed(&s.raster, &[s.bbox]).unwrap().remove(0);
    let bank = PrototypeBank::from_features(&[(5, f)], String::new()).unwrap();
    let v = similarity_score(r, &s.raster, s.bbox, &bank, 5).unwrap();
    assert!((v - 1.0).abs() < 1e-12);
}

#[test]
fn ensemble_config_rules() {
    assert!(EnsembleConfig::new(0.5, 0.6).is_err());
    assert!(EnsembleConfig::new(1.2, -0.2).is_err());
    assert!(EnsembleConfig::new(0.3, 0.7).is_ok());
    let c: EnsembleConfig = serde_json::from_str(r#"{"alpha": 0.8}"#).unwrap();
    assert!((c.beta() - 0.2).abs() < 1e-15);
    assert!(serde_json::from_str::<EnsembleConfig>(r#"{"alpha": 0.8, "beta": 0.3}"#).is_err());
    assert_eq!(EnsembleConfig::default().alpha(), DEFAULT_ALPHA);
}

#[test]
fn ensemble_arithmetic_and_endpoints() {
    let half = EnsembleConfig::from_alpha(0.5).unwrap();
    assert!((ensemble_scores(0.8, 0.6, &half) - 0.7).abs() <= 1e-15);
    let one = EnsembleConfig::from_alpha(1.0).unwrap();
    assert_eq!(ensemble_scores(0.37, -0.9, &one), 0.37);
    let zero = EnsembleConfig::from_alpha(0.0).unwrap();
    assert_eq!(ensemble_scores(0.37, -0.25, &zero), -0.25);

    let dets = vec![det(8, 0.9, 0.2), det(9, 0.6, 0.4), det(8, 0.3, 0.6)];
    let sims = [0.1, 0.5, 0.9];
    assert_eq!(rescore_with(&dets, &sims, &one), dets);
    let by_sim = rescore_with(&dets, &sims, &zero);
    assert_eq!(by_sim.iter().map(|d| d.bbox[0]).collect::<Vec<_>>(), vec![0.6, 0.4, 0.2]);
}

#[test]
fn ensemble_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let cfg = EnsembleConfig::from_alpha(rng.gen_range(0.01..0.99)).unwrap();
        let (s, si) = (rng.gen_range(0.0..1.0), rng.gen_range(-1.0..1.0));
        let d: f64 = rng.gen_range(0.0..0.1);
        assert!(ensemble_scores(s + d, si, &cfg) >= ensemble_scores(s, si, &cfg));
        assert!(ensemble_scores(s, si + d, &cfg) >= ensemble_scores(s, si, &cfg));
    }
}
