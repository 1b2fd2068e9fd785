use super::*;
use crate::detector::DetectorConfig;
use crate::synthdata::{gen_dataset, sample_kshot, Benchmark, BenchmarkConfig};

fn tiny_bench() -> Benchmark {
    let cfg = BenchmarkConfig {
        base_images: 6,
        novel_pool_images: 24,
        test_images: 4,
        ..BenchmarkConfig::default()
    };
    gen_dataset(&cfg, 5).unwrap()
}

fn model(stages: usize, labels: Vec<usize>) -> Detector {
    let mut cfg = DetectorConfig::default();
    cfg.cascade.num_stages = stages;
    Detector::new(cfg, labels, 1).unwrap()
}

fn quick(stage: StageKind, steps: usize) -> StagePlan {
    StagePlan {
        steps,
        early_stop: None,
        batch_size: 2,
        ..StagePlan::default_for(stage, 3)
    }
}

#[test]
fn partition_is_total_and_disjoint() {
    for n in [1, 3, 6] {
        let m = model(n, vec![0, 1]);
        let part = partition_params(&m).unwrap();
        assert_eq!(part.c_set.len(), 2 * n);
        assert_eq!(part.c_set.len() + part.e_set.len(), m.store().len());
        let mut all: Vec<_> = part.c_set.iter().chain(&part.e_set).cloned().collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), m.store().len());
    }
}

#[test]
fn stage_names_parse() {
    assert_eq!("pcf".parse::<StageKind>().unwrap(), StageKind::Pcf);
    assert_eq!("NOVEL".parse::<StageKind>().unwrap(), StageKind::Novel);
    assert!(matches!("warmup".parse::<StageKind>(), Err(ScheduleError::UnknownStage(_))));
}

#[test]
fn plan_validation() {
    let mut p = quick(StageKind::Pcf, 0);
    assert!(p.validate().is_err());
    p.steps = 5;
    p.dataset = DatasetRef::Base;
    assert!(p.validate().is_err());
    let d = StagePlan::default_for(StageKind::Pcf, 0);
    assert!(d.steps >= StagePlan::default_for(StageKind::Novel, 0).steps);
}

#[test]
fn early_stop_rule() {
    let es = EarlyStop {
        window: 2,
        min_delta: 0.1,
    };
    assert!(!es.should_stop(&[5.0, 4.0, 3.0]));
    assert!(!es.should_stop(&[5.0, 4.0, 3.0, 2.0]));
    assert!(es.should_stop(&[4.0, 4.0, 3.98, 3.98]));
}

#[test]
fn reinit_requires_a_class() {
    let mut m = model(1, vec![0]);
    assert!(reinit_classifiers(&mut m, vec![], 0).is_err());
}

#[test]
fn pcf_freezes_everything_but_classifiers() {
    let bench = tiny_bench();
    let support = sample_kshot(&bench.novel_pool, 2, 1).unwrap();
    let mut m = model(2, bench.base.class_ids.clone());
    reinit_classifiers(&mut m, bench.novel_pool.class_ids.clone(), 4).unwrap();
    let is_e = |p: &Param| p.group() != ParamGroup::Classifier;
    let e_before = m.store().checksum_where(is_e);
    let c_before = m.store().checksum_where(|p| !is_e(p));
    let (r, _) = run_stage(&mut m, &quick(StageKind::Pcf, 25), &support.split.images).unwrap();
    assert_eq!(r.losses.len(), 25);
    assert_eq!(m.store().checksum_where(is_e), e_before);
    assert_ne!(m.store().checksum_where(|p| !is_e(p)), c_before);
}

#[test]
fn novel_freezes_bottom_blocks_only() {
    let bench = tiny_bench();
    let support = sample_kshot(&bench.novel_pool, 1, 1).unwrap();
    let mut m = model(1, bench.novel_pool.class_ids.clone());
    let bottom = |p: &Param| p.group() == ParamGroup::BackboneBottom;
    let before: Vec<Vec<f64>> = m.store().iter().map(|(_, p)| p.values().to_vec()).collect();
    let b_sum = m.store().checksum_where(bottom);
    let (r, _) = run_stage(&mut m, &quick(StageKind::Novel, 3), &support.split.images).unwrap();
    assert_eq!(r.steps_run, 3);
    assert_eq!(m.store().checksum_where(bottom), b_sum);
    for ((_, p), old) in m.store().iter().zip(&before) {
        if !bottom(p) {
            assert_ne!(p.values(), old.as_slice(), "{} unchanged", p.name());
        }
    }
}

#[test]
fn procedures_chain_stages() {
    let bench = tiny_bench();
    let support = sample_kshot(&bench.novel_pool, 1, 2).unwrap();
    let novel = bench.novel_pool.class_ids.clone();
    let base = &bench.base.images;

    let plans2 = [quick(StageKind::Base, 1), quick(StageKind::Novel, 1)];
    let mut m = model(2, bench.base.class_ids.clone());
    let r2 = transfer_two_stage(&mut m, base, &support.split.images, &plans2, novel.clone(), 9).unwrap();
    assert_eq!(r2.checkpoints.len(), 2);
    assert_eq!(m.label_map(), novel.as_slice());

    let plans3 = [quick(StageKind::Base, 1), quick(StageKind::Pcf, 3), quick(StageKind::Novel, 1)];
    let mut m = model(2, bench.base.class_ids.clone());
    let r3 = transfer_three_stage(&mut m, base, &support.split.images, &plans3, novel.clone(), 9).unwrap();
    assert_eq!(r3.checkpoints.len(), 3);
    // E at NOVEL entry (PCF exit) equals E at BASE exit.
    let is_e = |p: &Param| p.group() != ParamGroup::Classifier;
    let base_e = r3.checkpoints[0].to_store().unwrap().checksum_where(is_e);
    let pcf_e = r3.checkpoints[1].to_store().unwrap().checksum_where(is_e);
    assert_eq!(base_e, pcf_e);

    let err = transfer_three_stage(&mut m, base, &support.split.images, &plans2, novel, 9).unwrap_err();
    assert!(matches!(err, ScheduleError::MissingStage { .. }));
}

#[test]
fn stages_are_deterministic() {
    let bench = tiny_bench();
    let run = || {
        let mut m = model(1, bench.base.class_ids.clone());
        run_stage(&mut m, &quick(StageKind::Base, 2), &bench.base.images).unwrap();
        m.store().checksum()
    };
    assert_eq!(run(), run());
}
