use fsod_core::pipeline::{
    self, ablation_matrix, build_prototypes, evaluate, gen_data, train_base, train_novel, train_pcf, ExperimentConfig,
    PipelineError, RunOptions, Row, Status,
};

fn smoke_in(dir: &std::path::Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::smoke();
    c.output_dir = dir.to_path_buf();
    c
}

fn missing_command(e: PipelineError) -> &'static str {
    match e {
        PipelineError::Missing { command, .. } => command,
        other => panic!("expected a missing-artifact error, got {other}"),
    }
}

#[test]
fn steps_run_in_order_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_in(tmp.path());
    let opts = RunOptions { k: Some(1), ..RunOptions::default() };

    assert_eq!(missing_command(train_base(&cfg, &opts).unwrap_err()), "gen-data");
    gen_data(&cfg, &opts).unwrap();
    assert_eq!(missing_command(train_pcf(&cfg, &opts).unwrap_err()), "train-base");
    train_base(&cfg, &opts).unwrap();
    assert_eq!(missing_command(train_novel(&cfg, &opts).unwrap_err()), "train-pcf");
    train_pcf(&cfg, &opts).unwrap();
    assert_eq!(missing_command(evaluate(&cfg, &opts).unwrap_err()), "train-novel");
    train_novel(&cfg, &opts).unwrap();
    assert_eq!(missing_command(evaluate(&cfg, &opts).unwrap_err()), "build-prototypes");
    build_prototypes(&cfg, &opts).unwrap();
    let out = evaluate(&cfg, &opts).unwrap();
    assert_eq!(out.len(), 4);
    assert!(out.iter().all(|o| o.status == Status::Created));

    // a second run reuses everything
    for step in [gen_data, train_base, train_pcf, train_novel, build_prototypes, evaluate] {
        assert!(step(&cfg, &opts).unwrap().iter().all(|o| o.status == Status::Skipped));
    }
    let forced = RunOptions { force: true, ..opts.clone() };
    assert!(train_base(&cfg, &forced).unwrap().iter().all(|o| o.status == Status::Created));

    let layout = pipeline::Layout::new(tmp.path());
    for row in pipeline::ROWS {
        assert!(layout.eval_dir(0, 1, row).join("report.json").exists(), "{row:?}");
    }

    let report = pipeline::report(&cfg, &RunOptions::default()).unwrap();
    let first = std::fs::read_to_string(&report).unwrap();
    let curve = std::fs::read_to_string(layout.shot_curve_csv()).unwrap();
    pipeline::report(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(std::fs::read_to_string(&report).unwrap(), first);
    assert_eq!(std::fs::read_to_string(layout.shot_curve_csv()).unwrap(), curve);
    assert_eq!(curve.lines().count(), 2);
    let runs = first.split("## Medians").next().unwrap();
    assert_eq!(runs.lines().filter(|l| l.starts_with("| +") || l.starts_with("| baseline")).count(), 4);

    // the standalone rescoring path reproduces the +ME row
    let plain = layout.eval_dir(0, 1, Row::Baseline).join("detections.jsonl");
    let out = tmp.path().join("rescored.jsonl");
    pipeline::rescore_file(&cfg, 0, &plain, &layout.prototypes(0, 1), &out).unwrap();
    let me = layout.eval_dir(0, 1, Row::Me).join("detections.jsonl");
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&me).unwrap());
}

#[test]
fn changed_config_is_refused_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_in(tmp.path());
    gen_data(&cfg, &RunOptions::default()).unwrap();
    let mut other = cfg.clone();
    other.seeds = vec![5];
    assert!(matches!(gen_data(&other, &RunOptions::default()), Err(PipelineError::ConfigChanged { .. })));
    let force = RunOptions { force: true, ..RunOptions::default() };
    gen_data(&other, &force).unwrap();
}

#[test]
fn report_on_empty_directory_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_in(tmp.path());
    assert!(matches!(pipeline::report(&cfg, &RunOptions::default()), Err(PipelineError::Empty(_))));
}

#[test]
fn unsupported_shot_count_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_in(tmp.path());
    let opts = RunOptions { k: Some(4), ..RunOptions::default() };
    assert!(matches!(gen_data(&cfg, &opts), Err(PipelineError::Config { .. })));
}

#[test]
fn ablation_rows_share_the_base_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = smoke_in(tmp.path());
    cfg.validation_seed = Some(9);
    cfg.alpha_grid = vec![0.5, 1.0];
    let m = ablation_matrix(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(m.k, cfg.ablation_shots);
    assert_eq!(m.rows.len(), 4);
    assert_eq!(m.base_checkpoints.len(), 1);
    for row in pipeline::ROWS {
        let r = m.row(row).unwrap();
        assert_eq!(r.per_seed.len(), 1);
        assert!((0.0..=1.0).contains(&r.median.ap));
    }
    let layout = pipeline::Layout::new(tmp.path());
    assert!(layout.ablation_csv().exists());
    let sweep = std::fs::read_to_string(layout.alpha_sweep_csv()).unwrap();
    assert_eq!(sweep.lines().count(), 3);
    // α = 1 leaves detections untouched, so the sweep reproduces the plain rows of the validation seed
    let last = sweep.lines().last().unwrap();
    let cols: Vec<f64> = last.split(',').map(|v| v.parse().unwrap()).collect();
    let base = layout.eval_dir(9, cfg.ablation_shots, Row::Baseline).join("report.json");
    let pcf = layout.eval_dir(9, cfg.ablation_shots, Row::Pcf).join("report.json");
    let ap = |p: std::path::PathBuf| fsod_core::eval::EvalReport::load_json(&p).unwrap().ap;
    assert!((cols[1] - ap(base)).abs() < 1e-6);
    assert!((cols[2] - ap(pcf)).abs() < 1e-6);
}
