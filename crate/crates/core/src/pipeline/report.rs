use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::{EnsembleConfig, PrototypeBank};
use crate::eval;

use super::config::ExperimentConfig;
use super::layout::{Layout, Row, CHECKPOINT_FILE, ROWS};
use super::steps::{load_data, load_reference, load_report, load_row_detections, prepare, rescore_split, run_all, seeds, RunOptions};
use super::PipelineError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

impl MetricTriple {
    fn of(r: &eval::EvalReport) -> Self {
        Self { ap: r.ap, ap50: r.ap50, ap75: r.ap75 }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

fn median_triple(ts: &[MetricTriple]) -> MetricTriple {
    let col = |f: fn(&MetricTriple) -> f64| median(&mut ts.iter().map(f).collect::<Vec<_>>());
    MetricTriple {
        ap: col(|t| t.ap),
        ap50: col(|t| t.ap50),
        ap75: col(|t| t.ap75),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub three_stage: bool,
    pub rescored: bool,
    pub per_seed: BTreeMap<u64, MetricTriple>,
    pub median: MetricTriple,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationMatrix {
    pub k: usize,
    pub seeds: Vec<u64>,
    pub alpha: f64,
    pub rows: Vec<AblationRow>,
    /// SHA-256 of each seed's base checkpoint; every row starts from it.
    pub base_checkpoints: BTreeMap<u64, String>,
}

impl AblationMatrix {
    pub fn row(&self, row: Row) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == row.label())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,seed,AP,AP50,AP75\n");
        for r in &self.rows {
            for (seed, t) in &r.per_seed {
                let _ = writeln!(s, "{},{},{:.6},{:.6},{:.6}", r.label, seed, t.ap, t.ap50, t.ap75);
            }
            let m = r.median;
            let _ = writeln!(s, "{},median,{:.6},{:.6},{:.6}", r.label, m.ap, m.ap50, m.ap75);
        }
        s
    }
}

fn file_sha256(path: &std::path::Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path).map_err(PipelineError::io(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn collect_matrix(cfg: &ExperimentConfig, layout: &Layout, seeds: &[u64], k: usize) -> Result<AblationMatrix, PipelineError> {
    let mut rows = Vec::new();
    for row in ROWS {
        let mut per_seed = BTreeMap::new();
        for &s in seeds {
            per_seed.insert(s, MetricTriple::of(&load_report(layout, s, k, row)?));
        }
        let median = median_triple(&per_seed.values().copied().collect::<Vec<_>>());
        rows.push(AblationRow {
            label: row.label().to_string(),
            three_stage: row.three_stage(),
            rescored: row.rescored(),
            per_seed,
            median,
        });
    }
    let mut base_checkpoints = BTreeMap::new();
    for &s in seeds {
        base_checkpoints.insert(s, file_sha256(&layout.base_dir(s).join(CHECKPOINT_FILE))?);
    }
    Ok(AblationMatrix {
        k,
        seeds: seeds.to_vec(),
        alpha: cfg.ensemble.alpha(),
        rows,
        base_checkpoints,
    })
}

/// Runs every step at the ablation shot count for each seed and writes the
/// four-row matrix. With a validation seed configured, also writes the α sweep.
pub fn ablation_matrix(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<AblationMatrix, PipelineError> {
    let layout = prepare(cfg, opts, "ablate")?;
    let k = opts.k.unwrap_or(cfg.ablation_shots);
    let seeds = seeds(cfg, opts);
    for &s in &seeds {
        log::info!("ablation: seed {s}, K={k}");
        run_all(cfg, &layout, s, k, opts.force)?;
    }
    let m = collect_matrix(cfg, &layout, &seeds, k)?;
    super::steps::write_json(&layout.ablation_json(), &m)?;
    std::fs::write(layout.ablation_csv(), m.to_csv()).map_err(PipelineError::io(layout.ablation_csv()))?;
    if let Some(v) = cfg.validation_seed {
        alpha_sweep_in(cfg, &layout, v, k, opts.force)?;
    }
    Ok(m)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlphaSweep {
    pub seed: u64,
    pub k: usize,
    /// `(α, +ME AP, +PCF+ME AP)` per grid value.
    pub points: Vec<(f64, f64, f64)>,
}

impl AlphaSweep {
    /// Grid value with the highest +PCF+ME AP; earliest wins ties.
    pub fn best_alpha(&self) -> Option<f64> {
        self.points
            .iter()
            .fold(None::<(f64, f64)>, |best, &(a, _, ap)| match best {
                Some((_, b)) if b >= ap => best,
                _ => Some((a, ap)),
            })
            .map(|(a, _)| a)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,me_AP,pcf_me_AP\n");
        for (a, me, pm) in &self.points {
            let _ = writeln!(s, "{a},{me:.6},{pm:.6}");
        }
        s
    }
}

fn alpha_sweep_in(cfg: &ExperimentConfig, layout: &Layout, seed: u64, k: usize, force: bool) -> Result<AlphaSweep, PipelineError> {
    run_all(cfg, layout, seed, k, force)?;
    let bench = load_data(layout, seed)?;
    let reference = load_reference(layout, seed)?;
    let bank = PrototypeBank::load(&layout.prototypes(seed, k))?;
    let two = load_row_detections(layout, seed, k, Row::Baseline)?;
    let three = load_row_detections(layout, seed, k, Row::Pcf)?;
    let mut points = Vec::new();
    for &alpha in &cfg.alpha_grid {
        let ens = EnsembleConfig::from_alpha(alpha)?;
        let mut aps = [0.0; 2];
        for (slot, dets) in [&two, &three].into_iter().enumerate() {
            let r = rescore_split(&reference, &bank, &bench.test, dets, &ens)?;
            aps[slot] = eval::evaluate(&r, &bench.test, &cfg.eval)?.ap;
        }
        log::info!("alpha {alpha}: +ME {:.4}, +PCF+ME {:.4}", aps[0], aps[1]);
        points.push((alpha, aps[0], aps[1]));
    }
    let sweep = AlphaSweep { seed, k, points };
    std::fs::write(layout.alpha_sweep_csv(), sweep.to_csv()).map_err(PipelineError::io(layout.alpha_sweep_csv()))?;
    Ok(sweep)
}

/// α sweep on a held-out benchmark seed, never on the reported seeds.
pub fn alpha_sweep(cfg: &ExperimentConfig, seed: u64, opts: &RunOptions) -> Result<AlphaSweep, PipelineError> {
    let layout = prepare(cfg, opts, "alpha-sweep")?;
    alpha_sweep_in(cfg, &layout, seed, opts.k.unwrap_or(cfg.ablation_shots), opts.force)
}

fn numbered_dirs(dir: &std::path::Path, prefix: &str) -> Vec<u64> {
    let mut out: Vec<u64> = std::fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| e.file_name().to_str()?.strip_prefix(prefix)?.parse().ok())
        .collect();
    out.sort_unstable();
    out
}

/// Summarizes every evaluation found under the output directory into
/// `report.md` and `shot_curve.csv`. Re-running rewrites identical files.
pub fn report(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<std::path::PathBuf, PipelineError> {
    let layout = prepare(cfg, opts, "report")?;
    // (k, row) -> seed -> metrics
    let mut table: BTreeMap<(usize, usize), BTreeMap<u64, MetricTriple>> = BTreeMap::new();
    for seed in numbered_dirs(layout.root(), "seed-") {
        let wanted = match opts.seed {
            Some(s) => s == seed,
            None => cfg.validation_seed != Some(seed),
        };
        if !wanted {
            continue;
        }
        for k in numbered_dirs(&layout.seed_dir(seed), "k") {
            for (ri, row) in ROWS.iter().enumerate() {
                if let Ok(r) = load_report(&layout, seed, k as usize, *row) {
                    table.entry((k as usize, ri)).or_default().insert(seed, MetricTriple::of(&r));
                }
            }
        }
    }
    if table.is_empty() {
        return Err(PipelineError::Empty(layout.root().to_path_buf()));
    }

    let mut md = String::from("# Few-shot detection results\n\n");
    let _ = writeln!(md, "Config hash `{}`; ensemble α = {}.\n", cfg.hash(), cfg.ensemble.alpha());
    md.push_str("## Runs\n\n| row | K | seed | AP | AP50 | AP75 |\n|---|---|---|---|---|---|\n");
    for ((k, ri), per_seed) in &table {
        for (seed, t) in per_seed {
            let _ = writeln!(
                md,
                "| {} | {k} | {seed} | {:.4} | {:.4} | {:.4} |",
                ROWS[*ri].label(),
                t.ap,
                t.ap50,
                t.ap75
            );
        }
    }
    md.push_str("\n## Medians over seeds\n\n| row | K | seeds | AP | AP50 | AP75 |\n|---|---|---|---|---|---|\n");
    for ((k, ri), per_seed) in &table {
        let m = median_triple(&per_seed.values().copied().collect::<Vec<_>>());
        let _ = writeln!(
            md,
            "| {} | {k} | {} | {:.4} | {:.4} | {:.4} |",
            ROWS[*ri].label(),
            per_seed.len(),
            m.ap,
            m.ap50,
            m.ap75
        );
    }
    if let Ok(m) = super::steps::read_json::<AblationMatrix>(&layout.ablation_json()) {
        let _ = writeln!(md, "\n## Ablation at K={}\n", m.k);
        md.push_str("| row | median AP | per seed |\n|---|---|---|\n");
        for r in &m.rows {
            let seeds: Vec<String> = r.per_seed.iter().map(|(s, t)| format!("{s}: {:.4}", t.ap)).collect();
            let _ = writeln!(md, "| {} | {:.4} | {} |", r.label, r.median.ap, seeds.join(", "));
        }
    }
    if let Ok(text) = std::fs::read_to_string(layout.alpha_sweep_csv()) {
        md.push_str("\n## α sweep (validation seed)\n\n```\n");
        md.push_str(&text);
        md.push_str("```\n");
    }

    let mut csv = String::from("k");
    for row in ROWS {
        let _ = write!(csv, ",{}", row.dir_name());
    }
    csv.push_str(",seeds\n");
    let ks: Vec<usize> = table.keys().map(|(k, _)| *k).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    for k in ks {
        let _ = write!(csv, "{k}");
        let mut n = 0;
        for ri in 0..ROWS.len() {
            match table.get(&(k, ri)) {
                Some(per_seed) => {
                    n = n.max(per_seed.len());
                    let m = median_triple(&per_seed.values().copied().collect::<Vec<_>>());
                    let _ = write!(csv, ",{:.6}", m.ap);
                }
                None => csv.push(','),
            }
        }
        let _ = writeln!(csv, ",{n}");
    }

    let path = layout.report_md();
    std::fs::write(&path, md).map_err(PipelineError::io(&path))?;
    std::fs::write(layout.shot_curve_csv(), csv).map_err(PipelineError::io(layout.shot_curve_csv()))?;
    Ok(path)
}
