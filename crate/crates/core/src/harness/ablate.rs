//! Ablation driver: trains every requested init/regime cell with matched
//! seeds and budget, evaluates each run, and tabulates per-metric
//! mean +/- stddev across seeds.

use super::config::TrainConfig;
use super::eval::evaluate;
use super::train::train;
use crate::error::Result;
use crate::metrics::{MetricReport, METRIC_COLUMNS};
use crate::scenegen::SceneSample;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const ALL_CELLS: [&str; 6] = ["SA", "I-SA", "BO-SA", "QSA", "I-QSA", "BO-QSA"];

#[derive(Debug)]
pub struct CellOutcome {
    pub cell: String,
    /// one report per seed; empty when the cell failed
    pub reports: Vec<MetricReport>,
    pub checkpoints: Vec<PathBuf>,
    pub error: Option<String>,
}

impl CellOutcome {
    pub fn mean(&self, metric: &str) -> f64 {
        let vals: Vec<f64> = self.reports.iter().map(|r| r.mean(metric)).collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }

    pub fn stddev(&self, metric: &str) -> f64 {
        let vals: Vec<f64> = self.reports.iter().map(|r| r.mean(metric)).collect();
        if vals.len() < 2 {
            return 0.0;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (vals.len() - 1) as f64)
            .sqrt()
    }
}

pub struct AblationTable {
    pub cells: Vec<CellOutcome>,
    pub seeds: u64,
}

impl AblationTable {
    pub fn get(&self, cell: &str) -> Option<&CellOutcome> {
        self.cells.iter().find(|c| c.cell == cell)
    }

    /// Per-cell rows of mean +/- stddev across seeds.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cell");
        for m in METRIC_COLUMNS {
            out.push_str(&format!(",{m}_mean,{m}_std"));
        }
        out.push_str(",error\n");
        for c in &self.cells {
            out.push_str(&c.cell);
            for m in METRIC_COLUMNS {
                if c.reports.is_empty() {
                    out.push_str(",,");
                } else {
                    out.push_str(&format!(",{:.6},{:.6}", c.mean(m), c.stddev(m)));
                }
            }
            out.push(',');
            if let Some(e) = &c.error {
                out.push_str(&e.replace(',', ";"));
            }
            out.push('\n');
        }
        out
    }

    /// Human-readable comparison table.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<8} {:>18} {:>18} {:>18} {:>14}",
            "cell", "ARI-FG", "MSC-FG", "mIoU", "MSE(total)"
        );
        for c in &self.cells {
            if c.reports.is_empty() {
                let _ = writeln!(
                    s,
                    "{:<8} failed: {}",
                    c.cell,
                    c.error.as_deref().unwrap_or("unknown")
                );
                continue;
            }
            let _ = writeln!(
                s,
                "{:<8} {:>10.4} ±{:.4} {:>10.4} ±{:.4} {:>10.4} ±{:.4} {:>9.3} ±{:.3}",
                c.cell,
                c.mean("ari_fg"),
                c.stddev("ari_fg"),
                c.mean("msc_fg"),
                c.stddev("msc_fg"),
                c.mean("miou"),
                c.stddev("miou"),
                c.mean("mse_slate"),
                c.stddev("mse_slate"),
            );
        }
        s
    }
}

type JobResult = std::result::Result<(PathBuf, MetricReport), String>;

fn run_job(
    base: &TrainConfig,
    cell: &str,
    seed_offset: u64,
    train_data: &[SceneSample],
    eval_data: &[SceneSample],
    out_dir: &Path,
) -> JobResult {
    let mut cfg = base.clone();
    cfg.apply_kv("model.cell", cell).map_err(|e| e.to_string())?;
    cfg.seed = base.seed + seed_offset;
    let run_dir = out_dir.join(format!("{}_seed{}", cell.replace('-', "_"), cfg.seed));
    let run = || -> Result<(PathBuf, MetricReport)> {
        let out = train(&cfg, train_data, &run_dir)?;
        let report = evaluate(
            &out.model,
            eval_data,
            None,
            cfg.seed,
            &format!("{cell} seed {}", cfg.seed),
        )?;
        Ok((out.final_checkpoint, report))
    };
    run().map_err(|e| format!("seed {}: {e}", cfg.seed))
}

/// Runs `seeds` training runs per cell. Seed s of every cell uses the same
/// training seed (base + s) so comparisons are paired; failures are
/// recorded per cell without aborting the others. Each run is internally
/// single-threaded and deterministic, so `threads` only changes
/// scheduling, never results.
pub fn ablate(
    base: &TrainConfig,
    cells: &[&str],
    seeds: u64,
    threads: usize,
    train_data: &[SceneSample],
    eval_data: &[SceneSample],
    out_dir: &Path,
) -> Result<AblationTable> {
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| (0..seeds).map(move |s| (c, s)))
        .collect();
    let mut results: Vec<Option<JobResult>> = (0..jobs.len()).map(|_| None).collect();

    if threads <= 1 {
        for (slot, (c, s)) in jobs.iter().enumerate() {
            results[slot] = Some(run_job(base, cells[*c], *s, train_data, eval_data, out_dir));
        }
    } else {
        use std::sync::atomic::{AtomicUsize, Ordering};
        use std::sync::Mutex;
        let next = AtomicUsize::new(0);
        let shared: Vec<Mutex<Option<JobResult>>> =
            (0..jobs.len()).map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..threads.min(jobs.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= jobs.len() {
                        break;
                    }
                    let (c, s) = jobs[i];
                    let res = run_job(base, cells[c], s, train_data, eval_data, out_dir);
                    *shared[i].lock().unwrap() = Some(res);
                });
            }
        });
        for (slot, cell) in shared.into_iter().enumerate() {
            results[slot] = cell.into_inner().unwrap();
        }
    }

    let mut outcomes = Vec::new();
    for (c, cell) in cells.iter().enumerate() {
        let mut reports = Vec::new();
        let mut checkpoints = Vec::new();
        let mut error = None;
        for (slot, (jc, _)) in jobs.iter().enumerate() {
            if *jc != c {
                continue;
            }
            match results[slot].take().expect("every job ran") {
                Ok((ck, report)) => {
                    checkpoints.push(ck);
                    reports.push(report);
                }
                Err(e) => {
                    if error.is_none() {
                        error = Some(e);
                    }
                }
            }
        }
        outcomes.push(CellOutcome {
            cell: cell.to_string(),
            reports,
            checkpoints,
            error,
        });
    }
    let table = AblationTable {
        cells: outcomes,
        seeds,
    };
    std::fs::create_dir_all(out_dir).map_err(|e| crate::error::Error::io(out_dir, e))?;
    std::fs::write(out_dir.join("ablation.csv"), table.to_csv())
        .map_err(|e| crate::error::Error::io(out_dir.join("ablation.csv"), e))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate, SceneConfig};

    #[test]
    fn driver_matches_manual_train_plus_eval() {
        // one cell, one seed: the driver must add no hidden state
        let train_data = generate(&SceneConfig::sprites2(11), 48).unwrap();
        let eval_data = generate(&SceneConfig::sprites2(12), 8).unwrap();
        let mut base = TrainConfig::desk(3);
        base.max_steps = 10;
        base.warmup_steps = 2;
        base.seed = 5;

        let dir = std::env::temp_dir().join(format!("boqsa_abl_{}", std::process::id()));
        let table = ablate(&base, &["BO-QSA"], 1, 1, &train_data, &eval_data, &dir).unwrap();
        let driver_report = &table.get("BO-QSA").unwrap().reports[0];

        let mut manual_cfg = base.clone();
        manual_cfg.apply_kv("model.cell", "BO-QSA").unwrap();
        let manual_dir = dir.join("manual");
        let out = train(&manual_cfg, &train_data, &manual_dir).unwrap();
        let manual_report = evaluate(&out.model, &eval_data, None, 5, "manual").unwrap();

        for (a, b) in driver_report.rows.iter().zip(&manual_report.rows) {
            assert_eq!(a.ari_fg, b.ari_fg);
            assert_eq!(a.mse_per_pixel, b.mse_per_pixel);
        }
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn all_cells_emit_rows_and_failures_do_not_abort() {
        let train_data = generate(&SceneConfig::sprites2(13), 32).unwrap();
        let eval_data = generate(&SceneConfig::sprites2(14), 8).unwrap();
        let mut base = TrainConfig::desk(3);
        base.max_steps = 4;
        base.warmup_steps = 1;

        let dir = std::env::temp_dir().join(format!("boqsa_abl6_{}", std::process::id()));
        let table = ablate(
            &base,
            &["SA", "nonsense-cell", "BO-QSA"],
            1,
            2,
            &train_data,
            &eval_data,
            &dir,
        )
        .unwrap();
        assert_eq!(table.cells.len(), 3);
        assert!(table.get("SA").unwrap().error.is_none());
        assert!(table.get("nonsense-cell").unwrap().error.is_some());
        assert!(table.get("BO-QSA").unwrap().error.is_none());
        let csv = table.to_csv();
        assert_eq!(csv.lines().count(), 4);
        let _ = std::fs::remove_dir_all(&dir);
    }
}
