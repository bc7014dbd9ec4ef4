//! Component ablation matrix: six toggle combinations, several seeds each.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::synth::Dataset;
use crate::train::{evaluate_counts, train};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub gndd: bool,
    pub dfc: bool,
    pub fdf: bool,
}

/// Row order: baseline, +DFC, +GNDD, +GNDD+FDF, +DFC+GNDD, full.
pub const ROWS: [(&str, Toggles); 6] = [
    (
        "baseline",
        Toggles {
            gndd: false,
            dfc: false,
            fdf: false,
        },
    ),
    (
        "+dfc",
        Toggles {
            gndd: false,
            dfc: true,
            fdf: false,
        },
    ),
    (
        "+gndd",
        Toggles {
            gndd: true,
            dfc: false,
            fdf: false,
        },
    ),
    (
        "+gndd+fdf",
        Toggles {
            gndd: true,
            dfc: false,
            fdf: true,
        },
    ),
    (
        "+dfc+gndd",
        Toggles {
            gndd: true,
            dfc: true,
            fdf: false,
        },
    ),
    (
        "full",
        Toggles {
            gndd: true,
            dfc: true,
            fdf: true,
        },
    ),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub fingerprint: String,
    pub metrics: MetricsReport,
    pub fp_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: usize,
    pub name: String,
    pub toggles: Toggles,
    pub runs: Vec<SeedResult>,
    pub mean_f1: f64,
    pub mean_fp_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

pub fn row_config(base: &ExperimentConfig, t: Toggles, seed: u64) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.gndd.enabled = t.gndd;
    cfg.dfc.enabled = t.dfc;
    cfg.fdf.enabled = t.fdf;
    cfg.seed = seed;
    cfg
}

pub fn ablate(base: &ExperimentConfig, train_set: &Dataset, test_set: &Dataset) -> Result<AblationReport> {
    ablate_with_progress(base, train_set, test_set, |_, _, _| {})
}

pub fn ablate_with_progress(
    base: &ExperimentConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    mut progress: impl FnMut(&str, u64, &SeedResult),
) -> Result<AblationReport> {
    let seeds = base.ablation.seeds.clone();
    if seeds.is_empty() {
        return Err(Error::Config("ablation.seeds is empty".into()));
    }
    let mut rows = Vec::with_capacity(ROWS.len());
    for (row, (name, toggles)) in ROWS.iter().enumerate() {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in &seeds {
            let cfg = row_config(base, *toggles, seed);
            let annotate = |e: Error| Error::Ablation {
                row: format!("{} ({name}), seed {seed}", row + 1),
                source: Box::new(e),
            };
            let (model, _) = train(&cfg, train_set, None).map_err(annotate)?;
            let (metrics, counts) = evaluate_counts(&model, test_set).map_err(annotate)?;
            let r = SeedResult {
                seed,
                fingerprint: cfg.fingerprint(),
                metrics,
                fp_rate: counts.false_positive_rate(),
            };
            progress(name, seed, &r);
            runs.push(r);
        }
        let k = runs.len() as f64;
        rows.push(AblationRow {
            row: row + 1,
            name: name.to_string(),
            toggles: *toggles,
            mean_f1: runs.iter().map(|r| r.metrics.f1).sum::<f64>() / k,
            mean_fp_rate: runs.iter().map(|r| r.fp_rate).sum::<f64>() / k,
            runs,
        });
    }
    Ok(AblationReport { seeds, rows })
}

/// `ablation.json`, per-run `ablation.csv` and per-row `ablation_plot.csv`.
pub fn write_report(report: &AblationReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join("ablation.json");
    std::fs::write(&json, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(&json, e))?;

    let mut w = csv::Writer::from_path(dir.join("ablation.csv"))?;
    w.write_record([
        "row",
        "name",
        "gndd",
        "dfc",
        "fdf",
        "seed",
        "fingerprint",
        "oa",
        "iou",
        "f1",
        "recall",
        "precision",
        "fp_rate",
    ])?;
    for r in &report.rows {
        for run in &r.runs {
            let m = &run.metrics;
            let mut rec = vec![
                r.row.to_string(),
                r.name.clone(),
                r.toggles.gndd.to_string(),
                r.toggles.dfc.to_string(),
                r.toggles.fdf.to_string(),
                run.seed.to_string(),
                run.fingerprint.clone(),
            ];
            rec.extend(m.csv_row());
            rec.push(format!("{:.6}", run.fp_rate));
            w.write_record(rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(dir, e))?;

    let mut p = csv::Writer::from_path(dir.join("ablation_plot.csv"))?;
    p.write_record(["row", "name", "mean_f1", "mean_fp_rate"])?;
    for r in &report.rows {
        p.write_record([
            r.row.to_string(),
            r.name.clone(),
            format!("{:.6}", r.mean_f1),
            format!("{:.6}", r.mean_fp_rate),
        ])?;
    }
    p.flush().map_err(|e| Error::io(dir, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_distinct_rows() {
        let mut seen: Vec<Toggles> = ROWS.iter().map(|r| r.1).collect();
        seen.dedup();
        assert_eq!(seen.len(), 6);
        assert_eq!(
            ROWS[0].1,
            Toggles {
                gndd: false,
                dfc: false,
                fdf: false
            }
        );
        assert_eq!(
            ROWS[5].1,
            Toggles {
                gndd: true,
                dfc: true,
                fdf: true
            }
        );
    }
}
