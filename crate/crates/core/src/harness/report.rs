//! Comparison tables over groups of runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

use super::config::TrainConfig;
use super::train::{MetricsRow, RunRecord};

/// Mean and range of one metric across seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(xs: &[f64]) -> Self {
        let mean = xs.iter().sum::<f64>() / xs.len().max(1) as f64;
        let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self { mean, min, max }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub name: String,
    pub seeds: usize,
    pub ap: Spread,
    pub ap50: Spread,
    /// Mean over epochs of the per-epoch instability.
    pub instability_online: Spread,
    pub instability_ema: Spread,
    pub final_consistency: Spread,
}

pub const SUMMARY_METRICS: [&str; 5] = ["ap", "ap50", "instability_online", "instability_ema", "final_consistency"];

fn mean(rows: &[MetricsRow], f: impl Fn(&MetricsRow) -> f64) -> f64 {
    rows.iter().map(f).sum::<f64>() / rows.len() as f64
}

pub fn summarize_rows(name: &str, runs: &[&[MetricsRow]]) -> Summary {
    let per = |f: &dyn Fn(&[MetricsRow]) -> f64| Spread::of(&runs.iter().map(|r| f(r)).collect::<Vec<_>>());
    Summary {
        name: name.to_string(),
        seeds: runs.len(),
        ap: per(&|r| r.last().map_or(0.0, |x| x.ap)),
        ap50: per(&|r| r.last().map_or(0.0, |x| x.ap50)),
        instability_online: per(&|r| mean(r, |x| x.instability_online)),
        instability_ema: per(&|r| mean(r, |x| x.instability_ema)),
        final_consistency: per(&|r| r.last().map_or(0.0, |x| x.consistency)),
    }
}

pub fn summarize(name: &str, records: &[RunRecord]) -> Summary {
    let rows: Vec<&[MetricsRow]> = records.iter().map(|r| r.rows.as_slice()).collect();
    summarize_rows(name, &rows)
}

/// Markdown table, one row per configuration, `mean ± half-range`.
pub fn comparison_table(summaries: &[Summary]) -> String {
    let mut out = String::from("| config | seeds | AP | AP50 | instability (online) | instability (EMA) | consistency |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    let cell = |s: Spread, scale: f64| format!("{:.2} ± {:.2}", s.mean * scale, (s.max - s.min) * scale / 2.0);
    for s in summaries {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} |",
            s.name,
            s.seeds,
            cell(s.ap, 100.0),
            cell(s.ap50, 100.0),
            cell(s.instability_online, 100.0),
            cell(s.instability_ema, 100.0),
            cell(s.final_consistency, 100.0)
        );
    }
    out
}

pub const METRICS_COLUMNS: [&str; 13] = [
    "epoch",
    "step",
    "loss_total",
    "loss_mqf",
    "loss_r",
    "loss_pd",
    "loss_aux",
    "instability_online",
    "instability_ema",
    "consistency",
    "ap50",
    "ap",
    "seed",
];

/// Long-format per-epoch CSV of every run, ready for plotting.
pub fn curves_csv(groups: &[(String, Vec<Vec<MetricsRow>>)]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(std::iter::once("config").chain(METRICS_COLUMNS))?;
    for (name, runs) in groups {
        for rows in runs {
            for row in rows {
                w.serialize((name, row))?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn find_runs(root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if root.join("metrics.csv").is_file() && root.join("config.toml").is_file() {
        out.push(root.to_path_buf());
        return Ok(());
    }
    if root.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(root)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            find_runs(&e, out)?;
        }
    }
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Groups every run directory under `root` by its configured name.
pub fn load_runs(root: &Path) -> Result<Vec<(String, Vec<Vec<MetricsRow>>)>> {
    let mut dirs = Vec::new();
    find_runs(root, &mut dirs)?;
    let mut groups: BTreeMap<String, Vec<Vec<MetricsRow>>> = BTreeMap::new();
    for d in dirs {
        let cfg = TrainConfig::load(&d.join("config.toml"))?;
        let label = d
            .parent()
            .and_then(|p| p.file_name())
            .filter(|_| d.file_name().is_some_and(|n| n.to_string_lossy().starts_with("seed")))
            .map(|p| p.to_string_lossy().to_string())
            .unwrap_or(cfg.run.name);
        groups.entry(label).or_default().push(read_metrics(&d.join("metrics.csv"))?);
    }
    Ok(groups.into_iter().collect())
}

/// Comparison table and curve CSV for every run under `root`.
pub fn report(root: &Path) -> Result<(String, String)> {
    let groups = load_runs(root)?;
    if groups.is_empty() {
        return Err(Error::Config(format!("no runs (metrics.csv + config.toml) under {}", root.display())));
    }
    let summaries: Vec<Summary> = groups
        .iter()
        .map(|(name, runs)| summarize_rows(name, &runs.iter().map(|r| r.as_slice()).collect::<Vec<_>>()))
        .collect();
    Ok((comparison_table(&summaries), curves_csv(&groups)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, ap: f64, inst: f64) -> MetricsRow {
        MetricsRow {
            epoch,
            step: epoch * 10,
            loss_total: 1.0,
            loss_mqf: 0.5,
            loss_r: 0.5,
            loss_pd: 0.0,
            loss_aux: 0.0,
            instability_online: inst,
            instability_ema: inst / 2.0,
            consistency: 0.5,
            ap50: ap * 1.5,
            ap,
            seed: 0,
        }
    }

    #[test]
    fn spread_and_summary() {
        let a = vec![row(0, 0.1, 0.4), row(1, 0.2, 0.2)];
        let b = vec![row(0, 0.1, 0.2), row(1, 0.4, 0.2)];
        let s = summarize_rows("x", &[&a, &b]);
        assert_eq!(s.seeds, 2);
        assert!((s.ap.mean - 0.3).abs() < 1e-12);
        assert_eq!((s.ap.min, s.ap.max), (0.2, 0.4));
        assert!((s.instability_online.mean - 0.25).abs() < 1e-12);
        let table = comparison_table(&[s]);
        assert!(table.contains("| x | 2 | 30.00 ± 10.00 |"));
    }

    #[test]
    fn report_reads_run_directories() {
        let dir = tempfile::tempdir().unwrap();
        for (cfg_name, seed) in [("a", 0), ("a", 1), ("b", 0)] {
            let d = dir.path().join(cfg_name).join(format!("seed{seed}"));
            std::fs::create_dir_all(&d).unwrap();
            std::fs::write(d.join("config.toml"), TrainConfig::default().to_toml()).unwrap();
            let mut w = csv::Writer::from_path(d.join("metrics.csv")).unwrap();
            w.serialize(row(0, 0.5, 0.1)).unwrap();
            w.flush().unwrap();
        }
        let (table, curves) = report(dir.path()).unwrap();
        assert!(table.contains("| a | 2 |"));
        assert!(table.contains("| b | 1 |"));
        assert_eq!(curves.lines().count(), 4);
        assert!(curves.starts_with("config,epoch,step,loss_total"));
        assert!(curves.lines().nth(1).unwrap().starts_with("a,0,0,1.0,"));
    }
}
