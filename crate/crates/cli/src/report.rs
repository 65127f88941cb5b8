//! Comparison tables, curve CSVs and SVG charts from finished run
//! directories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use viewcon::eval::{compare_runs, shots_label, Comparison, RunSummary};
use viewcon::train::RunRecord;
use viewcon::{Error, Result};
use walkdir::WalkDir;

use crate::files::{read_json_file, write_json_file, write_text};
use crate::protocol::SUMMARY_FILE;
use crate::svg::{bar_chart, line_chart, Series};

const RECORD_FILE: &str = "run_record.json";

pub struct LoadedRecord {
    pub name: String,
    pub record: RunRecord,
}

/// Every `summary.json` and `run_record.json` under `dirs`, in a stable
/// order. Record names are paths relative to the directory they were found
/// under.
pub fn collect(dirs: &[PathBuf]) -> Result<(Vec<RunSummary>, Vec<LoadedRecord>)> {
    let mut summaries = Vec::new();
    let mut records = Vec::new();
    for root in dirs {
        if !root.is_dir() {
            return Err(Error::Argument(format!("run directory {} does not exist", root.display())));
        }
        let root_name = root
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| root.display().to_string());
        for entry in WalkDir::new(root).sort_by_file_name() {
            let entry = entry.map_err(|e| Error::Format(format!("walking {}: {e}", root.display())))?;
            let name = entry.file_name().to_string_lossy();
            if name == SUMMARY_FILE {
                summaries.push(read_json_file::<RunSummary>(entry.path())?);
            } else if name == RECORD_FILE {
                let parent = entry.path().parent().unwrap_or(root);
                let rel = parent.strip_prefix(root).unwrap_or(parent);
                let label = if rel.as_os_str().is_empty() {
                    root_name.clone()
                } else {
                    rel.to_string_lossy().replace('\\', "/")
                };
                records.push(LoadedRecord {
                    name: label,
                    record: read_json_file(entry.path())?,
                });
            }
        }
    }
    Ok((summaries, records))
}

fn shots_key(s: Option<usize>) -> (bool, usize) {
    (s.is_none(), s.unwrap_or(0))
}

#[derive(Serialize)]
struct ReportMeta<'a> {
    runs: Vec<&'a str>,
    reference: &'a str,
    delta_units: &'a str,
}

/// Files written by [`write_report`].
pub struct ReportFiles {
    pub files: Vec<PathBuf>,
}

pub fn write_report_from_dirs(dirs: &[PathBuf], out: &Path) -> Result<ReportFiles> {
    let (summaries, records) = collect(dirs)?;
    write_report(summaries, &records, out)
}

/// Runs are ordered by (method, shots, name) and compared against the first,
/// so baselines serve as the reference when present.
pub fn write_report(mut summaries: Vec<RunSummary>, records: &[LoadedRecord], out: &Path) -> Result<ReportFiles> {
    if summaries.is_empty() {
        return Err(Error::Argument("no runs found".into()));
    }
    summaries.sort_by(|a, b| {
        (&a.method, shots_key(a.shots), &a.name).cmp(&(&b.method, shots_key(b.shots), &b.name))
    });
    let cmp = compare_runs(&summaries)?;
    let mut files = Vec::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        let p = out.join(name);
        write_text(&p, &text)?;
        files.push(p);
        Ok(())
    };
    put("comparison.csv", cmp.table_csv())?;
    put("curves.csv", cmp.curves_csv())?;
    let meta = serde_json::to_string(&ReportMeta {
        runs: summaries.iter().map(|s| s.name.as_str()).collect(),
        reference: &cmp.reference,
        delta_units: "percentage points",
    })
    .map_err(|e| Error::Format(e.to_string()))?;

    let bars: Vec<(String, f64)> = cmp
        .curves
        .iter()
        .map(|p| (format!("{} k={}", p.method, shots_label(p.shots)), p.mean_macro_f1))
        .collect();
    put(
        "methods.svg",
        bar_chart("Mean macro F1 by method and shots", "macro F1", &bars, (0.0, 1.0), &meta),
    )?;
    put("f1_vs_shots.svg", shots_chart(&cmp, &meta))?;
    if let Some(svg) = loss_chart(records, &meta) {
        put("loss_curves.svg", svg)?;
    }
    if let Some(svg) = val_chart(records, &meta) {
        put("val_f1_curves.svg", svg)?;
    }
    let p = out.join("comparison.json");
    write_json_file(&p, &cmp)?;
    files.push(p);
    Ok(ReportFiles { files })
}

fn shots_chart(cmp: &Comparison, meta: &str) -> String {
    let mut shot_values: Vec<Option<usize>> = cmp.curves.iter().map(|p| p.shots).collect();
    shot_values.sort_by_key(|&s| shots_key(s));
    shot_values.dedup();
    let pos = |s: Option<usize>| shot_values.iter().position(|&v| v == s).unwrap_or(0) as f64;
    let mut by_method: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for p in &cmp.curves {
        by_method.entry(&p.method).or_default().push((pos(p.shots), p.mean_macro_f1));
    }
    let series: Vec<Series> = by_method
        .into_iter()
        .map(|(name, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series {
                name: name.to_string(),
                points,
            }
        })
        .collect();
    let ticks: Vec<(f64, String)> = shot_values.iter().map(|&s| (pos(s), shots_label(s))).collect();
    line_chart(
        "Macro F1 vs labelled examples per class",
        "shots per class",
        "mean macro F1 (held-out split)",
        &series,
        Some(&ticks),
        Some((0.0, 1.0)),
        meta,
    )
}

fn loss_chart(records: &[LoadedRecord], meta: &str) -> Option<String> {
    let series: Vec<Series> = records
        .iter()
        .filter(|r| r.record.kind == "pretrain")
        .map(|r| Series {
            name: r.name.clone(),
            points: r.record.loss.iter().enumerate().map(|(i, &l)| ((i + 1) as f64, l)).collect(),
        })
        .collect();
    (!series.is_empty()).then(|| line_chart("Pretraining loss", "epoch", "mean NT-Xent loss", &series, None, None, meta))
}

fn val_chart(records: &[LoadedRecord], meta: &str) -> Option<String> {
    let series: Vec<Series> = records
        .iter()
        .filter_map(|r| {
            let points: Vec<(f64, f64)> = r
                .record
                .val_macro_f1
                .iter()
                .enumerate()
                .filter_map(|(i, f)| f.map(|v| ((i + 1) as f64, v)))
                .collect();
            (!points.is_empty()).then(|| Series {
                name: r.name.clone(),
                points,
            })
        })
        .collect();
    (!series.is_empty()).then(|| {
        line_chart(
            "Validation macro F1 (held-out split)",
            "epoch",
            "macro F1",
            &series,
            None,
            Some((0.0, 1.0)),
            meta,
        )
    })
}
