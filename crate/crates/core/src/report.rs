//! Trial reports and their renderings: CSV rows, a text table with the best
//! row per method marked, precision/recall tradeoffs against a reference
//! trial, pooled confusion matrices and plain numeric plot data.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::ClassCounts;
use crate::eval::{Aggregate, ConfusionMatrix, FoldMetrics, MeanStd};

/// Class names in model order, as used in column headers.
pub const CLASS_NAMES: [&str; 3] = ["quadrotor", "fixed_wing", "hexarotor"];

/// Everything recorded about one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial_id: u32,
    pub method: String,
    pub parameters: String,
    pub aggregate: Aggregate,
    /// Sum of the per-fold confusion matrices.
    pub pooled: ConfusionMatrix,
    pub folds: Vec<FoldMetrics>,
    /// Training class counts of each fold after rebalancing.
    pub train_counts: Vec<ClassCounts>,
    pub n_instances: usize,
    pub n_excluded: usize,
}

/// One CSV row; all metric values are fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub trial_id: u32,
    pub method: String,
    pub parameters: String,
    pub precision: [MeanStd; 3],
    pub recall: [MeanStd; 3],
    pub f: [MeanStd; 3],
    pub macro_f: MeanStd,
}

impl From<&TrialReport> for CsvRow {
    fn from(r: &TrialReport) -> Self {
        CsvRow {
            trial_id: r.trial_id,
            method: r.method.clone(),
            parameters: r.parameters.clone(),
            precision: r.aggregate.precision,
            recall: r.aggregate.recall,
            f: r.aggregate.f,
            macro_f: r.aggregate.macro_f,
        }
    }
}

pub fn csv_header() -> Vec<String> {
    let mut h = vec!["trial_id".to_string(), "method".into(), "parameters".into()];
    for class in CLASS_NAMES {
        for metric in ["precision", "recall", "f"] {
            h.push(format!("{class}_{metric}_mean"));
            h.push(format!("{class}_{metric}_std"));
        }
    }
    h.push("macro_f_mean".into());
    h.push("macro_f_std".into());
    h
}

/// Renders report rows as CSV. Floats use the shortest representation
/// that parses back to the same value.
pub fn to_csv(reports: &[TrialReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(csv_header()).unwrap();
    for r in reports {
        let row = CsvRow::from(r);
        let mut rec = vec![row.trial_id.to_string(), row.method, row.parameters];
        for c in 0..3 {
            for ms in [row.precision[c], row.recall[c], row.f[c]] {
                rec.push(ms.mean.to_string());
                rec.push(ms.std.to_string());
            }
        }
        rec.push(row.macro_f.mean.to_string());
        rec.push(row.macro_f.std.to_string());
        w.write_record(&rec).unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed report row {row}: {reason}")]
    Malformed { row: usize, reason: String },
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>, ReportError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |reason: &str| ReportError::Malformed {
            row: i + 1,
            reason: reason.to_string(),
        };
        if rec.len() != csv_header().len() {
            return Err(bad("wrong column count"));
        }
        let num = |k: usize| rec[k].parse::<f64>().map_err(|_| bad(&format!("column {k} is not a number")));
        let ms = |k: usize| -> Result<MeanStd, ReportError> { Ok(MeanStd { mean: num(k)?, std: num(k + 1)? }) };
        let mut precision = [MeanStd::default(); 3];
        let mut recall = [MeanStd::default(); 3];
        let mut f = [MeanStd::default(); 3];
        for c in 0..3 {
            let base = 3 + c * 6;
            precision[c] = ms(base)?;
            recall[c] = ms(base + 2)?;
            f[c] = ms(base + 4)?;
        }
        rows.push(CsvRow {
            trial_id: rec[0].parse().map_err(|_| bad("trial_id"))?,
            method: rec[1].to_string(),
            parameters: rec[2].to_string(),
            precision,
            recall,
            f,
            macro_f: ms(21)?,
        });
    }
    Ok(rows)
}

fn pct(ms: MeanStd) -> String {
    format!("{:.2} ± {:.2}", ms.mean * 100.0, ms.std * 100.0)
}

/// Trial ids holding the highest macro F mean within each method; ties
/// keep the earliest trial.
pub fn best_per_method(reports: &[TrialReport]) -> Vec<u32> {
    let mut best: Vec<(&str, &TrialReport)> = Vec::new();
    for r in reports {
        match best.iter_mut().find(|(m, _)| *m == r.method) {
            Some(slot) if r.aggregate.macro_f.mean > slot.1.aggregate.macro_f.mean => slot.1 = r,
            Some(_) => {}
            None => best.push((&r.method, r)),
        }
    }
    best.into_iter().map(|(_, r)| r.trial_id).collect()
}

/// Fixed-width text table in percent; `*` marks each method's best row.
pub fn render_table(reports: &[TrialReport]) -> String {
    let best = best_per_method(reports);
    let mut header = vec!["".to_string(), "trial".into(), "method".into(), "parameters".into()];
    for class in CLASS_NAMES {
        for m in ["P", "R", "F"] {
            header.push(format!("{class} {m}"));
        }
    }
    header.push("macro F".into());
    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![
            if best.contains(&r.trial_id) { "*" } else { "" }.to_string(),
            r.trial_id.to_string(),
            r.method.clone(),
            r.parameters.clone(),
        ];
        for c in 0..3 {
            row.push(pct(r.aggregate.precision[c]));
            row.push(pct(r.aggregate.recall[c]));
            row.push(pct(r.aggregate.f[c]));
        }
        row.push(pct(r.aggregate.macro_f));
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|k| rows.iter().map(|r| r[k].chars().count()).max().unwrap())
        .collect();
    let mut out = String::new();
    for row in &rows {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, &w)| format!("{cell:<w$}"))
            .collect();
        writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
    }
    out
}

/// Change in mean precision and recall of each class, in percentage
/// points, going from `reference` to `other`.
pub fn tradeoff(reference: &TrialReport, other: &TrialReport) -> [(f64, f64); 3] {
    std::array::from_fn(|c| {
        (
            (other.aggregate.precision[c].mean - reference.aggregate.precision[c].mean) * 100.0,
            (other.aggregate.recall[c].mean - reference.aggregate.recall[c].mean) * 100.0,
        )
    })
}

/// Tradeoff of every other trial against `reference_id`, or a note when
/// there is nothing to compare.
pub fn render_tradeoff(reports: &[TrialReport], reference_id: u32) -> String {
    let Some(reference) = reports.iter().find(|r| r.trial_id == reference_id) else {
        return format!("reference trial {reference_id} not found; tradeoff omitted\n");
    };
    let others: Vec<&TrialReport> = reports.iter().filter(|r| r.trial_id != reference_id).collect();
    if others.is_empty() {
        return "only one trial; tradeoff omitted\n".to_string();
    }
    let mut out = format!("precision/recall change relative to trial {reference_id} (percentage points)\n");
    write!(out, "{:<6} {:<24} {:<10}", "trial", "method", "parameters").unwrap();
    for class in CLASS_NAMES {
        write!(out, " {:>12} {:>12}", format!("{class} dP"), format!("{class} dR")).unwrap();
    }
    out.push('\n');
    for r in others {
        write!(out, "{:<6} {:<24} {:<10}", r.trial_id, r.method, r.parameters).unwrap();
        for (dp, dr) in tradeoff(reference, r) {
            write!(out, " {dp:>+12.2} {dr:>+12.2}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// 3×3 CSV with true classes as rows.
pub fn confusion_csv(cm: &ConfusionMatrix) -> String {
    let mut out = format!("true\\predicted,{}\n", CLASS_NAMES.join(","));
    for (c, name) in CLASS_NAMES.iter().enumerate() {
        let cells: Vec<String> = cm.0[c].iter().map(|v| v.to_string()).collect();
        writeln!(out, "{name},{}", cells.join(",")).unwrap();
    }
    out
}

/// Whitespace-separated `trial macro_f_mean macro_f_std` lines.
pub fn macro_f_plot_data(reports: &[TrialReport]) -> String {
    let mut out = String::from("# trial macro_f_mean macro_f_std\n");
    for r in reports {
        writeln!(out, "{} {} {}", r.trial_id, r.aggregate.macro_f.mean, r.aggregate.macro_f.std).unwrap();
    }
    out
}

/// Whitespace-separated `true predicted count` lines.
pub fn heatmap_plot_data(cm: &ConfusionMatrix) -> String {
    let mut out = String::from("# true predicted count\n");
    for r in 0..3 {
        for c in 0..3 {
            writeln!(out, "{r} {c} {}", cm.0[r][c]).unwrap();
        }
    }
    out
}

/// Writes through a temporary file and a rename so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)
}

pub fn save_trial(report: &TrialReport, path: &Path) -> Result<(), ReportError> {
    let json = serde_json::to_string_pretty(report)?;
    write_atomic(path, json.as_bytes())?;
    Ok(())
}

pub fn load_trial(path: &Path) -> Result<TrialReport, ReportError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Trial reports found in `dir` (files named `trial_*.json`), sorted by
/// trial id.
pub fn load_trials(dir: &Path) -> Result<Vec<TrialReport>, ReportError> {
    let mut reports = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("trial_") && name.ends_with(".json") {
            reports.push(load_trial(&path)?);
        }
    }
    reports.sort_by_key(|r| r.trial_id);
    Ok(reports)
}

/// Writes the CSV, the text table, the tradeoff table and the plot data
/// for `reports` into `dir`.
pub fn write_report_files(reports: &[TrialReport], reference_id: u32, dir: &Path) -> Result<(), ReportError> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join("trials.csv"), to_csv(reports).as_bytes())?;
    write_atomic(&dir.join("trials.txt"), render_table(reports).as_bytes())?;
    write_atomic(&dir.join("tradeoff.txt"), render_tradeoff(reports, reference_id).as_bytes())?;
    write_atomic(&dir.join("macro_f.dat"), macro_f_plot_data(reports).as_bytes())?;
    for r in reports {
        write_atomic(
            &dir.join(format!("confusion_{}.csv", r.trial_id)),
            confusion_csv(&r.pooled).as_bytes(),
        )?;
        write_atomic(
            &dir.join(format!("heatmap_{}.dat", r.trial_id)),
            heatmap_plot_data(&r.pooled).as_bytes(),
        )?;
    }
    Ok(())
}
