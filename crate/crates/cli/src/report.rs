//! Comparison table over run directories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mshift_core::eval::{load_report, EvalReport};

use crate::commands::EVALREPORT_FILE;
use crate::CliError;

/// Fixed CSV header of the comparison table. Standard deviations are sample
/// standard deviations (0 for a single run).
pub const CSV_HEADER: [&str; 8] = [
    "label",
    "runs",
    "accuracy_mean",
    "accuracy_std",
    "macro_f1_mean",
    "macro_f1_std",
    "confusion_gap_mean",
    "confusion_gap_std",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub runs: usize,
    pub accuracy: MeanStd,
    pub macro_f1: MeanStd,
    pub confusion_gap: MeanStd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    /// Ordered by label.
    pub rows: Vec<ReportRow>,
    /// Directories without a readable report.
    pub skipped: Vec<(PathBuf, String)>,
}

fn label_of(dir: &Path, r: &EvalReport) -> String {
    r.label.clone().unwrap_or_else(|| {
        dir.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string())
    })
}

pub fn collect(dirs: &[PathBuf]) -> Result<ReportTable, CliError> {
    let mut groups: BTreeMap<String, Vec<EvalReport>> = BTreeMap::new();
    let mut skipped = Vec::new();
    for dir in dirs {
        match load_report(dir.join(EVALREPORT_FILE)) {
            Ok(r) => groups.entry(label_of(dir, &r)).or_default().push(r),
            Err(e) => skipped.push((dir.clone(), e.to_string())),
        }
    }
    if groups.is_empty() {
        return Err(CliError::Runtime("no evalreport.json found in the given run directories".into()));
    }
    let rows = groups
        .into_iter()
        .map(|(label, rs)| {
            let col = |f: fn(&EvalReport) -> f64| MeanStd::of(&rs.iter().map(f).collect::<Vec<_>>());
            ReportRow {
                label,
                runs: rs.len(),
                accuracy: col(|r| r.target_accuracy),
                macro_f1: col(|r| r.target_macro_f1),
                confusion_gap: col(|r| r.confusion_gap),
            }
        })
        .collect();
    Ok(ReportTable { rows, skipped })
}

impl ReportTable {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![r.label.clone(), r.runs.to_string()];
            for m in [r.accuracy, r.macro_f1, r.confusion_gap] {
                rec.push(m.mean.to_string());
                rec.push(m.std.to_string());
            }
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[0.7]).std, 0.0);
    }

    #[test]
    fn csv_layout() {
        let t = ReportTable {
            rows: vec![ReportRow {
                label: "a,b".into(),
                runs: 1,
                accuracy: MeanStd { mean: 0.5, std: 0.0 },
                macro_f1: MeanStd { mean: 0.25, std: 0.0 },
                confusion_gap: MeanStd { mean: 0.1, std: 0.0 },
            }],
            skipped: Vec::new(),
        };
        let text = t.to_csv();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
        assert_eq!(lines.next().unwrap(), "\"a,b\",1,0.5,0,0.25,0,0.1,0");
    }
}
