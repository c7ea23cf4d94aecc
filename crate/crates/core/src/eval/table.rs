//! Per-fold result tables in machine-readable and rendered text form.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{Level, MetricReport, ModelTag};
use super::Provenance;

pub const METRIC_NAMES: [&str; 3] = ["Accuracy", "F1", "AUROC"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    /// Grouped by metric (accuracy, F1, AUROC), each group holding baseline,
    /// teacher and student. `None` where AUROC was undefined for every seed.
    pub cells: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvTable {
    pub level: Level,
    /// One row per fold followed by the average row.
    pub rows: Vec<TableRow>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn cells_of(reports: &[&MetricReport]) -> Vec<Option<f64>> {
    let of_tag = |tag: ModelTag| reports.iter().filter(move |r| r.model == tag);
    let mut cells = Vec::with_capacity(9);
    cells.extend(ModelTag::ALL.map(|t| mean(of_tag(t).map(|r| r.accuracy))));
    cells.extend(ModelTag::ALL.map(|t| mean(of_tag(t).map(|r| r.f1))));
    cells.extend(ModelTag::ALL.map(|t| mean(of_tag(t).filter_map(|r| r.auroc))));
    cells
}

/// Fold rows average over seeds; the final row averages the fold rows.
pub fn build_table(reports: &[MetricReport], level: Level, folds: usize) -> CvTable {
    let mut by_fold: BTreeMap<usize, Vec<&MetricReport>> = BTreeMap::new();
    for r in reports.iter().filter(|r| r.level == level) {
        by_fold.entry(r.fold).or_default().push(r);
    }
    let mut rows: Vec<TableRow> = (0..folds)
        .map(|f| TableRow {
            label: f.to_string(),
            cells: cells_of(by_fold.get(&f).map_or(&[][..], |v| &v[..])),
        })
        .collect();
    let average = (0..9).map(|c| mean(rows.iter().filter_map(|r| r.cells[c]))).collect();
    rows.push(TableRow {
        label: "Average".to_string(),
        cells: average,
    });
    CvTable { level, rows }
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

impl CvTable {
    pub fn average(&self) -> &TableRow {
        self.rows.last().expect("table has an average row")
    }

    /// Value of `metric` (index into [`METRIC_NAMES`]) for `model` in the
    /// average row.
    pub fn average_of(&self, model: ModelTag, metric: usize) -> Option<f64> {
        let m = ModelTag::ALL.iter().position(|t| *t == model).expect("known tag");
        self.average().cells[metric * 3 + m]
    }

    pub fn render_text(&self, prov: &Provenance) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} level (threshold 0.5; config {}, seeds {:?}, version {})", self.level, prov.config_hash, prov.seeds, prov.code_version);
        let mut head1 = format!("{:<10}", "Fold");
        for name in METRIC_NAMES {
            let _ = write!(head1, " | {:^26}", name);
        }
        let mut head2 = format!("{:<10}", "");
        for _ in METRIC_NAMES {
            let [a, b, c] = ModelTag::ALL.map(|t| t.as_str());
            let _ = write!(head2, " | {a:>8} {b:>8} {c:>8}");
        }
        let _ = writeln!(out, "{head1}\n{head2}");
        let _ = writeln!(out, "{}", "-".repeat(head2.len()));
        for row in &self.rows {
            let mut line = format!("{:<10}", row.label);
            for chunk in row.cells.chunks(3) {
                let _ = write!(line, " | {:>8} {:>8} {:>8}", fmt_cell(chunk[0]), fmt_cell(chunk[1]), fmt_cell(chunk[2]));
            }
            let _ = writeln!(out, "{line}");
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("level\trow");
        for m in METRIC_NAMES {
            for tag in ModelTag::ALL {
                let _ = write!(out, "\t{}_{tag}", m.to_lowercase());
            }
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{}\t{}", self.level, row.label);
            for c in &row.cells {
                let _ = write!(out, "\t{}", c.map_or_else(|| "nan".to_string(), |v| v.to_string()));
            }
            out.push('\n');
        }
        out
    }
}

/// One line per fold, seed, model and level, with provenance columns.
pub fn reports_tsv(reports: &[MetricReport], prov: &Provenance) -> String {
    let mut out = String::from("config_hash\tcode_version\tseed\tfold\tmodel\tlevel\tcount\taccuracy\tf1\tauroc\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            prov.config_hash,
            prov.code_version,
            r.seed,
            r.fold,
            r.model,
            r.level,
            r.count,
            r.accuracy,
            r.f1,
            r.auroc.map_or_else(|| "nan".to_string(), |v| v.to_string())
        );
    }
    out
}
