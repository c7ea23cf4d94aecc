use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Result};
use instlabel_core::eval::Condition;
use instlabel_core::train::EpochRecord;
use instlabel_core::Error;
use plotters::prelude::*;

const SERIES_HEADER: &str = "mean_bag_size\tcondition\tnum_bags\tmean_auroc\tstd_auroc\truns";

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesRow {
    pub mean_bag_size: f64,
    pub condition: Condition,
    pub num_bags: usize,
    pub mean_auroc: f64,
    pub std_auroc: f64,
}

/// Parses a sweep series file. Comment lines start with `#`.
pub fn parse_series(text: &str, path: &Path) -> instlabel_core::Result<Vec<SeriesRow>> {
    let mut rows = Vec::new();
    let mut header_seen = false;
    let mut last = 0;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        last = n;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            if line != SERIES_HEADER {
                return Err(Error::parse(path, n, format!("expected header '{SERIES_HEADER}'")));
            }
            header_seen = true;
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(Error::parse(path, n, format!("expected 6 tab-separated fields, found {}", f.len())));
        }
        let num = |s: &str, what: &str| -> instlabel_core::Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(path, n, format!("{what}: '{s}' is not a finite number")))
        };
        rows.push(SeriesRow {
            mean_bag_size: num(f[0], "mean_bag_size")?,
            condition: f[1].parse().map_err(|e: String| Error::parse(path, n, e))?,
            num_bags: f[2].parse().map_err(|_| Error::parse(path, n, format!("num_bags: '{}' is not a count", f[2])))?,
            mean_auroc: num(f[3], "mean_auroc")?,
            std_auroc: num(f[4], "std_auroc")?,
        });
    }
    if rows.is_empty() {
        return Err(Error::parse(path, last, "series has no data rows"));
    }
    Ok(rows)
}

/// Parses a line-delimited training log.
pub fn parse_log(text: &str, path: &Path) -> instlabel_core::Result<Vec<EpochRecord>> {
    let mut records = Vec::new();
    let mut last = 0;
    for (i, line) in text.lines().enumerate() {
        last = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let r: EpochRecord = serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        records.push(r);
    }
    if records.is_empty() {
        return Err(Error::parse(path, last, "log has no records"));
    }
    Ok(records)
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    let pad = ((hi - lo) * 0.08).max(1e-3);
    (lo - pad, hi + pad)
}

fn draw_err<E: std::fmt::Debug>(path: &Path) -> impl Fn(E) -> anyhow::Error + '_ {
    move |e| anyhow!("cannot draw {}: {e:?}", path.display())
}

/// One AUROC-vs-N panel per mean bag size, with VAT and no-VAT curves.
pub fn plot_series(rows: &[SeriesRow], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut by_k: BTreeMap<u64, Vec<&SeriesRow>> = BTreeMap::new();
    for r in rows {
        by_k.entry(r.mean_bag_size.to_bits()).or_default().push(r);
    }
    let mut written = Vec::new();
    for (bits, rows) in by_k {
        let k = f64::from_bits(bits);
        let path = out_dir.join(format!("auroc_vs_bags_k{k}.svg"));
        let x_max = rows.iter().map(|r| r.num_bags).max().unwrap_or(1) as f64;
        let x_min = rows.iter().map(|r| r.num_bags).min().unwrap_or(0) as f64;
        let y_lo = rows.iter().map(|r| r.mean_auroc - r.std_auroc).fold(f64::INFINITY, f64::min);
        let y_hi = rows.iter().map(|r| r.mean_auroc + r.std_auroc).fold(f64::NEG_INFINITY, f64::max);
        let (y_lo, y_hi) = padded(y_lo.max(0.0), y_hi.min(1.0));
        let (x_lo, x_hi) = padded(x_min, x_max);
        let err = draw_err(&path);
        let root = SVGBackend::new(&path, (640, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(&err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("Mean bag size {k}"), ("sans-serif", 22))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(56)
            .build_cartesian_2d(x_lo..x_hi, y_lo..y_hi)
            .map_err(&err)?;
        chart
            .configure_mesh()
            .x_desc("Number of training bags")
            .y_desc("Bag AUROC")
            .draw()
            .map_err(&err)?;
        for (cond, color, label) in [(Condition::Vat, BLUE, "VAT"), (Condition::NoVat, RED, "No VAT")] {
            let mut pts: Vec<(f64, f64, f64)> = rows
                .iter()
                .filter(|r| r.condition == cond)
                .map(|r| (r.num_bags as f64, r.mean_auroc, r.std_auroc))
                .collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            chart
                .draw_series(LineSeries::new(pts.iter().map(|p| (p.0, p.1)), color.stroke_width(2)))
                .map_err(&err)?
                .label(label)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
            chart
                .draw_series(pts.iter().map(|p| ErrorBar::new_vertical(p.0, p.1 - p.2, p.1, p.1 + p.2, color.filled(), 6)))
                .map_err(&err)?;
        }
        chart
            .configure_series_labels()
            .position(SeriesLabelPosition::LowerRight)
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(&err)?;
        root.present().map_err(&err)?;
        written.push(path.clone());
    }
    Ok(written)
}

/// Per-epoch loss curves: every term and the total.
pub fn plot_log(records: &[EpochRecord], title: &str, path: &Path) -> Result<()> {
    let mut curves: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in records {
        for (name, v) in &r.terms {
            curves.entry(name.clone()).or_default().push((r.epoch as f64, *v));
        }
        curves.entry("total".to_string()).or_default().push((r.epoch as f64, r.total));
    }
    let values = curves.values().flatten().map(|p| p.1).filter(|v| v.is_finite());
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return Err(anyhow!("{}: no finite loss values", path.display()));
    }
    let (y_lo, y_hi) = padded(lo, hi);
    let x_max = records.iter().map(|r| r.epoch).max().unwrap_or(1).max(1) as f64;
    let err = draw_err(path);
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..x_max, y_lo..y_hi)
        .map_err(&err)?;
    chart.configure_mesh().x_desc("Epoch").y_desc("Loss").draw().map_err(&err)?;
    for (i, (name, pts)) in curves.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let width = if name == "total" { 3 } else { 1 };
        chart
            .draw_series(LineSeries::new(pts.iter().copied().filter(|p| p.1.is_finite()), color.stroke_width(width)))
            .map_err(&err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(width)));
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::UpperRight)
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(&err)?;
    root.present().map_err(&err)?;
    Ok(())
}

enum Input {
    Series(Vec<SeriesRow>),
    Log(Vec<EpochRecord>),
}

/// Parses every input before drawing anything, so a bad file leaves no
/// partial output behind.
pub fn run(inputs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut parsed = Vec::new();
    for path in inputs {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_log = path.extension().is_some_and(|e| e == "jsonl");
        let input = if is_log { Input::Log(parse_log(&text, path)?) } else { Input::Series(parse_series(&text, path)?) };
        parsed.push((path, input));
    }
    for (path, input) in parsed {
        let dir = match out {
            Some(d) => d.to_path_buf(),
            None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        match input {
            Input::Series(rows) => {
                for p in plot_series(&rows, &dir)? {
                    println!("{}", p.display());
                }
            }
            Input::Log(records) => {
                let stem = path.file_stem().map_or_else(|| "log".into(), |s| s.to_string_lossy().into_owned());
                let target = dir.join(format!("{stem}.svg"));
                plot_log(&records, &format!("Training loss ({stem})"), &target)?;
                println!("{}", target.display());
            }
        }
    }
    Ok(())
}
