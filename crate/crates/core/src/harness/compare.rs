use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::train::ExperimentReport;
use crate::error::{Error, Result};
use crate::metrics::delta_mtl;

/// Strategy-by-metric table, one row per run.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Every `report.json` below `dir`, sorted by name then seed.
pub fn collect_reports(dir: &Path) -> Result<Vec<ExperimentReport>> {
    let mut paths = Vec::new();
    find_reports(dir, &mut paths)?;
    let mut reports = paths
        .iter()
        .map(|p| Ok(serde_json::from_slice(&std::fs::read(p)?)?))
        .collect::<Result<Vec<ExperimentReport>>>()?;
    reports.sort_by(|a, b| (&a.name, a.seed).cmp(&(&b.name, b.seed)));
    Ok(reports)
}

fn find_reports(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            find_reports(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "report.json") {
            out.push(p);
        }
    }
    Ok(())
}

/// One row per report: identifiers, final metrics, baseline metrics and
/// ΔMTL. All reports must cover the same tasks.
pub fn comparison_table(reports: &[ExperimentReport]) -> Result<ComparisonTable> {
    let first = reports.first().ok_or_else(|| Error::InvalidInput("no reports to compare".into()))?;
    let cols: Vec<String> = first.task_names.iter().zip(&first.metric_names).map(|(t, m)| format!("{t}_{m}")).collect();
    let mut header: Vec<String> = ["name", "strategy", "protocol", "seed"].map(String::from).to_vec();
    header.extend(cols.iter().cloned());
    header.extend(cols.iter().map(|c| format!("stl_{c}")));
    header.extend(["delta_mtl", "best_epoch", "config_hash"].map(String::from));
    let mut rows = Vec::with_capacity(reports.len());
    for r in reports {
        if r.task_names != first.task_names || r.metric_names != first.metric_names {
            return Err(Error::InvalidInput(format!("report {} covers different tasks", r.name)));
        }
        let mut row = vec![r.name.clone(), r.strategy.to_string(), r.protocol.clone(), r.seed.to_string()];
        row.extend(r.final_metrics.iter().map(|v| v.to_string()));
        match &r.stl_metrics {
            Some(s) => row.extend(s.iter().map(|v| v.to_string())),
            None => row.extend(cols.iter().map(|_| String::new())),
        }
        row.push(r.delta_mtl.map(|d| d.to_string()).unwrap_or_default());
        row.push(r.best_epoch.to_string());
        row.push(r.config_hash.clone());
        rows.push(row);
    }
    Ok(ComparisonTable { header, rows })
}

impl ComparisonTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
        w.write_record(&self.header).map_err(|e| Error::Format(e.to_string()))?;
        for r in &self.rows {
            w.write_record(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
        let header = r.headers().map_err(|e| Error::Format(e.to_string()))?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()).map_err(|e| Error::Format(e.to_string())))
            .collect::<Result<_>>()?;
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// ΔMTL of each row recomputed from its metric and baseline columns.
    pub fn recompute_delta(&self, higher_is_better: &[bool]) -> Result<Vec<Option<f64>>> {
        let metric_cols: Vec<usize> = (4..4 + higher_is_better.len()).collect();
        let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("{s:?}: {e}")));
        self.rows
            .iter()
            .map(|row| {
                let stl: Vec<&String> = metric_cols.iter().map(|&c| &row[c + higher_is_better.len()]).collect();
                if stl.iter().any(|s| s.is_empty()) {
                    return Ok(None);
                }
                let m = metric_cols.iter().map(|&c| parse(&row[c])).collect::<Result<Vec<_>>>()?;
                let s = stl.iter().map(|v| parse(v)).collect::<Result<Vec<_>>>()?;
                delta_mtl(&m, &s, higher_is_better).map(Some)
            })
            .collect()
    }

    /// Fixed-width text rendering.
    pub fn to_text(&self) -> String {
        let widths: Vec<usize> = (0..self.header.len())
            .map(|c| self.rows.iter().map(|r| short(&r[c]).len()).chain([self.header[c].len()]).max().unwrap_or(0))
            .collect();
        let line = |cells: Vec<String>| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = line(self.header.clone());
        for r in &self.rows {
            out.push('\n');
            out.push_str(&line(r.iter().map(|c| short(c)).collect()));
        }
        out.push('\n');
        out
    }
}

/// Numbers to four decimals, hashes to eight characters.
fn short(cell: &str) -> String {
    if cell.len() == 64 && cell.chars().all(|c| c.is_ascii_hexdigit()) {
        return cell[..8].to_string();
    }
    match cell.parse::<f64>() {
        Ok(v) if cell.contains('.') || cell.contains('e') => format!("{v:.4}"),
        _ => cell.to_string(),
    }
}

/// Mean training objective per epoch, one line per report, as SVG.
pub fn plot_loss_curves(reports: &[ExperimentReport], path: &Path) -> Result<()> {
    let plot_err = |e: String| Error::Format(format!("plotting failed: {e}"));
    let series: Vec<(String, Vec<(f64, f64)>)> = reports
        .iter()
        .map(|r| {
            (
                format!("{} (seed {})", r.name, r.seed),
                r.epochs.iter().map(|e| ((e.epoch + 1) as f64, e.mean_total)).collect(),
            )
        })
        .collect();
    let points = series.iter().flat_map(|(_, s)| s.iter());
    let (mut x_max, mut y_min, mut y_max) = (1.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if !y_min.is_finite() {
        (y_min, y_max) = (0.0, 1.0);
    }
    let pad = ((y_max - y_min) * 0.05).max(1e-6);
    let root = SVGBackend::new(path, (900, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("training objective per epoch", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(1.0..x_max.max(2.0), (y_min - pad)..(y_max + pad))
        .map_err(|e| plot_err(e.to_string()))?;
    chart.configure_mesh().x_desc("epoch").y_desc("mean loss").draw().map_err(|e| plot_err(e.to_string()))?;
    for (i, (label, pts)) in series.into_iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(|e| plot_err(e.to_string()))?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(e.to_string()))?;
    root.present().map_err(|e| plot_err(e.to_string()))?;
    Ok(())
}

/// Reads every report below `reports_dir`, writes the table to `out` and
/// the loss curves next to it (same stem, `.svg`).
pub fn compare(reports_dir: &Path, out: &Path) -> Result<ComparisonTable> {
    let reports = collect_reports(reports_dir)?;
    let table = comparison_table(&reports)?;
    table.write_csv(out)?;
    plot_loss_curves(&reports, &out.with_extension("svg"))?;
    Ok(table)
}
