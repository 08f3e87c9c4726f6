//! `runs.csv`, `summary.csv`, `config.json` and the `mse_curve.svg` chart.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, RunRecord};
use crate::error::{Error, Result};

pub const RUNS_HEADER: [&str; 10] = [
    "seed",
    "problem_type",
    "strategy",
    "estimator",
    "batch_mode",
    "round",
    "n_labeled",
    "mse",
    "selected_indices",
    "wall_ms",
];

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    }
}

pub fn write_runs_csv<W: std::io::Write>(out: W, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RUNS_HEADER).map_err(csv_err)?;
    for rec in records {
        let c = &rec.config;
        for row in &rec.rows {
            let idx = row.selected_indices.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";");
            w.write_record([
                rec.seed.to_string(),
                c.problem_type.to_string(),
                c.strategy.to_string(),
                c.estimator.to_string(),
                c.batch_mode.to_string(),
                row.round.to_string(),
                row.n_labeled.to_string(),
                row.mse.to_string(),
                idx,
                row.wall_ms.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub problem_type: u8,
    pub strategy: String,
    pub estimator: String,
    pub batch_mode: String,
    pub round: u32,
    pub n_replicates: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
}

impl SummaryRow {
    pub fn label(&self) -> String {
        format!("{}/{}/{} (type {})", self.strategy, self.estimator, self.batch_mode, self.problem_type)
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-round median and quartiles over replicates, round 0 being the
/// initial fit.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(u8, String, String, String, u32), Vec<f64>> = BTreeMap::new();
    for rec in records {
        let c = &rec.config;
        let key = |round| {
            (
                u8::from(c.problem_type),
                c.strategy.to_string(),
                c.estimator.to_string(),
                c.batch_mode.to_string(),
                round,
            )
        };
        if rec.baseline_mse.is_finite() {
            groups.entry(key(0)).or_default().push(rec.baseline_mse);
        }
        for row in &rec.rows {
            groups.entry(key(row.round)).or_default().push(row.mse);
        }
    }
    groups
        .into_iter()
        .map(|((problem_type, strategy, estimator, batch_mode, round), mut v)| {
            v.sort_by(f64::total_cmp);
            let (q1, q3) = (quantile(&v, 0.25), quantile(&v, 0.75));
            SummaryRow {
                problem_type,
                strategy,
                estimator,
                batch_mode,
                round,
                n_replicates: v.len(),
                median: quantile(&v, 0.5),
                q1,
                q3,
                iqr: q3 - q1,
            }
        })
        .collect()
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Create `dir` and write `config.json` so that an unwritable destination
/// fails before any computation.
pub fn prepare_output_dir(dir: &Path, config: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), config.to_json()? + "\n")?;
    Ok(())
}

/// Write all outputs for one experiment into `dir`.
pub fn emit_outputs(records: &[RunRecord], config: &ExperimentConfig, dir: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records to write".into()));
    }
    prepare_output_dir(dir, config)?;
    write_runs_csv(fs::File::create(dir.join("runs.csv"))?, records)?;
    let summary = summarize(records);
    write_summary_csv(&dir.join("summary.csv"), &summary)?;
    fs::write(dir.join("mse_curve.svg"), render_svg(&summary))?;
    Ok(())
}

fn find_summaries(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_summaries(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "summary.csv") {
            out.push(p);
        }
    }
    Ok(())
}

/// Collect every `summary.csv` under `dir` and draw them in one chart at
/// `dir/mse_curve.svg`.
pub fn plot_dir(dir: &Path) -> Result<PathBuf> {
    let mut files = Vec::new();
    find_summaries(dir, &mut files)?;
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!("no summary.csv under {}", dir.display())));
    }
    let mut rows = Vec::new();
    for f in &files {
        rows.extend(read_summary(f)?);
    }
    let out = dir.join("mse_curve.svg");
    fs::write(&out, render_svg(&rows))?;
    Ok(out)
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Median MSE against round on a log-scale y axis, one line per
/// configuration.
pub fn render_svg(rows: &[SummaryRow]) -> String {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (70.0, 220.0, 20.0, 50.0);
    let mut series: BTreeMap<String, Vec<(u32, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.median > 0.0 && r.median.is_finite()) {
        series.entry(r.label()).or_default().push((r.round, r.median));
    }
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let points = series.values().flatten();
    let max_round = points.clone().map(|p| p.0).max().unwrap_or(1).max(1) as f64;
    let (mut lo, mut hi) = points.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        (lo.min(p.1.log10()), hi.max(p.1.log10()))
    });
    if !lo.is_finite() {
        (lo, hi) = (-3.0, 0.0);
    }
    if hi - lo < 0.2 {
        lo -= 0.1;
        hi += 0.1;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let x = |r: f64| left + r / max_round * pw;
    let y = |v: f64| top + (hi - v.log10()) / (hi - lo) * ph;

    let _ = writeln!(
        svg,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let step = (max_round / 10.0).ceil().max(1.0);
    let mut r = 0.0;
    while r <= max_round {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{r}</text>"#,
            x(r),
            top + ph + 16.0
        );
        r += step;
    }
    for e in (lo.floor() as i32)..=(hi.ceil() as i32) {
        let v = 10f64.powi(e);
        let yy = y(v);
        if yy >= top - 0.5 && yy <= top + ph + 0.5 {
            let _ = writeln!(
                svg,
                r##"<line x1="{left}" x2="{:.1}" y1="{yy:.1}" y2="{yy:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">1e{e}</text>"##,
                left + pw,
                left - 6.0,
                yy + 4.0
            );
        }
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">round</text>"#,
        left + pw / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">median MSE</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (k, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|&(r, v)| format!("{:.1},{:.1}", x(r as f64), y(v))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        let ly = top + 14.0 * k as f64 + 8.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{:.1}" x2="{:.1}" y1="{ly:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            left + pw + 10.0,
            left + pw + 28.0,
            left + pw + 32.0,
            ly + 4.0,
            label
        );
    }
    svg.push_str("</svg>\n");
    svg
}
