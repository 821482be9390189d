//! Deterministic summary tables (Markdown and CSV) and SVG curves.
//!
//! Rows with the same configuration name are aggregated across runs as
//! mean ± population standard deviation, in order of first appearance.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Result};
use dad_core::metrics::mean_std;
use serde::{Deserialize, Serialize};

use crate::io;

/// Metrics of one configuration in one run; `None` where not applicable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigMetrics {
    pub config: String,
    pub dmae: f64,
    pub rmse: f64,
    pub zmae: Option<f64>,
    pub miou: Option<f64>,
    pub bayes_miou: Option<f64>,
    pub randhalf_miou: Option<f64>,
    pub randquarter_miou: Option<f64>,
}

/// One point of a sweep curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Swept quantity, e.g. `epsilon`.
    pub axis: String,
    /// One curve per series, e.g. an attack family.
    pub series: String,
    pub x: f64,
    /// Measured quantity, e.g. `miou`.
    pub metric: String,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub rows: Vec<ConfigMetrics>,
    pub curves: Vec<CurvePoint>,
}

pub const ERRORS_CSV_COLUMNS: [&str; 8] = [
    "config", "runs", "dmae_mean", "dmae_std", "rmse_mean", "rmse_std", "zmae_mean", "zmae_std",
];
pub const DETECTORS_CSV_COLUMNS: [&str; 10] = [
    "config",
    "runs",
    "dad_mean",
    "dad_std",
    "bayesian_mean",
    "bayesian_std",
    "randhalf_mean",
    "randhalf_std",
    "randquarter_mean",
    "randquarter_std",
];
pub const CURVES_CSV_COLUMNS: [&str; 7] = ["axis", "metric", "series", "x", "runs", "mean", "std"];

/// Mean and spread of one quantity; `None` if no run reported it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Agg {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

fn agg(values: impl IntoIterator<Item = Option<f64>>) -> Option<Agg> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        return None;
    }
    let (mean, std) = mean_std(&v);
    Some(Agg { mean, std, n: v.len() })
}

/// Aggregated row of the two summary tables.
#[derive(Debug, Clone, PartialEq)]
pub struct AggRow {
    pub config: String,
    pub runs: usize,
    pub dmae: Option<Agg>,
    pub rmse: Option<Agg>,
    pub zmae: Option<Agg>,
    pub dad: Option<Agg>,
    pub bayes: Option<Agg>,
    pub randhalf: Option<Agg>,
    pub randquarter: Option<Agg>,
}

pub fn aggregate_rows(runs: &[RunSummary]) -> Vec<AggRow> {
    let mut order: Vec<&str> = Vec::new();
    for r in runs {
        for row in &r.rows {
            if !order.contains(&row.config.as_str()) {
                order.push(&row.config);
            }
        }
    }
    order
        .into_iter()
        .map(|name| {
            let rows: Vec<&ConfigMetrics> = runs.iter().flat_map(|r| r.rows.iter().filter(|x| x.config == name)).collect();
            AggRow {
                config: name.to_string(),
                runs: rows.len(),
                dmae: agg(rows.iter().map(|r| Some(r.dmae))),
                rmse: agg(rows.iter().map(|r| Some(r.rmse))),
                zmae: agg(rows.iter().map(|r| r.zmae)),
                dad: agg(rows.iter().map(|r| r.miou)),
                bayes: agg(rows.iter().map(|r| r.bayes_miou)),
                randhalf: agg(rows.iter().map(|r| r.randhalf_miou)),
                randquarter: agg(rows.iter().map(|r| r.randquarter_miou)),
            }
        })
        .collect()
}

/// `(axis, metric) -> series -> x -> aggregate`, x in first-seen order.
pub type CurveTable = BTreeMap<(String, String), Vec<(String, Vec<(f64, Agg)>)>>;

pub fn aggregate_curves(runs: &[RunSummary]) -> CurveTable {
    let mut raw: BTreeMap<(String, String), Vec<(String, Vec<(f64, Vec<f64>)>)>> = BTreeMap::new();
    for p in runs.iter().flat_map(|r| &r.curves) {
        let series = raw.entry((p.axis.clone(), p.metric.clone())).or_default();
        let idx = match series.iter().position(|(s, _)| *s == p.series) {
            Some(i) => i,
            None => {
                series.push((p.series.clone(), Vec::new()));
                series.len() - 1
            }
        };
        let pts = &mut series[idx].1;
        match pts.iter_mut().find(|(x, _)| *x == p.x) {
            Some((_, ys)) => ys.push(p.y),
            None => pts.push((p.x, vec![p.y])),
        }
    }
    raw.into_iter()
        .map(|(k, series)| {
            let s = series
                .into_iter()
                .map(|(name, pts)| {
                    let pts = pts
                        .into_iter()
                        .map(|(x, ys)| (x, agg(ys.into_iter().map(Some)).expect("nonempty")))
                        .collect();
                    (name, pts)
                })
                .collect();
            (k, s)
        })
        .collect()
}

fn cell(a: Option<Agg>) -> String {
    match a {
        Some(a) => format!("{:.4} ± {:.4}", a.mean, a.std),
        None => "–".into(),
    }
}

fn csv_pair(a: Option<Agg>) -> [String; 2] {
    match a {
        Some(a) => [format!("{:.6}", a.mean), format!("{:.6}", a.std)],
        None => [String::new(), String::new()],
    }
}

fn fmt_x(x: f64) -> String {
    format!("{x}")
}

/// Renders every report file in memory, keyed by file name.
pub fn render(runs: &[RunSummary]) -> Result<BTreeMap<String, Vec<u8>>> {
    ensure!(!runs.is_empty(), "no runs to report");
    let rows = aggregate_rows(runs);
    let curves = aggregate_curves(runs);
    let mut files = BTreeMap::new();
    let seeds: Vec<String> = runs.iter().map(|r| r.seed.to_string()).collect();

    let mut md = String::new();
    writeln!(md, "# Density-and-depth benchmark summary\n")?;
    writeln!(md, "Runs: {} (seeds {}). Cells are mean ± std over runs.\n", runs.len(), seeds.join(", "))?;
    writeln!(md, "## Counting and depth error, clean vs attacked\n")?;
    writeln!(md, "| config | runs | DMAE | RMSE | ZMAE |")?;
    writeln!(md, "|---|---|---|---|---|")?;
    for r in &rows {
        writeln!(md, "| {} | {} | {} | {} | {} |", r.config, r.runs, cell(r.dmae), cell(r.rmse), cell(r.zmae))?;
    }
    writeln!(md, "\n## Tamper localisation (mIoU)\n")?;
    writeln!(md, "| config | DaD | BAYESIAN | RANDHALF | RANDQUARTER |")?;
    writeln!(md, "|---|---|---|---|---|")?;
    for r in rows.iter().filter(|r| r.dad.is_some()) {
        writeln!(md, "| {} | {} | {} | {} | {} |", r.config, cell(r.dad), cell(r.bayes), cell(r.randhalf), cell(r.randquarter))?;
    }
    for ((axis, metric), series) in &curves {
        writeln!(md, "\n## Sweep: {metric} vs {axis}\n")?;
        let xs = union_x(series);
        write!(md, "| series |")?;
        for x in &xs {
            write!(md, " {} |", fmt_x(*x))?;
        }
        writeln!(md)?;
        writeln!(md, "|---|{}", "---|".repeat(xs.len()))?;
        for (name, pts) in series {
            write!(md, "| {name} |")?;
            for x in &xs {
                let c = pts.iter().find(|(px, _)| px == x).map(|(_, a)| *a);
                write!(md, " {} |", cell(c))?;
            }
            writeln!(md)?;
        }
        files.insert(format!("{axis}_{metric}.svg"), svg_plot(axis, metric, series).into_bytes());
    }
    files.insert("summary.md".into(), md.into_bytes());

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(ERRORS_CSV_COLUMNS)?;
    for r in &rows {
        let mut rec = vec![r.config.clone(), r.runs.to_string()];
        for a in [r.dmae, r.rmse, r.zmae] {
            rec.extend(csv_pair(a));
        }
        w.write_record(&rec)?;
    }
    files.insert("errors.csv".into(), w.into_inner()?);

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(DETECTORS_CSV_COLUMNS)?;
    for r in rows.iter().filter(|r| r.dad.is_some()) {
        let mut rec = vec![r.config.clone(), r.runs.to_string()];
        for a in [r.dad, r.bayes, r.randhalf, r.randquarter] {
            rec.extend(csv_pair(a));
        }
        w.write_record(&rec)?;
    }
    files.insert("detectors.csv".into(), w.into_inner()?);

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CURVES_CSV_COLUMNS)?;
    for ((axis, metric), series) in &curves {
        for (name, pts) in series {
            for (x, a) in pts {
                w.write_record([
                    axis.clone(),
                    metric.clone(),
                    name.clone(),
                    fmt_x(*x),
                    a.n.to_string(),
                    format!("{:.6}", a.mean),
                    format!("{:.6}", a.std),
                ])?;
            }
        }
    }
    files.insert("curves.csv".into(), w.into_inner()?);
    files.insert("runs.json".into(), io::to_json(runs)?);
    Ok(files)
}

/// Writes the rendered report into `out`; returns the paths written.
pub fn emit_report(runs: &[RunSummary], out: &Path) -> Result<Vec<PathBuf>> {
    let files = render(runs)?;
    let mut paths = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let p = out.join(name);
        io::write_atomic(&p, &bytes)?;
        paths.push(p);
    }
    Ok(paths)
}

fn union_x(series: &[(String, Vec<(f64, Agg)>)]) -> Vec<f64> {
    let mut xs: Vec<f64> = series.iter().flat_map(|(_, p)| p.iter().map(|(x, _)| *x)).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    xs
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

/// Line chart of mean values, one polyline per series. Log x when all
/// values are positive and span at least two decades.
pub fn svg_plot(axis: &str, metric: &str, series: &[(String, Vec<(f64, Agg)>)]) -> String {
    let (w, h, l, r, t, b) = (560.0, 360.0, 60.0, 130.0, 30.0, 50.0);
    let xs = union_x(series);
    let ys: Vec<f64> = series.iter().flat_map(|(_, p)| p.iter().map(|(_, a)| a.mean)).collect();
    let log = xs.first().is_some_and(|&x| x > 0.0) && xs.last().zip(xs.first()).is_some_and(|(hi, lo)| hi / lo >= 100.0);
    let fx = |x: f64| if log { x.log10() } else { x };
    let (x0, x1) = span(xs.iter().map(|&x| fx(x)));
    let (y0, y1) = span(ys.iter().copied().chain([0.0]));
    let px = |x: f64| l + (fx(x) - x0) / (x1 - x0) * (w - l - r);
    let py = |y: f64| h - b - (y - y0) / (y1 - y0) * (h - t - b);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{l}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{l}" y1="{t}" x2="{l}" y2="{}" stroke="black"/>"#,
        h - b,
        w - r,
        h - b,
        h - b
    );
    for x in &xs {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, px(*x), h - b + 16.0, fmt_x(*x));
    }
    for k in 0..=4 {
        let y = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{y:.3}</text>"#, l - 6.0, py(y) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{axis}{}</text>"#, (l + w - r) / 2.0, h - 12.0, if log { " (log)" } else { "" });
    let _ = writeln!(s, r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">{metric}</text>"#, (t + h - b) / 2.0, (t + h - b) / 2.0);
    for (i, (name, pts)) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let mut pts = pts.clone();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let line: Vec<String> = pts.iter().map(|(x, a)| format!("{:.1},{:.1}", px(*x), py(a.mean))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#, line.join(" "));
        for (x, a) in &pts {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{c}"/>"#, px(*x), py(a.mean));
        }
        let ly = t + 14.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{}" y="{:.1}" width="10" height="10" fill="{c}"/><text x="{}" y="{:.1}">{name}</text>"#, w - r + 10.0, ly, w - r + 24.0, ly + 9.0);
    }
    s.push_str("</svg>\n");
    s
}

fn span(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}
