//! Aggregation of evaluation reports into CSV tables and static SVG charts.
//!
//! A report can carry a sweep coordinate in `extra.sweep` as
//! `{"axis": "fragment_length", "value": 150}`; few-shot reports use their
//! shot count on the `shots` axis automatically.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{EvaluationReport, Protocol, REPORT_SCHEMA};

pub const AXIS_FRAGMENT_LENGTH: &str = "fragment_length";
pub const AXIS_THRESHOLD: &str = "threshold";
pub const AXIS_SHOTS: &str = "shots";

/// Metrics shown in the comparison table unless asked otherwise.
pub const TABLE_METRICS: [&str; 4] = ["accuracy", "f1", "auc_roc", "mcc"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis: String,
    pub value: f64,
}

/// Reads reports, failing with every incompatible file named at once.
pub fn load_reports<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<(PathBuf, EvaluationReport)>> {
    if paths.is_empty() {
        return Err(Error::invalid("no report files given"));
    }
    let mut out = Vec::new();
    let mut bad = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
        match serde_json::from_str::<serde_json::Value>(&text) {
            Ok(v) if v.get("schema").and_then(|s| s.as_str()) == Some(REPORT_SCHEMA) => {
                match serde_json::from_value::<EvaluationReport>(v) {
                    Ok(r) => out.push((p.to_path_buf(), r)),
                    Err(e) => bad.push(format!("{} ({e})", p.display())),
                }
            }
            Ok(v) => {
                let found = v.get("schema").and_then(|s| s.as_str()).unwrap_or("none");
                bad.push(format!("{} (schema `{found}`)", p.display()));
            }
            Err(e) => bad.push(format!("{} ({e})", p.display())),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Format(format!(
            "incompatible reports, expected schema `{REPORT_SCHEMA}`: {}",
            bad.join(", ")
        )));
    }
    Ok(out)
}

pub fn sweep_point(r: &EvaluationReport) -> Option<SweepPoint> {
    if let Some(s) = r.extra.get("sweep") {
        if let Ok(p) = serde_json::from_value::<SweepPoint>(s.clone()) {
            return Some(p);
        }
    }
    match r.protocol {
        Protocol::FewShot { shots } => Some(SweepPoint {
            axis: AXIS_SHOTS.into(),
            value: shots as f64,
        }),
        _ => None,
    }
}

/// Short protocol label used in table rows.
pub fn protocol_label(p: &Protocol) -> String {
    match p {
        Protocol::Standard => "standard".into(),
        Protocol::ZeroShot => "zero-shot".into(),
        Protocol::FewShot { shots } => format!("few-shot-{shots}"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in std::iter::once(&self.header).chain(&self.rows) {
            let cells: Vec<String> = row.iter().map(|c| csv_cell(c)).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}

fn csv_cell(c: &str) -> String {
    if c.contains([',', '"', '\n']) {
        format!("\"{}\"", c.replace('"', "\"\""))
    } else {
        c.to_string()
    }
}

fn fmt_value(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// One row per report, one column per metric.
pub fn metric_table(reports: &[(PathBuf, EvaluationReport)], metrics: &[&str]) -> Table {
    let mut header = vec!["report".to_string(), "model".into(), "protocol".into()];
    header.extend(metrics.iter().map(|m| m.to_string()));
    let rows = reports
        .iter()
        .map(|(path, r)| {
            let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let mut row = vec![name, r.model.clone(), protocol_label(&r.protocol)];
            row.extend(metrics.iter().map(|m| fmt_value(r.metrics.get(m))));
            row
        })
        .collect();
    Table { header, rows }
}

/// A metric traced along one sweep axis, one series per model.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSeries {
    pub axis: String,
    pub metric: String,
    pub series: BTreeMap<String, Vec<(f64, f64)>>,
}

impl SweepSeries {
    pub fn x_values(&self) -> Vec<f64> {
        let mut xs: Vec<f64> = self.series.values().flatten().map(|p| p.0).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        xs
    }

    pub fn to_table(&self) -> Table {
        let xs = self.x_values();
        let mut header = vec![self.axis.clone()];
        header.extend(self.series.keys().cloned());
        let rows = xs
            .iter()
            .map(|&x| {
                let mut row = vec![fmt_axis(x)];
                for pts in self.series.values() {
                    row.push(fmt_value(pts.iter().find(|p| p.0 == x).map(|p| p.1)));
                }
                row
            })
            .collect();
        Table { header, rows }
    }
}

fn fmt_axis(x: f64) -> String {
    if x.fract() == 0.0 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

/// Groups reports by sweep axis. Points with the same model and coordinate
/// are averaged.
pub fn sweep_series(reports: &[(PathBuf, EvaluationReport)], metric: &str) -> Vec<SweepSeries> {
    // axis -> model -> x bits -> (x, sum of y, count)
    type Sums = BTreeMap<u64, (f64, f64, usize)>;
    let mut acc: BTreeMap<String, BTreeMap<String, Sums>> = BTreeMap::new();
    for (_, r) in reports {
        let (Some(p), Some(v)) = (sweep_point(r), r.metrics.get(metric)) else { continue };
        let e = acc
            .entry(p.axis)
            .or_default()
            .entry(r.model.clone())
            .or_default()
            .entry(p.value.to_bits())
            .or_insert((p.value, 0.0, 0));
        e.1 += v;
        e.2 += 1;
    }
    acc.into_iter()
        .map(|(axis, models)| {
            let series = models
                .into_iter()
                .map(|(m, pts)| {
                    let mut v: Vec<(f64, f64)> = pts.into_values().map(|(x, s, n)| (x, s / n as f64)).collect();
                    v.sort_by(|a, b| a.0.total_cmp(&b.0));
                    (m, v)
                })
                .collect();
            SweepSeries {
                axis,
                metric: metric.to_string(),
                series,
            }
        })
        .collect()
}

const PALETTE: [&str; 8] = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f"];
const W: f64 = 640.0;
const H: f64 = 400.0;
const M_LEFT: f64 = 60.0;
const M_RIGHT: f64 = 150.0;
const M_TOP: f64 = 40.0;
const M_BOTTOM: f64 = 50.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    s
}

/// Y axis from `lo` to `hi` with five ticks; returns the value-to-pixel map.
fn y_axis(s: &mut String, lo: f64, hi: f64, label: &str) -> impl Fn(f64) -> f64 {
    let (top, bottom) = (M_TOP, H - M_BOTTOM);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let map = move |v: f64| bottom - (v - lo) / span * (bottom - top);
    let _ = writeln!(s, r#"<line x1="{M_LEFT}" y1="{top}" x2="{M_LEFT}" y2="{bottom}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{M_LEFT}" y1="{bottom}" x2="{}" y2="{bottom}" stroke="black"/>"#, W - M_RIGHT);
    for i in 0..=4 {
        let v = lo + span * i as f64 / 4.0;
        let y = map(v);
        let _ = writeln!(s, r##"<line x1="{}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#ddd"/>"##, M_LEFT, W - M_RIGHT);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, M_LEFT - 6.0, y + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (top + bottom) / 2.0,
        (top + bottom) / 2.0,
        escape(label)
    );
    map
}

fn legend(s: &mut String, names: &[String]) {
    for (i, n) in names.iter().enumerate() {
        let y = M_TOP + 10.0 + 18.0 * i as f64;
        let x = W - M_RIGHT + 12.0;
        let _ = writeln!(s, r#"<rect x="{x}" y="{:.1}" width="12" height="12" fill="{}"/>"#, y - 10.0, PALETTE[i % PALETTE.len()]);
        let _ = writeln!(s, r#"<text x="{}" y="{y:.1}">{}</text>"#, x + 18.0, escape(n));
    }
}

/// Grouped bars: one group per metric column of `table`, one bar per row.
pub fn bar_chart_svg(table: &Table, title: &str) -> String {
    let metric_cols: Vec<usize> = (3..table.header.len()).collect();
    let names: Vec<String> = table.rows.iter().map(|r| format!("{} ({})", r[0], r[2])).collect();
    let value = |r: usize, c: usize| table.rows[r][c].parse::<f64>().ok();
    let lo = table
        .rows
        .iter()
        .enumerate()
        .flat_map(|(r, _)| metric_cols.iter().filter_map(move |&c| value(r, c)))
        .fold(0.0f64, f64::min);
    let mut s = svg_open(title);
    let map = y_axis(&mut s, lo, 1.0, "value");
    let plot_w = W - M_LEFT - M_RIGHT;
    let group_w = plot_w / metric_cols.len().max(1) as f64;
    let bar_w = group_w * 0.8 / names.len().max(1) as f64;
    for (g, &c) in metric_cols.iter().enumerate() {
        let gx = M_LEFT + group_w * g as f64 + group_w * 0.1;
        for r in 0..table.rows.len() {
            let Some(v) = value(r, c) else { continue };
            let (y0, y1) = (map(0.0f64.max(lo)), map(v));
            let (top, h) = if y1 < y0 { (y1, y0 - y1) } else { (y0, y1 - y0) };
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{top:.1}" width="{:.1}" height="{h:.1}" fill="{}"/>"#,
                gx + bar_w * r as f64,
                bar_w,
                PALETTE[r % PALETTE.len()]
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            M_LEFT + group_w * (g as f64 + 0.5),
            H - M_BOTTOM + 18.0,
            escape(&table.header[c])
        );
    }
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    s
}

/// Line chart over the sweep axis. X positions are evenly spaced by rank so
/// that lengths from 150 bp to 50 kb stay readable; ticks show real values.
pub fn line_chart_svg(sweep: &SweepSeries) -> String {
    let xs = sweep.x_values();
    let lo = sweep.series.values().flatten().map(|p| p.1).fold(0.0f64, f64::min);
    let mut s = svg_open(&format!("{} vs {}", sweep.metric, sweep.axis));
    let map = y_axis(&mut s, lo, 1.0, &sweep.metric);
    let plot_w = W - M_LEFT - M_RIGHT;
    let xpos = |x: f64| {
        let i = xs.iter().position(|&v| v == x).unwrap_or(0);
        if xs.len() < 2 {
            M_LEFT + plot_w / 2.0
        } else {
            M_LEFT + 20.0 + (plot_w - 40.0) * i as f64 / (xs.len() - 1) as f64
        }
    };
    for &x in &xs {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            xpos(x),
            H - M_BOTTOM + 18.0,
            fmt_axis(x)
        );
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, M_LEFT + plot_w / 2.0, H - 10.0, escape(&sweep.axis));
    let names: Vec<String> = sweep.series.keys().cloned().collect();
    for (i, pts) in sweep.series.values().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", xpos(x), map(y))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
        for &(x, y) in pts {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, xpos(x), map(y));
        }
    }
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    s
}

/// Writes `metrics.csv`, `metrics.svg` and, for each sweep axis, a
/// `<axis>_<metric>.csv/.svg` pair. Returns the written paths.
pub fn write_bundle(reports: &[(PathBuf, EvaluationReport)], metrics: &[&str], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let p = out_dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
        written.push(p);
        Ok(())
    };
    let table = metric_table(reports, metrics);
    put("metrics.csv".into(), table.to_csv())?;
    put("metrics.svg".into(), bar_chart_svg(&table, "metric comparison"))?;
    for m in metrics {
        for sw in sweep_series(reports, m) {
            put(format!("{}_{}.csv", sw.axis, m), sw.to_table().to_csv())?;
            put(format!("{}_{}.svg", sw.axis, m), line_chart_svg(&sw))?;
        }
    }
    Ok(written)
}
