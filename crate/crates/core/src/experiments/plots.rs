//! Deterministic SVG figures over sweep records.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::Tap;
use crate::error::{Error, Result};

use super::records::{ExperimentRecord, RecordSet};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const TICKS: usize = 5;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    /// Error and per-layer diversity against epoch, one file per width.
    EpochCurves,
    /// Final error and head diversity against parameter count.
    SizeScan,
    /// Final error against head diversity, one point per algorithm.
    AlgoScatter,
}

impl PlotKind {
    pub const ALL: [PlotKind; 3] = [PlotKind::EpochCurves, PlotKind::SizeScan, PlotKind::AlgoScatter];

    pub fn name(self) -> &'static str {
        match self {
            PlotKind::EpochCurves => "epoch_curves",
            PlotKind::SizeScan => "size_scan",
            PlotKind::AlgoScatter => "algo_scatter",
        }
    }
}

impl fmt::Display for PlotKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PlotKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PlotKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::InvalidArgument(format!("unknown plot kind {s:?} (epoch_curves|size_scan|algo_scatter)"))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Axis {
    Left,
    Right,
}

#[derive(Clone, Debug)]
struct Series {
    label: String,
    axis: Axis,
    dashed: bool,
    /// Draw a polyline through the points; otherwise markers only.
    line: bool,
    points: Vec<(f64, f64)>,
}

#[derive(Clone, Copy, Debug)]
struct Range {
    lo: f64,
    hi: f64,
}

impl Range {
    fn of(values: impl Iterator<Item = f64>) -> Option<Range> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo > hi {
            return None;
        }
        if hi - lo < 1e-12 * lo.abs().max(1.0) {
            let pad = 0.5 * lo.abs().max(1.0) * 0.1;
            return Some(Range {
                lo: lo - pad,
                hi: hi + pad,
            });
        }
        let pad = 0.05 * (hi - lo);
        Some(Range {
            lo: lo - pad,
            hi: hi + pad,
        })
    }

    fn map(&self, v: f64, a: f64, b: f64) -> f64 {
        a + (v - self.lo) / (self.hi - self.lo) * (b - a)
    }
}

struct Panel {
    title: String,
    x_label: String,
    left_label: String,
    right_label: Option<String>,
    log_x: bool,
    series: Vec<Series>,
}

fn num(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e5).contains(&a) {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.3}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        if s == "-0" {
            "0".into()
        } else {
            s.to_string()
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

impl Panel {
    fn render(&self) -> String {
        let xt = |x: f64| if self.log_x { x.log10() } else { x };
        let x_range = Range::of(self.series.iter().flat_map(|s| s.points.iter().map(|p| xt(p.0))));
        let y_range = |axis| {
            Range::of(
                self.series
                    .iter()
                    .filter(|s| s.axis == axis)
                    .flat_map(|s| s.points.iter().map(|p| p.1)),
            )
        };
        let (xr, yl, yr) = (
            x_range.unwrap_or(Range { lo: 0.0, hi: 1.0 }),
            y_range(Axis::Left).unwrap_or(Range { lo: 0.0, hi: 1.0 }),
            y_range(Axis::Right),
        );
        let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, HEIGHT - BOTTOM, TOP);

        let mut o = String::new();
        let _ = writeln!(
            o,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(o, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            o,
            r#"<text x="{:.2}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
            (x0 + x1) / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            o,
            r#"<rect x="{x0:.2}" y="{y1:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
            x1 - x0,
            y0 - y1
        );
        for i in 0..=TICKS {
            let f = i as f64 / TICKS as f64;
            let xv = xr.lo + f * (xr.hi - xr.lo);
            let px = xr.map(xv, x0, x1);
            let shown = if self.log_x { 10f64.powf(xv) } else { xv };
            let _ = writeln!(
                o,
                r#"<line x1="{px:.2}" y1="{y0:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                y0 + 4.0,
                y0 + 16.0,
                num(shown)
            );
            let yv = yl.lo + f * (yl.hi - yl.lo);
            let py = yl.map(yv, y0, y1);
            let _ = writeln!(
                o,
                r#"<line x1="{:.2}" y1="{py:.2}" x2="{x0:.2}" y2="{py:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
                x0 - 4.0,
                x0 - 6.0,
                py + 4.0,
                num(yv)
            );
            if let Some(yr) = yr {
                let yv = yr.lo + f * (yr.hi - yr.lo);
                let py = yr.map(yv, y0, y1);
                let _ = writeln!(
                    o,
                    r#"<line x1="{x1:.2}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="black"/><text x="{:.2}" y="{:.2}">{}</text>"#,
                    x1 + 4.0,
                    x1 + 6.0,
                    py + 4.0,
                    num(yv)
                );
            }
        }
        let _ = writeln!(
            o,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            o,
            r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(&self.left_label)
        );
        if let (Some(label), Some(_)) = (&self.right_label, yr) {
            let rx = x1 + 58.0;
            let _ = writeln!(
                o,
                r#"<text x="{rx:.2}" y="{:.2}" text-anchor="middle" transform="rotate(90 {rx:.2} {:.2})">{}</text>"#,
                (y0 + y1) / 2.0,
                (y0 + y1) / 2.0,
                escape(label)
            );
        }

        for (k, s) in self.series.iter().enumerate() {
            let colour = PALETTE[k % PALETTE.len()];
            let yr = match s.axis {
                Axis::Left => yl,
                Axis::Right => yr.expect("right-axis series present"),
            };
            let pts: Vec<(f64, f64)> = s
                .points
                .iter()
                .map(|&(x, y)| (xr.map(xt(x), x0, x1), yr.map(y, y0, y1)))
                .collect();
            let dash = if s.dashed { r#" stroke-dasharray="5,3""# } else { "" };
            let _ = writeln!(o, r#"<g class="series" data-label="{}">"#, escape(&s.label));
            if s.line {
                let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
                let _ = writeln!(
                    o,
                    r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"{dash}/>"#,
                    path.join(" ")
                );
            }
            for (x, y) in &pts {
                let _ = writeln!(o, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{colour}"/>"#);
            }
            if !s.line {
                for ((x, y), _) in pts.iter().zip(&s.points) {
                    let _ = writeln!(
                        o,
                        r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
                        x + 5.0,
                        y - 5.0,
                        escape(&s.label)
                    );
                }
            }
            let _ = writeln!(o, "</g>");
            let ly = TOP + 12.0 + 14.0 * k as f64;
            let lx = WIDTH - RIGHT + 75.0;
            let _ = writeln!(
                o,
                r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{colour}" stroke-width="2"{dash}/><text x="{:.2}" y="{:.2}" font-size="9">{}</text>"#,
                lx + 14.0,
                lx + 18.0,
                ly + 3.0,
                escape(&s.label)
            );
        }
        o.push_str("</svg>\n");
        o
    }
}

fn cell_label(r: &ExperimentRecord) -> String {
    format!("{} {} {} s{}", r.algorithm, r.depth, r.norm, r.seed)
}

/// Records grouped by fingerprint, each group in epoch order.
fn by_cell(records: &[ExperimentRecord]) -> BTreeMap<&str, Vec<&ExperimentRecord>> {
    let mut m: BTreeMap<&str, Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in records {
        m.entry(r.fingerprint.as_str()).or_default().push(r);
    }
    for v in m.values_mut() {
        v.sort_by_key(|r| r.epoch);
    }
    m
}

fn head_diversity(set: &RecordSet, r: &ExperimentRecord) -> f64 {
    set.diversity(r, Tap::Head, set.s()[0]).unwrap_or(f64::NAN)
}

fn epoch_curves(set: &RecordSet) -> Vec<(String, Panel)> {
    let s = set.s()[0];
    let mut widths: Vec<usize> = set.records().iter().map(|r| r.width).collect();
    widths.sort_unstable();
    widths.dedup();
    widths
        .into_iter()
        .map(|w| {
            let subset: Vec<ExperimentRecord> = set.records().iter().filter(|r| r.width == w).cloned().collect();
            let mut series = Vec::new();
            for cell in by_cell(&subset).values() {
                let name = cell_label(cell[0]);
                series.push(Series {
                    label: format!("{name} error"),
                    axis: Axis::Left,
                    dashed: false,
                    line: true,
                    points: cell.iter().map(|r| (r.epoch as f64, r.test_error)).collect(),
                });
                for tap in Tap::ALL {
                    series.push(Series {
                        label: format!("{name} {tap}"),
                        axis: Axis::Right,
                        dashed: true,
                        line: true,
                        points: cell
                            .iter()
                            .map(|r| (r.epoch as f64, set.diversity(r, tap, s).unwrap_or(f64::NAN)))
                            .collect(),
                    });
                }
            }
            let panel = Panel {
                title: format!("Test error and diversity vs epoch, width {w}"),
                x_label: "epoch".into(),
                left_label: "test error".into(),
                right_label: Some(format!("diversity (s = {s})")),
                log_x: false,
                series,
            };
            (format!("epoch_curves_w{w}.svg"), panel)
        })
        .collect()
}

fn final_records(set: &RecordSet) -> Vec<&ExperimentRecord> {
    by_cell(set.records())
        .values()
        .map(|v| *v.last().expect("non-empty group"))
        .collect()
}

fn size_scan(set: &RecordSet) -> Vec<(String, Panel)> {
    let s = set.s()[0];
    let mut groups: BTreeMap<String, Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in final_records(set) {
        groups.entry(format!("{} {}", r.algorithm, r.norm)).or_default().push(r);
    }
    let mut series = Vec::new();
    for (name, mut rs) in groups {
        rs.sort_by(|a, b| (a.params, a.seed, &a.fingerprint).cmp(&(b.params, b.seed, &b.fingerprint)));
        series.push(Series {
            label: format!("{name} error"),
            axis: Axis::Left,
            dashed: false,
            line: true,
            points: rs.iter().map(|r| (r.params as f64, r.test_error)).collect(),
        });
        series.push(Series {
            label: format!("{name} head diversity"),
            axis: Axis::Right,
            dashed: true,
            line: true,
            points: rs.iter().map(|r| (r.params as f64, head_diversity(set, r))).collect(),
        });
    }
    let panel = Panel {
        title: "Final test error and head diversity vs parameter count".into(),
        x_label: "parameters (log scale)".into(),
        left_label: "test error".into(),
        right_label: Some(format!("head diversity (s = {s})")),
        log_x: true,
        series,
    };
    vec![("size_scan.svg".into(), panel)]
}

fn algo_scatter(set: &RecordSet) -> Vec<(String, Panel)> {
    let s = set.s()[0];
    let mut groups: BTreeMap<String, Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in final_records(set) {
        groups.entry(r.algorithm.to_string()).or_default().push(r);
    }
    let series = groups
        .into_iter()
        .map(|(name, rs)| {
            let n = rs.len() as f64;
            let div = rs.iter().map(|r| head_diversity(set, r)).sum::<f64>() / n;
            let err = rs.iter().map(|r| r.test_error).sum::<f64>() / n;
            Series {
                label: name,
                axis: Axis::Left,
                dashed: false,
                line: false,
                points: vec![(div, err)],
            }
        })
        .collect();
    let panel = Panel {
        title: "Final test error vs head diversity by algorithm".into(),
        x_label: format!("head diversity (s = {s})"),
        left_label: "test error".into(),
        right_label: None,
        log_x: false,
        series,
    };
    vec![("algo_scatter.svg".into(), panel)]
}

/// Renders one kind of figure as SVG text, keyed by file name.
pub fn render_plots(records: &RecordSet, kind: PlotKind) -> Result<Vec<(String, String)>> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records to plot".into()));
    }
    if records.s().is_empty() {
        return Err(Error::InvalidArgument("records carry no diversity columns".into()));
    }
    let panels = match kind {
        PlotKind::EpochCurves => epoch_curves(records),
        PlotKind::SizeScan => size_scan(records),
        PlotKind::AlgoScatter => algo_scatter(records),
    };
    Ok(panels.into_iter().map(|(name, p)| (name, p.render())).collect())
}

/// Writes the figures of `kind` into `out_dir` and returns their paths.
pub fn emit_plots(records: &RecordSet, kind: PlotKind, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let rendered = render_plots(records, kind)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
    let mut paths = Vec::new();
    for (name, svg) in rendered {
        let path = out_dir.join(name);
        fs::write(&path, svg).map_err(|e| Error::file(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
