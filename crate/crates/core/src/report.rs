//! Accuracy-versus-speed scatter plots and small serialization helpers
//! shared by the command-line tool.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::nas::{Anchor, PlotPoint};

pub const SVG_WIDTH: u32 = 800;
pub const SVG_HEIGHT: u32 = 600;

const MARGIN_LEFT: f64 = 80.0;
const MARGIN_RIGHT: f64 = 30.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 70.0;

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("CSV lacks a column for {0}")]
    MissingColumn(&'static str),
    #[error("CSV line {line}: {detail}")]
    Malformed { line: usize, detail: String },
}

/// Accepted spellings of each plotted column, first match wins.
const MAP_COLUMNS: [&str; 3] = ["map_mean", "mAP", "map"];
const SPEED_COLUMNS: [&str; 3] = ["batches_per_sec", "batches_per_second", "speed"];
const LABEL_COLUMNS: [&str; 3] = ["key", "config_id", "plan"];

/// Read scatter points from any CSV carrying an mAP column and a speed
/// column (trials files, cost tables, hand-written tables). An empty input
/// yields no points.
pub fn points_from_csv(text: &str) -> Result<Vec<PlotPoint>, ReportError> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = rd
        .headers()
        .map_err(|e| ReportError::Malformed { line: 1, detail: e.to_string() })?
        .clone();
    let find = |names: &[&str]| names.iter().find_map(|n| header.iter().position(|h| h == *n));
    let map_col = find(&MAP_COLUMNS).ok_or(ReportError::MissingColumn("mAP"))?;
    let speed_col = find(&SPEED_COLUMNS).ok_or(ReportError::MissingColumn("batches/sec"))?;
    let label_col = find(&LABEL_COLUMNS);
    let anchor_col = find(&["anchor"]);

    let mut points = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| ReportError::Malformed { line, detail: e.to_string() })?;
        let num = |c: usize, what: &str| -> Result<f64, ReportError> {
            let v = rec.get(c).unwrap_or("");
            v.parse::<f64>().map_err(|_| ReportError::Malformed {
                line,
                detail: format!("bad {what} value {v:?}"),
            })
        };
        let anchor = match anchor_col.and_then(|c| rec.get(c)).unwrap_or("") {
            "baseline" => Some(Anchor::Baseline),
            "deep" => Some(Anchor::Deep),
            _ => None,
        };
        points.push(PlotPoint {
            config_id: label_col.and_then(|c| rec.get(c)).unwrap_or("").to_string(),
            map: num(map_col, "mAP")?,
            batches_per_second: num(speed_col, "speed")?,
            anchor,
        });
    }
    Ok(points)
}

/// Round an axis span outward to a step from the 1-2-5 series so that
/// ticks land on readable values.
fn nice_axis(lo: f64, hi: f64) -> (f64, f64, f64) {
    let span = if hi > lo { hi - lo } else { lo.abs().max(1.0) * 0.1 };
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let (a, b) = if hi > lo { (lo, hi) } else { (lo - span / 2.0, lo + span / 2.0) };
    ((a / step).floor() * step, (b / step).ceil() * step, step)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn tick_label(v: f64, step: f64) -> String {
    let decimals = if step >= 1.0 { 0 } else { (-step.log10().floor()) as usize };
    format!("{v:.decimals$}")
}

/// Render an 800×600 scatter of mAP against batches/sec. Anchors are drawn
/// as larger squares and labelled. Points with non-finite coordinates are
/// skipped. Output bytes depend only on the input.
pub fn scatter_svg(points: &[PlotPoint], title: &str) -> String {
    let (w, h) = (SVG_WIDTH as f64, SVG_HEIGHT as f64);
    let (x0, x1) = (MARGIN_LEFT, w - MARGIN_RIGHT);
    let (y0, y1) = (h - MARGIN_BOTTOM, MARGIN_TOP);
    let finite: Vec<&PlotPoint> = points
        .iter()
        .filter(|p| p.map.is_finite() && p.batches_per_second.is_finite())
        .collect();

    let bounds = |f: fn(&PlotPoint) -> f64, default: (f64, f64)| {
        if finite.is_empty() {
            return default;
        }
        let lo = finite.iter().map(|p| f(p)).fold(f64::INFINITY, f64::min);
        let hi = finite.iter().map(|p| f(p)).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let (sx_lo, sx_hi, sx_step) = {
        let (a, b) = bounds(|p| p.batches_per_second, (0.0, 1.0));
        nice_axis(a, b)
    };
    let (my_lo, my_hi, my_step) = {
        let (a, b) = bounds(|p| p.map, (0.0, 1.0));
        nice_axis(a, b)
    };
    let px = |v: f64| x0 + (v - sx_lo) / (sx_hi - sx_lo) * (x1 - x0);
    let py = |v: f64| y0 + (v - my_lo) / (my_hi - my_lo) * (y1 - y0);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="16">{}</text>"#, w / 2.0, escape(title));

    // grid and ticks
    let mut v = sx_lo;
    while v <= sx_hi + sx_step * 1e-9 {
        let x = px(v);
        let _ = writeln!(s, r##"<line x1="{x:.1}" y1="{y0:.1}" x2="{x:.1}" y2="{y1:.1}" stroke="#e0e0e0"/>"##);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, y0 + 18.0, tick_label(v, sx_step));
        v += sx_step;
    }
    let mut v = my_lo;
    while v <= my_hi + my_step * 1e-9 {
        let y = py(v);
        let _ = writeln!(s, r##"<line x1="{x0:.1}" y1="{y:.1}" x2="{x1:.1}" y2="{y:.1}" stroke="#e0e0e0"/>"##);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, x0 - 6.0, y + 4.0, tick_label(v, my_step));
        v += my_step;
    }

    let _ = writeln!(s, r#"<line x1="{x0:.1}" y1="{y0:.1}" x2="{x1:.1}" y2="{y0:.1}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0:.1}" y1="{y0:.1}" x2="{x0:.1}" y2="{y1:.1}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">batches/sec</text>"#, (x0 + x1) / 2.0, h - 24.0);
    let _ = writeln!(
        s,
        r#"<text x="20" y="{:.1}" text-anchor="middle" transform="rotate(-90 20 {:.1})">mAP</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );

    // regular trials first so anchors stay visible on top
    for p in finite.iter().filter(|p| p.anchor.is_none()) {
        let _ = writeln!(
            s,
            r##"<circle cx="{:.1}" cy="{:.1}" r="4" fill="#1f77b4" fill-opacity="0.8"><title>{}</title></circle>"##,
            px(p.batches_per_second),
            py(p.map),
            escape(&p.config_id)
        );
    }
    for p in finite.iter().filter(|p| p.anchor.is_some()) {
        let (x, y) = (px(p.batches_per_second), py(p.map));
        let name = p.anchor.map(Anchor::name).unwrap_or_default();
        let _ = writeln!(
            s,
            r##"<rect x="{:.1}" y="{:.1}" width="12" height="12" fill="#d62728"><title>{}</title></rect>"##,
            x - 6.0,
            y - 6.0,
            escape(&p.config_id)
        );
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{name}</text>"#, x + 9.0, y - 8.0);
    }
    if finite.is_empty() {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">no data</text>"#, (x0 + x1) / 2.0, (y0 + y1) / 2.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Pretty JSON with a trailing newline; struct fields keep declaration order
/// so the bytes are stable.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}
