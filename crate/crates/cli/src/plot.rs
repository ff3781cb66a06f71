//! Static SVG charts and particle frames.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use pfrnn::maze::{CellKind, MazeMap};
use pfrnn::train::Frame;

use crate::config::ConfigError;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: (f64, f64, f64, f64) = (60.0, 20.0, 30.0, 50.0); // left, right, top, bottom
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// A parsed CSV: header plus string rows.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut r = csv::ReaderBuilder::new().flexible(false).from_reader(text.as_bytes());
        let header: Vec<String> = r
            .headers()
            .map_err(|e| ConfigError(format!("unreadable CSV header: {e}")))?
            .iter()
            .map(str::to_string)
            .collect();
        if header.iter().all(|h| h.is_empty()) {
            return Err(ConfigError("metrics CSV is empty".into()));
        }
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<Result<Vec<Vec<String>>, _>>()
            .map_err(|e| ConfigError(format!("malformed CSV: {e}")))?;
        if rows.is_empty() {
            return Err(ConfigError("metrics CSV has no data rows".into()));
        }
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    fn require(&self, name: &str) -> Result<usize, ConfigError> {
        self.column(name)
            .ok_or_else(|| ConfigError(format!("metrics CSV is missing column {name:?} (have {:?})", self.header)))
    }
}

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if (hi - lo).abs() < 1e-12 {
        let pad = if lo.abs() > 0.0 { lo.abs() * 0.1 } else { 1.0 };
        (lo - pad, hi + pad)
    } else {
        (lo, hi)
    }
}

struct Frame2d {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame2d {
    fn px(&self, x: f64) -> f64 {
        MARGIN.0 + (x - self.x.0) / (self.x.1 - self.x.0) * (W - MARGIN.0 - MARGIN.1)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN.3 - (y - self.y.0) / (self.y.1 - self.y.0) * (H - MARGIN.2 - MARGIN.3)
    }

    fn axes(&self, svg: &mut String, title: &str, xlabel: &str, ylabel: &str, xticks: bool) {
        let (x0, x1, y0, y1) = (MARGIN.0, W - MARGIN.1, MARGIN.2, H - MARGIN.3);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
            W / 2.0,
            esc(title)
        );
        let _ = writeln!(svg, r#"<line class="axis" x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="black"/>"#);
        let _ = writeln!(svg, r#"<line class="axis" x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
        for i in 0..=4 {
            let v = self.y.0 + (self.y.1 - self.y.0) * i as f64 / 4.0;
            let y = self.py(v);
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{:.1}" text-anchor="end" font-size="10">{}</text>"#,
                x0 - 4.0,
                y + 3.0,
                fmt_num(v)
            );
            if xticks {
                let v = self.x.0 + (self.x.1 - self.x.0) * i as f64 / 4.0;
                let _ = writeln!(
                    svg,
                    r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="10">{}</text>"#,
                    self.px(v),
                    y1 + 14.0,
                    fmt_num(v)
                );
            }
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
            (x0 + x1) / 2.0,
            H - 8.0,
            esc(xlabel)
        );
        let _ = writeln!(
            svg,
            r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            esc(ylabel)
        );
    }
}

fn fmt_num(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn open(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    )
}

fn parse_cell(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Line chart of `column` against `epoch`, one line per `run` (if present).
pub fn loss_curves(table: &Table, column: &str) -> Result<String, ConfigError> {
    let ep = table.require("epoch")?;
    let col = table.require(column)?;
    let run = table.column("run");
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for row in &table.rows {
        let name = run.map(|r| row[r].clone()).unwrap_or_default();
        if let (Some(x), Some(y)) = (parse_cell(&row[ep]), parse_cell(&row[col])) {
            series.entry(name).or_default().push((x, y));
        }
    }
    let points = || series.values().flatten();
    if points().next().is_none() {
        return Err(ConfigError(format!("column {column:?} has no numeric values")));
    }
    let fold = |f: fn(&(f64, f64)) -> f64| {
        points().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (xr, yr) = (fold(|p| p.0), fold(|p| p.1));
    let frame = Frame2d {
        x: nice_range(xr.0, xr.1),
        y: nice_range(yr.0.min(0.0), yr.1),
    };
    let mut svg = open(W, H);
    frame.axes(&mut svg, &format!("{column} by epoch"), "epoch", column, true);
    for (i, (name, pts)) in series.iter_mut().enumerate() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="series" data-run="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            esc(name),
            path.join(" ")
        );
        let ly = MARGIN.2 + 14.0 * (i as f64 + 1.0);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{ly}" font-size="10" fill="{color}">{}</text>"#,
            W - MARGIN.1 - 150.0,
            esc(if name.is_empty() { column } else { name })
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Bar chart of `column` per `label`, with `std_column` as error bars when
/// present.
pub fn bars(table: &Table, column: &str, std_column: Option<&str>) -> Result<String, ConfigError> {
    let label = table.require("label")?;
    let col = table.require(column)?;
    let sd = std_column.and_then(|c| table.column(c));
    let items: Vec<(String, f64, f64)> = table
        .rows
        .iter()
        .filter_map(|row| {
            let v = parse_cell(&row[col])?;
            let s = sd.and_then(|i| parse_cell(&row[i])).unwrap_or(0.0);
            Some((row[label].clone(), v, s))
        })
        .collect();
    if items.is_empty() {
        return Err(ConfigError(format!("column {column:?} has no numeric values")));
    }
    let top = items.iter().map(|(_, v, s)| v + s).fold(0.0, f64::max);
    let frame = Frame2d {
        x: (0.0, items.len() as f64),
        y: nice_range(0.0, top * 1.05),
    };
    let mut svg = open(W, H);
    frame.axes(&mut svg, &format!("{column} by run"), "", column, false);
    for (i, (name, v, s)) in items.iter().enumerate() {
        let (x0, x1) = (frame.px(i as f64 + 0.15), frame.px(i as f64 + 0.85));
        let (y, base) = (frame.py(*v), frame.py(0.0));
        let _ = writeln!(
            svg,
            r#"<rect class="bar" data-label="{}" x="{x0:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
            esc(name),
            x1 - x0,
            base - y,
            PALETTE[i % PALETTE.len()]
        );
        if *s > 0.0 {
            let xm = (x0 + x1) / 2.0;
            let _ = writeln!(
                svg,
                r#"<line class="errorbar" x1="{xm:.2}" y1="{:.2}" x2="{xm:.2}" y2="{:.2}" stroke="black"/>"#,
                frame.py(v - s),
                frame.py(v + s)
            );
        }
        let xm = (x0 + x1) / 2.0;
        let ly = H - MARGIN.3 + 12.0;
        let _ = writeln!(
            svg,
            r#"<text x="{xm:.2}" y="{ly}" font-size="9" text-anchor="end" transform="rotate(-30 {xm:.2} {ly})">{}</text>"#,
            esc(name)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Pick a chart for whatever metrics CSV this is.
pub fn metrics_chart(text: &str, column: Option<&str>) -> Result<String, ConfigError> {
    let table = Table::parse(text)?;
    if table.column("epoch").is_some() {
        loss_curves(&table, column.unwrap_or("train_loss"))
    } else if table.column("label").is_some() {
        let column = column.unwrap_or("test_last_step_mse");
        let std = (column == "test_last_step_mse").then_some("test_last_step_std");
        bars(&table, column, std)
    } else {
        Err(ConfigError(format!(
            "metrics CSV is missing columns: need `epoch` (per-epoch metrics) or `label` (run summaries), have {:?}",
            table.header
        )))
    }
}

const CELL_PX: f64 = 48.0;

/// One localization frame: maze, true pose, mean prediction and one marker
/// per particle (area proportional to its weight).
pub fn particle_frame(map: &MazeMap, frame: &Frame, step: usize) -> String {
    let n = map.size();
    let side = n as f64 * CELL_PX;
    let px = |x: f64| x * CELL_PX;
    let py = |y: f64| side - y * CELL_PX;
    let pose = |t: &[f64; 4]| (t[0] * n as f64, t[1] * n as f64, t[3].atan2(t[2]));
    let mut svg = open(side, side + 24.0);
    for r in 0..n {
        for c in 0..n {
            let fill = match map.cell(r, c) {
                CellKind::Free => continue,
                CellKind::Gray => "#9a9a9a",
                CellKind::Black => "#202020",
            };
            let _ = writeln!(
                svg,
                r#"<rect class="wall" x="{}" y="{}" width="{CELL_PX}" height="{CELL_PX}" fill="{fill}"/>"#,
                px(c as f64),
                py(r as f64 + 1.0)
            );
        }
    }
    for l in map.landmarks() {
        let _ = writeln!(
            svg,
            r##"<circle class="landmark" cx="{:.2}" cy="{:.2}" r="3" fill="#e0b000"/>"##,
            px(l[0]),
            py(l[1])
        );
    }
    let k = frame.particles.len().max(1) as f64;
    for (p, w) in frame.particles.iter().zip(frame.weights.iter().chain(std::iter::repeat(&1.0))) {
        let (x, y, _) = pose(p);
        let r = 1.5 + 4.0 * (w * k).clamp(0.0, 4.0).sqrt();
        let _ = writeln!(
            svg,
            r##"<circle class="particle" cx="{:.2}" cy="{:.2}" r="{r:.2}" fill="#1f77b4" fill-opacity="0.5"/>"##,
            px(x),
            py(y)
        );
    }
    for (class, t, color) in [("truth", &frame.truth, "#2ca02c"), ("mean", &frame.mean, "#d62728")] {
        let (x, y, th) = pose(t);
        let (hx, hy) = (x + 0.4 * th.cos(), y + 0.4 * th.sin());
        let _ = writeln!(
            svg,
            r#"<g class="{class}"><circle cx="{:.2}" cy="{:.2}" r="6" fill="none" stroke="{color}" stroke-width="2"/><line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="2"/></g>"#,
            px(x),
            py(y),
            px(x),
            py(y),
            px(hx),
            py(hy)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="6" y="{}" font-size="12">step {step}: truth green, mean red, {} particles blue</text>"#,
        side + 16.0,
        frame.particles.len()
    );
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_chart_kind() {
        let curves = "run,epoch,train_loss\na,1,3.0\na,2,2.0\nb,1,4.0\n";
        assert!(metrics_chart(curves, None).unwrap().contains("polyline"));
        let bars = "label,test_last_step_mse,test_last_step_std\nx,0.5,0.1\ny,,\n";
        assert_eq!(metrics_chart(bars, None).unwrap().matches("class=\"bar\"").count(), 1);
        assert!(metrics_chart("foo,bar\n1,2\n", None).is_err());
        assert!(metrics_chart("", None).is_err());
        assert!(metrics_chart("run,epoch,train_loss\n", None).is_err());
        assert!(metrics_chart(curves, Some("nope")).is_err());
    }

    #[test]
    fn labels_are_escaped() {
        let svg = metrics_chart("label,test_last_step_mse\n<a&b>,1\n", None).unwrap();
        assert!(svg.contains("&lt;a&amp;b&gt;"));
    }
}
