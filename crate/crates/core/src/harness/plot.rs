use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// One labelled line.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotOptions {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
    pub width: u32,
    pub height: u32,
}

impl Default for PlotOptions {
    fn default() -> PlotOptions {
        PlotOptions { title: String::new(), x_label: "x".into(), y_label: "y".into(), log_y: false, width: 800, height: 500 }
    }
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Reads columns `x` and `y` (by header name) from a CSV file. Rows whose
/// `y` is not a finite number are dropped.
pub fn read_series(path: &Path, x: &str, y: &str) -> Result<Series> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::Data(format!("{}: no column `{name}` (have {})", path.display(), header.join(","))))
    };
    let (xi, yi) = (col(x)?, col(y)?);
    let mut points = Vec::new();
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        let parse = |i: usize| cells.get(i).and_then(|c| c.trim().parse::<f64>().ok());
        if let (Some(a), Some(b)) = (parse(xi), parse(yi)) {
            if a.is_finite() && b.is_finite() {
                points.push((a, b));
            }
        }
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("series");
    let label = match path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()) {
        Some(dir) if stem == "metrics" || stem == "epochs" => dir.to_string(),
        _ => stem.to_string(),
    };
    Ok(Series { label, points })
}

fn nice_ticks(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let raw = span / count as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= count as f64).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(t);
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-3) {
        format!("{v:.1e}")
    } else {
        format!("{}", (v * 1e6).round() / 1e6)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// A standalone SVG line chart: axes with ticks, one polyline per series
/// and a legend. With `log_y`, non-positive values are dropped and the y
/// axis is in powers of ten.
pub fn render_svg(series: &[Series], opts: &PlotOptions) -> Result<String> {
    let ty = |y: f64| if opts.log_y { y.log10() } else { y };
    let kept: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| s.points.iter().filter(|p| !opts.log_y || p.1 > 0.0).map(|&(x, y)| (x, ty(y))).collect())
        .collect();
    let all: Vec<(f64, f64)> = kept.iter().flatten().copied().collect();
    if all.is_empty() {
        return Err(Error::Data("nothing to plot".into()));
    }
    let (mut x0, mut x1, mut y0, mut y1) = all.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), &(x, y)| (a.min(x), b.max(x), c.min(y), d.max(y)),
    );
    if x1 == x0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 == y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let (w, h) = (f64::from(opts.width), f64::from(opts.height));
    let (left, right, top, bottom) = (80.0, 170.0, 40.0, 55.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    if !opts.title.is_empty() {
        let _ = writeln!(svg, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, left + pw / 2.0, escape(&opts.title));
    }
    let _ = writeln!(svg, r#"<g class="axes" stroke="black" stroke-width="1">"#);
    let _ = writeln!(svg, r#"<line x1="{left}" y1="{}" x2="{}" y2="{}"/>"#, top + ph, left + pw, top + ph);
    let _ = writeln!(svg, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}"/>"#, top + ph);
    let _ = writeln!(svg, "</g>");
    for t in nice_ticks(x0, x1, 6) {
        let x = sx(t);
        let _ = writeln!(svg, r#"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="black"/>"#, top + ph, top + ph + 5.0);
        let _ = writeln!(svg, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#, top + ph + 18.0, fmt_tick(t));
    }
    let y_ticks = if opts.log_y {
        let ticks: Vec<f64> = (y0.ceil() as i64..=y1.floor() as i64).map(|e| e as f64).collect();
        if ticks.is_empty() { nice_ticks(y0, y1, 5) } else { ticks }
    } else {
        nice_ticks(y0, y1, 6)
    };
    for t in y_ticks {
        let y = sy(t);
        let label = if opts.log_y { format!("1e{}", t.round() as i64) } else { fmt_tick(t) };
        let _ = writeln!(svg, r##"<line x1="{}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#dddddd"/>"##, left, left + pw);
        let _ = writeln!(svg, r#"<text x="{}" y="{:.2}" text-anchor="end">{label}</text>"#, left - 6.0, y + 4.0);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 12.0, escape(&opts.x_label));
    let y_label = if opts.log_y { format!("{} (log)", opts.y_label) } else { opts.y_label.clone() };
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">{1}</text>"#,
        top + ph / 2.0,
        escape(&y_label)
    );
    for (i, (s, pts)) in series.iter().zip(&kept).enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"><title>{}</title></polyline>"#,
            coords.join(" "),
            escape(&s.label)
        );
        let ly = top + 10.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(svg, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="3"/>"#, lx + 20.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, escape(&s.label));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Reads column `y` against column `x` from each CSV and writes one chart to `out`.
pub fn emit_plot(csvs: &[impl AsRef<Path>], x: &str, y: &str, out: &Path, log_y: bool) -> Result<()> {
    let series = csvs.iter().map(|p| read_series(p.as_ref(), x, y)).collect::<Result<Vec<_>>>()?;
    let opts = PlotOptions { x_label: x.into(), y_label: y.into(), log_y, ..PlotOptions::default() };
    std::fs::write(out, render_svg(&series, &opts)?)?;
    Ok(())
}
