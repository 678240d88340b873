//! Self-contained SVG rendering of one forecast.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use patchfm::eval::{parse_forecast_jsonl, ForecastRecord};
use patchfm::series::{load_jsonl, TimeSeries};

use crate::{usage, Failure};

const WIDTH: f64 = 900.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;

pub fn escape_xml(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            // Not representable in XML 1.0.
            c if (c as u32) < 0x20 && !matches!(c, '\t' | '\n' | '\r') => out.push('\u{FFFD}'),
            c => out.push(c),
        }
    }
    out
}

/// Indices `(lo, hi)` of the widest level pair symmetric about 0.5.
pub fn outer_band(levels: &[f64]) -> Option<(usize, usize)> {
    let k = levels.len();
    (0..k / 2).find_map(|i| {
        (i + 1..k)
            .rev()
            .find(|&j| (levels[i] + levels[j] - 1.0).abs() < 1e-9)
            .map(|j| (i, j))
    })
}

/// Level closest to 0.5.
fn median_index(levels: &[f64]) -> usize {
    (0..levels.len())
        .min_by(|&a, &b| (levels[a] - 0.5).abs().total_cmp(&(levels[b] - 0.5).abs()))
        .expect("validated forecasts have levels")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn x(&self, t: f64) -> f64 {
        MARGIN + (t - self.x0) / (self.x1 - self.x0).max(1e-12) * (WIDTH - 2.0 * MARGIN)
    }

    fn y(&self, v: f64) -> f64 {
        HEIGHT - MARGIN - (v - self.y0) / (self.y1 - self.y0).max(1e-12) * (HEIGHT - 2.0 * MARGIN)
    }
}

/// Path data for a line, broken at missing values.
fn line_path(frame: &Frame, points: impl Iterator<Item = (f64, Option<f64>)>) -> String {
    let mut d = String::new();
    let mut pen_down = false;
    for (t, v) in points {
        match v {
            Some(v) => {
                let cmd = if pen_down { 'L' } else { 'M' };
                let _ = write!(d, "{cmd}{:.2},{:.2} ", frame.x(t), frame.y(v));
                pen_down = true;
            }
            None => pen_down = false,
        }
    }
    d.trim_end().to_string()
}

pub fn render_svg(rec: &ForecastRecord, truth: Option<&TimeSeries>) -> String {
    let h = rec.horizon();
    let off = rec.offset as f64;
    let band = outer_band(&rec.levels);
    let med = median_index(&rec.levels);

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut x0 = off;
    let mut x1 = off + h as f64 - 1.0;
    for v in rec.values.iter().flatten() {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if let Some(s) = truth {
        x0 = 0.0;
        x1 = x1.max(s.len() as f64 - 1.0);
        for v in s.values.iter().flatten().filter(|v| v.is_finite()) {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    let frame = Frame {
        x0,
        x1: x1.max(x0 + 1.0),
        y0: lo - pad,
        y1: hi + pad,
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"  <title>{}</title>"#, escape_xml(&rec.id));
    let _ = writeln!(svg, r#"  <rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r##"  <rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="#999" stroke-width="1"/>"##,
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    );

    if let Some((a, b)) = band {
        let mut d = String::new();
        for t in 0..h {
            let cmd = if t == 0 { 'M' } else { 'L' };
            let _ = write!(d, "{cmd}{:.2},{:.2} ", frame.x(off + t as f64), frame.y(rec.values[b][t]));
        }
        for t in (0..h).rev() {
            let _ = write!(d, "L{:.2},{:.2} ", frame.x(off + t as f64), frame.y(rec.values[a][t]));
        }
        d.push('Z');
        let _ = writeln!(
            svg,
            r##"  <path class="band" d="{d}" fill="#4a90d9" fill-opacity="0.25" stroke="none"><title>{} to {}</title></path>"##,
            rec.levels[a], rec.levels[b]
        );
    }
    if let Some(s) = truth {
        let d = line_path(&frame, s.values.iter().enumerate().map(|(t, v)| (t as f64, v.filter(|x| x.is_finite()))));
        if !d.is_empty() {
            let _ = writeln!(svg, r##"  <path class="truth" d="{d}" fill="none" stroke="#222" stroke-width="1.2"/>"##);
        }
    }
    let d = line_path(&frame, rec.values[med].iter().enumerate().map(|(t, v)| (off + t as f64, Some(*v))));
    let _ = writeln!(
        svg,
        r##"  <path class="median" d="{d}" fill="none" stroke="#1f5fa8" stroke-width="1.6"><title>q{}</title></path>"##,
        rec.levels[med]
    );
    let xs = frame.x(off);
    let _ = writeln!(
        svg,
        r##"  <line class="forecast-start" x1="{xs:.2}" y1="{MARGIN}" x2="{xs:.2}" y2="{:.2}" stroke="#c33" stroke-dasharray="4 3"/>"##,
        HEIGHT - MARGIN
    );
    let _ = writeln!(
        svg,
        r#"  <text x="{MARGIN}" y="{:.2}" font-family="sans-serif" font-size="13">{}</text>"#,
        MARGIN - 14.0,
        escape_xml(&format!("{} ({} @ {}, horizon {h})", rec.id, rec.start, rec.offset))
    );
    let _ = writeln!(
        svg,
        r#"  <text x="{MARGIN}" y="{:.2}" font-family="sans-serif" font-size="11">{:.4}</text>"#,
        HEIGHT - MARGIN + 16.0,
        frame.y0
    );
    let _ = writeln!(
        svg,
        r#"  <text x="4" y="{:.2}" font-family="sans-serif" font-size="11">{:.4}</text>"#,
        MARGIN + 4.0,
        frame.y1
    );
    svg.push_str("</svg>\n");
    svg
}

pub fn plot(forecast: &Path, truth: Option<&Path>, id: Option<&str>, out: &Path) -> Result<(), Failure> {
    let text = fs::read_to_string(forecast)?;
    let records = parse_forecast_jsonl(&text)?;
    let rec = match id {
        Some(id) => records
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| usage(format!("no forecast for `{id}` in {}", forecast.display())))?,
        None => records
            .first()
            .ok_or_else(|| usage(format!("{} holds no forecasts", forecast.display())))?,
    };
    let truth = match truth {
        Some(p) => {
            let series = load_jsonl(p)?;
            let s = series
                .into_iter()
                .find(|s| s.id == rec.id)
                .ok_or_else(|| usage(format!("no series `{}` in {}", rec.id, p.display())))?;
            Some(s)
        }
        None => None,
    };
    fs::write(out, render_svg(rec, truth.as_ref()))?;
    println!("wrote {}", out.display());
    Ok(())
}
