//! Self-contained SVG charts: polyline plots and a rect heatmap.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 50.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        esc(title)
    );
}

fn finite_range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
    if lo > hi {
        return None;
    }
    if hi - lo <= 1e-300 {
        let pad = if lo == 0.0 { 1.0 } else { 0.1 * lo.abs() };
        return Some((lo - pad, hi + pad));
    }
    Some((lo, hi))
}

fn axes(out: &mut String, xr: (f64, f64), yr: (f64, f64), xlabel: &str, ylabel: &str) {
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(
        out,
        r#"<rect x="{x0}" y="{y0}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
        x1 - x0,
        y1 - y0
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let px = x0 + f * (x1 - x0);
        let py = y1 - f * (y1 - y0);
        let _ = writeln!(
            out,
            r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            y1 + 16.0,
            tick(xr.0 + f * (xr.1 - xr.0))
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            x0 - 6.0,
            py + 4.0,
            tick(yr.0 + f * (yr.1 - yr.0))
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        H - 12.0,
        esc(xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        esc(ylabel)
    );
}

fn tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Line chart of `y` against `x`. Non-finite points break the line.
pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, x: &[f64], y: &[f64]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let xr = finite_range(x.iter().copied()).unwrap_or((0.0, 1.0));
    let yr = finite_range(y.iter().copied()).unwrap_or((0.0, 1.0));
    axes(&mut out, xr, yr, xlabel, ylabel);
    let sx = |v: f64| LEFT + (v - xr.0) / (xr.1 - xr.0) * (W - RIGHT - LEFT);
    let sy = |v: f64| H - BOTTOM - (v - yr.0) / (yr.1 - yr.0) * (H - BOTTOM - TOP);
    // long traces are thinned to at most ~2000 vertices
    let stride = (x.len() / 2000).max(1);
    let mut segment: Vec<String> = vec![];
    let flush = |segment: &mut Vec<String>, out: &mut String| {
        if segment.len() > 1 {
            let _ = writeln!(
                out,
                r##"<polyline fill="none" stroke="#1f5fa8" stroke-width="1.5" points="{}"/>"##,
                segment.join(" ")
            );
        }
        segment.clear();
    };
    for (i, (&a, &b)) in x.iter().zip(y).enumerate() {
        if i % stride != 0 && i + 1 != x.len() {
            continue;
        }
        if a.is_finite() && b.is_finite() {
            segment.push(format!("{:.2},{:.2}", sx(a), sy(b)));
        } else {
            flush(&mut segment, &mut out);
        }
    }
    flush(&mut segment, &mut out);
    out.push_str("</svg>\n");
    out
}

/// Blue, white, red by sign, saturating at `scale`.
fn colour(v: f64, scale: f64) -> String {
    if !v.is_finite() {
        return "#808080".into();
    }
    let s = (v / scale).clamp(-1.0, 1.0);
    let fade = |c: f64| (255.0 * (1.0 - s.abs()) + c * s.abs()).round() as u8;
    let (r, g, b) = if s >= 0.0 {
        (fade(178.0), fade(24.0), fade(43.0))
    } else {
        (fade(33.0), fade(102.0), fade(172.0))
    };
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Heatmap of `rows[k][i]` over time `t[k]` (vertical) and space `x[i]`.
pub fn heatmap(title: &str, x: &[f64], t: &[f64], rows: &[Vec<f64>]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let xr = (
        x.first().copied().unwrap_or(0.0),
        x.last().copied().unwrap_or(1.0),
    );
    let tr = finite_range(t.iter().copied()).unwrap_or((0.0, 1.0));
    let scale = rows
        .iter()
        .flatten()
        .filter(|v| v.is_finite())
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let cols = x.len().min(120);
    let nrows = rows.len().min(200);
    let (pw, ph) = (W - RIGHT - LEFT, H - BOTTOM - TOP);
    let (cw, rh) = (pw / cols.max(1) as f64, ph / nrows.max(1) as f64);
    for r in 0..nrows {
        let src = &rows[r * rows.len() / nrows];
        let y = H - BOTTOM - (r + 1) as f64 * rh;
        for c in 0..cols {
            let v = src[c * src.len() / cols];
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                LEFT + c as f64 * cw,
                cw + 0.05,
                rh + 0.05,
                colour(v, scale)
            );
        }
    }
    axes(&mut out, xr, tr, "x", "t");
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="end">colour scale ±{}</text>"#,
        W - RIGHT,
        TOP - 4.0,
        tick(scale)
    );
    out.push_str("</svg>\n");
    out
}
