//! Figure output: PNG heat maps of density maps and an SVG line chart of
//! RMSE against ground-truth count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use ilc_core::datamodel::Grid;

/// Nearest-neighbour upscale factor for heat maps.
pub const HEATMAP_SCALE: u32 = 8;

// Dark blue through teal to yellow.
const RAMP: [[f64; 3]; 5] = [
    [13.0, 8.0, 135.0],
    [84.0, 2.0, 163.0],
    [33.0, 145.0, 140.0],
    [122.0, 209.0, 81.0],
    [253.0, 231.0, 37.0],
];

fn colour(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let pos = t * (RAMP.len() - 1) as f64;
    let k = (pos.floor() as usize).min(RAMP.len() - 2);
    let f = pos - k as f64;
    let mut out = [0u8; 3];
    for (ch, o) in out.iter_mut().enumerate() {
        *o = (RAMP[k][ch] * (1.0 - f) + RAMP[k + 1][ch] * f).round() as u8;
    }
    out
}

/// Writes `grid` as a PNG, normalised to its maximum (negative values
/// shown as zero).
pub fn write_heatmap(grid: &Grid, path: &Path) -> Result<()> {
    let max = grid.as_slice().iter().copied().filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    let (h, w) = grid.shape();
    let img = image::RgbImage::from_fn(w as u32 * HEATMAP_SCALE, h as u32 * HEATMAP_SCALE, |x, y| {
        let v = grid.get((y / HEATMAP_SCALE) as usize, (x / HEATMAP_SCALE) as usize);
        image::Rgb(colour(if max > 0.0 { v / max } else { 0.0 }))
    });
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

/// Renders `(count -> (rmse, n))` as an SVG polyline with axes.
pub fn rmse_curve_svg(curve: &BTreeMap<u32, (f64, usize)>) -> String {
    let (width, height, margin) = (480.0, 320.0, 48.0);
    let max_count = curve.keys().last().copied().unwrap_or(0).max(1) as f64;
    let max_rmse = curve.values().map(|v| v.0).filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    let max_rmse = if max_rmse > 0.0 { max_rmse * 1.1 } else { 1.0 };
    let x = |c: f64| margin + c / max_count * (width - 2.0 * margin);
    let y = |r: f64| height - margin - r / max_rmse * (height - 2.0 * margin);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{l} {t} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#,
        l = margin,
        t = margin,
        b = height - margin,
        r = width - margin
    );
    for c in 0..=max_count as u32 {
        let px = x(f64::from(c));
        let _ = writeln!(
            s,
            r#"<line x1="{px:.1}" y1="{b}" x2="{px:.1}" y2="{t2}" stroke="black"/><text x="{px:.1}" y="{ty}" font-size="11" text-anchor="middle">{c}</text>"#,
            b = height - margin,
            t2 = height - margin + 4.0,
            ty = height - margin + 16.0
        );
    }
    for k in 0..=4 {
        let r = max_rmse * f64::from(k) / 4.0;
        let py = y(r);
        let _ = writeln!(
            s,
            r#"<line x1="{l2}" y1="{py:.1}" x2="{margin}" y2="{py:.1}" stroke="black"/><text x="{tx}" y="{ty:.1}" font-size="11" text-anchor="end">{r:.2}</text>"#,
            l2 = margin - 4.0,
            tx = margin - 6.0,
            ty = py + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{cx}" y="{by}" font-size="12" text-anchor="middle">ground-truth count</text>"#,
        cx = width / 2.0,
        by = height - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{cy}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {cy})">RMSE</text>"#,
        cy = height / 2.0
    );
    let points: Vec<String> = curve
        .iter()
        .filter(|(_, v)| v.0.is_finite())
        .map(|(&c, v)| format!("{:.1},{:.1}", x(f64::from(c)), y(v.0)))
        .collect();
    let _ = writeln!(
        s,
        r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
        points.join(" ")
    );
    for p in &points {
        let (px, py) = p.split_once(',').expect("formatted above");
        let _ = writeln!(s, r##"<circle cx="{px}" cy="{py}" r="3" fill="#1f77b4"/>"##);
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_rmse_curve(curve: &BTreeMap<u32, (f64, usize)>, path: &Path) -> Result<()> {
    std::fs::write(path, rmse_curve_svg(curve)).with_context(|| format!("writing {}", path.display()))
}
