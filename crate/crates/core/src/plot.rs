//! Self-contained SVG figures written as plain markup.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::imageproc::GrayImage;
use crate::triage::OperatingPoint;

const W: f64 = 480.0;
const H: f64 = 360.0;
const MARGIN: f64 = 50.0;

fn header(out: &mut String, w: f64, h: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
}

/// FNR and FPR against the fraction of patients read by the radiologist.
pub fn plot_operating_curve(points: &[OperatingPoint]) -> Result<String> {
    if points.is_empty() {
        return Err(Error::EmptyInput);
    }
    let finite = |v: f64| if v.is_finite() { v } else { 0.0 };
    let y_max = points.iter().flat_map(|p| [finite(p.fnr), finite(p.fpr)]).fold(0.0f64, f64::max).max(0.05) * 1.1;
    let px = |x: f64| MARGIN + x * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - y / y_max * (H - 2.0 * MARGIN);

    let mut s = String::new();
    header(&mut s, W, H);
    let (x0, x1, y0, y1) = (px(0.0), px(1.0), py(0.0), py(y_max));
    let _ = writeln!(s, r#"<path d="M{x0:.2},{y1:.2} L{x0:.2},{y0:.2} L{x1:.2},{y0:.2}" stroke="black" fill="none"/>"#);
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let (x, y) = (px(t), py(t * y_max));
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{t:.2}</text>"#, y0 + 16.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{:.3}</text>"#, x0 - 6.0, y + 4.0, t * y_max);
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">fraction read by radiologist</text>"#, W / 2.0, H - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">error rate</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (name, color, get) in [("FNR", "#c0392b", (|p: &OperatingPoint| p.fnr) as fn(&OperatingPoint) -> f64), ("FPR", "#2c6fbb", |p| p.fpr)] {
        let pts: Vec<(f64, f64)> =
            points.iter().filter(|p| get(p).is_finite()).map(|p| (px(p.frac_to_radiologist), py(get(p)))).collect();
        if pts.len() > 1 {
            let d: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
            let _ = writeln!(s, r#"<polyline points="{}" stroke="{color}" fill="none"/>"#, d.join(" "));
        }
        for (x, y) in &pts {
            let _ = writeln!(s, r#"<circle class="marker" cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#);
        }
        let ly = if name == "FNR" { MARGIN } else { MARGIN + 16.0 };
        let _ = writeln!(s, r#"<text x="{:.2}" y="{ly:.2}" fill="{color}">{name}</text>"#, W - MARGIN - 30.0);
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// The view in grayscale with the heatmap overlaid in red, one square per pixel.
pub fn plot_saliency(heatmap: &GrayImage, image: &GrayImage) -> Result<String> {
    if image.pixels.is_empty() {
        return Err(Error::EmptyInput);
    }
    if (heatmap.width, heatmap.height) != (image.width, image.height) {
        return Err(Error::DimensionMismatch { expected: image.pixels.len(), got: heatmap.pixels.len() });
    }
    const CELL: f64 = 6.0;
    let (lo, hi) = image.pixels.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let h_max = heatmap.pixels.iter().copied().fold(0.0f64, f64::max);
    let (w, h) = (image.width as f64 * CELL, image.height as f64 * CELL);
    let mut s = String::new();
    header(&mut s, w, h + 20.0);
    for y in 0..image.height {
        for x in 0..image.width {
            let g = (((image.get(x, y) - lo) / span) * 255.0).round() as u8;
            let _ = writeln!(
                s,
                r#"<rect x="{:.0}" y="{:.0}" width="{CELL}" height="{CELL}" fill="rgb({g},{g},{g})"/>"#,
                x as f64 * CELL,
                y as f64 * CELL
            );
            let a = if h_max > 0.0 { heatmap.get(x, y) / h_max * 0.6 } else { 0.0 };
            if a > 0.0 {
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.0}" y="{:.0}" width="{CELL}" height="{CELL}" fill="red" fill-opacity="{a:.3}"/>"#,
                    x as f64 * CELL,
                    y as f64 * CELL
                );
            }
        }
    }
    let _ = writeln!(s, r#"<text x="4" y="{:.0}">sensitivity of malignancy output</text>"#, h + 15.0);
    s.push_str("</svg>\n");
    Ok(s)
}
