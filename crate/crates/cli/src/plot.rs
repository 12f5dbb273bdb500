//! Static figures: SVG box plots and loss curves, PNG reconstruction panels
//! with segmentation contours. Output depends only on the inputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use csmri::training::LogRecord;
use image::{Rgb, RgbImage};

const PALETTE: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Quantile by linear interpolation between order statistics of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Five-number summary with Tukey whiskers.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub lo: f64,
    pub hi: f64,
    pub outliers: Vec<f64>,
}

pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
    let fence = 1.5 * (q3 - q1);
    let inside: Vec<f64> = v.iter().copied().filter(|&x| x >= q1 - fence && x <= q3 + fence).collect();
    let outliers = v.iter().copied().filter(|&x| x < q1 - fence || x > q3 + fence).collect();
    Some(BoxStats { q1, median, q3, lo: inside[0], hi: inside[inside.len() - 1], outliers })
}

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if !(hi > lo) {
        return (lo - 1.0, hi + 1.0);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Box plot of one metric per group. Non-finite values (exact
/// reconstructions) are left out and counted under the label.
pub fn box_plot(title: &str, y_label: &str, groups: &[(String, Vec<f64>)]) -> String {
    let stats: Vec<Option<BoxStats>> = groups.iter().map(|(_, v)| box_stats(v)).collect();
    let finite = groups.iter().flat_map(|(_, v)| v.iter().copied().filter(|x| x.is_finite()));
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for x in finite {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    let (lo, hi) = nice_range(lo, hi);
    let (left, top, ph, slot) = (70.0, 40.0, 260.0, 110.0);
    let width = left + slot * groups.len().max(1) as f64 + 20.0;
    let height = top + ph + 70.0;
    let y = |v: f64| top + ph * (1.0 - (v - lo) / (hi - lo));

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#, width / 2.0, escape(title));
    let _ = writeln!(s, r#"<text transform="translate(16,{:.1}) rotate(-90)" text-anchor="middle">{}</text>"#, top + ph / 2.0, escape(y_label));
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{:.1}" stroke="black"/>"#, top + ph);
    for i in 0..=5 {
        let v = lo + (hi - lo) * i as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{:.1}" y1="{yy:.1}" x2="{:.1}" y2="{yy:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"##,
            left,
            width - 20.0,
            left - 6.0,
            y(v) + 4.0,
            yy = y(v)
        );
    }
    for (i, ((label, values), st)) in groups.iter().zip(&stats).enumerate() {
        let cx = left + slot * (i as f64 + 0.5);
        let color = PALETTE[i % PALETTE.len()];
        let skipped = values.iter().filter(|x| !x.is_finite()).count();
        let _ = writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, top + ph + 18.0, escape(label));
        if skipped > 0 {
            let _ = writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle" font-size="10">{skipped} non-finite omitted</text>"#, top + ph + 34.0);
        }
        let Some(b) = st else { continue };
        let half = 30.0;
        let _ = writeln!(s, r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#, y(b.hi), y(b.q3));
        let _ = writeln!(s, r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#, y(b.q1), y(b.lo));
        for w in [b.lo, b.hi] {
            let _ = writeln!(s, r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#, cx - half / 2.0, y(w), cx + half / 2.0, y(w));
        }
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{color}" fill-opacity="0.35" stroke="{color}"/>"#,
            cx - half,
            y(b.q3),
            2.0 * half,
            (y(b.q1) - y(b.q3)).max(0.5)
        );
        let _ = writeln!(s, r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black" stroke-width="2"/>"#, cx - half, y(b.median), cx + half, y(b.median));
        for o in &b.outliers {
            let _ = writeln!(s, r#"<circle cx="{cx:.1}" cy="{:.1}" r="2.5" fill="none" stroke="{color}"/>"#, y(*o));
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Series of a training log: every loss component per step, and the
/// validation values per epoch, keyed by name.
pub fn log_series(records: &[LogRecord]) -> BTreeMap<String, Vec<(f64, f64)>> {
    let mut out: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in records {
        let x = r.step as f64;
        match r.kind.as_str() {
            "step" => {
                for (k, v) in &r.losses {
                    out.entry(k.clone()).or_default().push((x, *v));
                }
            }
            _ => {
                if let Some(v) = &r.validation {
                    for (k, val) in [("val psnr", v.psnr), ("val objective", v.objective), ("val dice", v.dice)] {
                        if let Some(val) = val {
                            out.entry(k.into()).or_default().push((x, val));
                        }
                    }
                }
            }
        }
    }
    out.retain(|_, pts| pts.iter().any(|p| p.1.is_finite()));
    out
}

/// One small panel per series against the optimizer step.
pub fn loss_curves(title: &str, records: &[LogRecord]) -> String {
    let series = log_series(records);
    let cols = 3usize;
    let (pw, ph, gap) = (260.0, 170.0, 50.0);
    let rows = series.len().div_ceil(cols).max(1);
    let width = cols as f64 * (pw + gap) + gap;
    let height = 40.0 + rows as f64 * (ph + gap);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#, width / 2.0, escape(title));
    for (i, (name, pts)) in series.iter().enumerate() {
        let (ox, oy) = (gap + (i % cols) as f64 * (pw + gap), 40.0 + (i / cols) as f64 * (ph + gap) + 20.0);
        let finite: Vec<(f64, f64)> = pts.iter().copied().filter(|p| p.1.is_finite()).collect();
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in &finite {
            (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
        }
        let (x0, x1) = if x1 > x0 { (x0, x1) } else { (x0 - 1.0, x1 + 1.0) };
        let (y0, y1) = nice_range(y0, y1);
        let px = |x: f64| ox + pw * (x - x0) / (x1 - x0);
        let py = |y: f64| oy + ph * (1.0 - (y - y0) / (y1 - y0));
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, r#"<rect x="{ox:.1}" y="{oy:.1}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, ox + pw / 2.0, oy - 6.0, escape(name));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.4e}</text>"#, ox - 4.0, oy + 10.0, y1);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.4e}</text>"#, ox - 4.0, oy + ph, y0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">step</text>"#, ox + pw / 2.0, oy + ph + 14.0);
        let points: Vec<String> = finite.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1" points="{}"/>"#, points.join(" "));
        if finite.len() < 40 {
            for &(x, y) in &finite {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{color}"/>"#, px(x), py(y));
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

/// One tile of a reconstruction panel.
#[derive(Debug, Clone)]
pub struct Tile {
    pub magnitude: Vec<f64>,
    pub height: usize,
    pub width: usize,
    /// Predicted segmentation, drawn in yellow.
    pub predicted: Option<Vec<u8>>,
    /// Ground-truth label, drawn in red.
    pub truth: Option<Vec<u8>>,
}

const YELLOW: Rgb<u8> = Rgb([255, 230, 0]);
const RED: Rgb<u8> = Rgb([230, 20, 20]);

/// Side-by-side tiles, each magnified `scale` times, with mask outlines.
pub fn panel(tiles: &[Tile], peak: f64, scale: u32) -> RgbImage {
    let (h, w) = (tiles[0].height as u32, tiles[0].width as u32);
    let sep = 4;
    let mut img = RgbImage::from_pixel(tiles.len() as u32 * (w * scale + sep) - sep, h * scale, Rgb([255, 255, 255]));
    for (t, tile) in tiles.iter().enumerate() {
        let ox = t as u32 * (w * scale + sep);
        for y in 0..h * scale {
            for x in 0..w * scale {
                let v = tile.magnitude[(y / scale * w + x / scale) as usize] / peak;
                let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                img.put_pixel(ox + x, y, Rgb([g, g, g]));
            }
        }
        for (mask, color) in [(&tile.truth, RED), (&tile.predicted, YELLOW)] {
            if let Some(m) = mask {
                draw_outline(&mut img, m, h, w, ox, scale, color);
            }
        }
    }
    img
}

/// Marks the inner edge of every mask pixel that borders a pixel outside
/// the mask (or the image border).
fn draw_outline(img: &mut RgbImage, mask: &[u8], h: u32, w: u32, ox: u32, scale: u32, color: Rgb<u8>) {
    let inside = |y: i64, x: i64| y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && mask[(y as u32 * w + x as u32) as usize] != 0;
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if !inside(y, x) {
                continue;
            }
            let (py, px) = (y as u32 * scale, x as u32 * scale);
            for k in 0..scale {
                if !inside(y - 1, x) {
                    img.put_pixel(ox + px + k, py, color);
                }
                if !inside(y + 1, x) {
                    img.put_pixel(ox + px + k, py + scale - 1, color);
                }
                if !inside(y, x - 1) {
                    img.put_pixel(ox + px, py + k, color);
                }
                if !inside(y, x + 1) {
                    img.put_pixel(ox + px + scale - 1, py + k, color);
                }
            }
        }
    }
}
