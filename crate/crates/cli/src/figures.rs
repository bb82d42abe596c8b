//! SVG boxplots and portable-graymap slice overlays.

use std::fmt::Write as _;

use fracadapt::{LabelMap3, OrganLabel, Volume3};

use crate::report::CrossSet;

/// Quantile by linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(BoxStats {
        min: v[0],
        q1: quantile(&v, 0.25),
        median: quantile(&v, 0.5),
        q3: quantile(&v, 0.75),
        max: v[v.len() - 1],
        mean: v.iter().sum::<f64>() / v.len() as f64,
    })
}

const PANEL_W: f64 = 260.0;
const PANEL_H: f64 = 240.0;
const LEFT: f64 = 44.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 36.0;

/// One panel per organ: boxplots of per-patient MSD of `M_0..M_k` on the
/// held-out fraction, whiskers at the extremes and the mean as a dot.
pub fn session_boxplots_svg(set: &CrossSet) -> String {
    let width = PANEL_W * 4.0 + 20.0;
    let height = PANEL_H + TOP + 10.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="10" y="18" font-size="13">MSD (mm) on fraction {} of models M0..M{} ({} adapted, {} iterations per fraction)</text>"#,
        set.fraction,
        set.models.last().copied().unwrap_or(0),
        set.variant,
        set.iterations
    );
    for (o, organ) in OrganLabel::ORGANS.into_iter().enumerate() {
        let x0 = 10.0 + o as f64 * PANEL_W;
        let plot_w = PANEL_W - LEFT - 10.0;
        let plot_h = PANEL_H - BOTTOM - 10.0;
        let boxes: Vec<Option<BoxStats>> = set.msd[o].iter().map(|v| box_stats(v)).collect();
        let top = boxes.iter().flatten().map(|b| b.max).fold(0.0, f64::max);
        let y_max = if top > 0.0 { (top * 1.1 * 2.0).ceil() / 2.0 } else { 1.0 };
        let y = |v: f64| TOP + plot_h * (1.0 - v / y_max);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="12">{}</text>"#, x0 + LEFT, TOP - 12.0, organ.name());
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{TOP:.1}" width="{plot_w:.1}" height="{plot_h:.1}" fill="none" stroke="black"/>"#,
            x0 + LEFT
        );
        for t in 0..=4 {
            let v = y_max * t as f64 / 4.0;
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#,
                x0 + LEFT - 4.0,
                y(v) + 4.0
            );
        }
        let slot = plot_w / set.models.len().max(1) as f64;
        for (k, (b, &m)) in boxes.iter().zip(&set.models).enumerate() {
            let cx = x0 + LEFT + slot * (k as f64 + 0.5);
            let half = slot * 0.3;
            let _ = writeln!(
                s,
                r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">M{m}</text>"#,
                TOP + plot_h + 16.0
            );
            let Some(b) = b else { continue };
            let _ = writeln!(
                s,
                r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
                y(b.min),
                y(b.max)
            );
            let _ = writeln!(
                s,
                r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#9ecae1" stroke="black"/>"##,
                cx - half,
                y(b.q3),
                2.0 * half,
                (y(b.q1) - y(b.q3)).max(0.5)
            );
            let _ = writeln!(
                s,
                r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black" stroke-width="2"/>"#,
                cx - half,
                y(b.median),
                cx + half,
                y(b.median)
            );
            let _ = writeln!(s, r#"<circle cx="{cx:.1}" cy="{:.1}" r="2.5" fill="red"/>"#, y(b.mean));
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Axial slice with the most voxels of `organ` in `labels`.
pub fn richest_slice(labels: &LabelMap3, organ: OrganLabel) -> usize {
    let [nx, ny, nz] = labels.dims();
    (0..nz)
        .max_by_key(|&z| {
            let n = (0..ny)
                .flat_map(|y| (0..nx).map(move |x| (x, y)))
                .filter(|&(x, y)| labels.at(x, y, z) == organ.code())
                .count();
            (n, std::cmp::Reverse(z))
        })
        .unwrap_or(0)
}

fn boundary(labels: &LabelMap3, x: usize, y: usize, z: usize) -> bool {
    let [nx, ny, _] = labels.dims();
    let l = labels.at(x, y, z);
    if l == 0 {
        return false;
    }
    x == 0 || y == 0 || x + 1 == nx || y + 1 == ny || {
        [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)]
            .iter()
            .any(|&(a, b)| labels.at(a, b, z) != l)
    }
}

/// Binary (P5) graymap of slice `z` magnified `scale` times. Intensities are
/// windowed to 20..235; truth boundaries are drawn white, predicted
/// boundaries black and coinciding boundaries mid-gray.
pub fn overlay_pgm(image: &Volume3, truth: &LabelMap3, pred: &LabelMap3, z: usize, scale: usize) -> Vec<u8> {
    let [nx, ny, _] = image.dims();
    let (w, h) = (nx * scale, ny * scale);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let (lo, hi) = (880.0f32, 1120.0f32);
    for py in 0..h {
        for px in 0..w {
            let (x, y) = (px / scale, py / scale);
            let v = match (boundary(truth, x, y, z), boundary(pred, x, y, z)) {
                (true, true) => 128,
                (true, false) => 255,
                (false, true) => 0,
                (false, false) => {
                    let t = ((image.at(x, y, z) - lo) / (hi - lo)).clamp(0.0, 1.0);
                    (20.0 + 215.0 * t).round() as u8
                }
            };
            out.push(v);
        }
    }
    out
}
