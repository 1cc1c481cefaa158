//! Reference implementations used only by tests. Each one is written the
//! slow, obvious way and shares no code with the library.

#![allow(dead_code)]

use cellmap::raster::BinaryPlane;
use cellmap::GrowthPattern;

/// Rounds half away from zero without calling `f64::round`.
pub fn round_half_away(v: f64) -> i64 {
    if v >= 0.0 {
        (v + 0.5).floor() as i64
    } else {
        -((-v + 0.5).floor() as i64)
    }
}

/// Lattice points of an inclusive disk clipped to a `w`×`h` grid, found by
/// testing every pixel of the grid.
pub fn disk_oracle(w: usize, h: usize, center: (f64, f64), radius: u32) -> Vec<(usize, usize)> {
    let (cx, cy) = (round_half_away(center.0), round_half_away(center.1));
    let r2 = i64::from(radius) * i64::from(radius);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let dx = x as i64 - cx;
            let dy = y as i64 - cy;
            if dx * dx + dy * dy <= r2 {
                out.push((x, y));
            }
        }
    }
    out
}

pub fn set_pixels(p: &BinaryPlane) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..p.height() {
        for x in 0..p.width() {
            if p.get(x, y) == 1 {
                out.push((x, y));
            }
        }
    }
    out
}

/// (max, min) over every unordered pair; (0, 0) below two points.
pub fn pair_extremes_oracle(pts: &[(f64, f64)]) -> (f64, f64) {
    if pts.len() < 2 {
        return (0.0, 0.0);
    }
    let mut max = f64::NEG_INFINITY;
    let mut min = f64::INFINITY;
    for i in 0..pts.len() {
        for j in 0..pts.len() {
            if i < j {
                let d = ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();
                max = max.max(d);
                min = min.min(d);
            }
        }
    }
    (max, min)
}

/// Area under the ROC curve by the trapezoidal rule. The curve steps through
/// each distinct threshold from high to low, so a tie group becomes one
/// diagonal segment.
pub fn trapezoid_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = pos.iter().chain(neg).copied().collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let mut area = 0.0;
    let (mut fpr0, mut tpr0) = (0.0, 0.0);
    for t in thresholds {
        let tpr = pos.iter().filter(|&&s| s >= t).count() as f64 / np;
        let fpr = neg.iter().filter(|&&s| s >= t).count() as f64 / nn;
        area += (fpr - fpr0) * (tpr + tpr0) / 2.0;
        fpr0 = fpr;
        tpr0 = tpr;
    }
    area
}

/// Whether some direction strictly separates two 2-D point clouds, tried
/// over a dense sweep of angles.
pub fn linearly_separable_2d(a: &[[f64; 2]], b: &[[f64; 2]]) -> bool {
    (0..3600).any(|k| {
        let t = k as f64 * std::f64::consts::PI / 1800.0;
        let (c, s) = (t.cos(), t.sin());
        let proj = |p: &[f64; 2]| p[0] * c + p[1] * s;
        let amax = a.iter().map(proj).fold(f64::NEG_INFINITY, f64::max);
        let bmin = b.iter().map(proj).fold(f64::INFINITY, f64::min);
        amax < bmin
    })
}

/// Confusion counts by direct tally.
pub fn tally(truth: &[GrowthPattern], pred: &[GrowthPattern]) -> [[u64; 6]; 6] {
    let mut m = [[0u64; 6]; 6];
    for (t, p) in truth.iter().zip(pred) {
        m[t.index()][p.index()] += 1;
    }
    m
}
