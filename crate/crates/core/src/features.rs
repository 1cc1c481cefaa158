//! Twelve-value cellular feature vector per tile.
//!
//! For each of neoplastic, non-neoplastic epithelial, connective and
//! inflammatory nuclei (in that order): the count, the maximum and the
//! minimum Euclidean distance between centroids of that class. Distances
//! are in detection-magnification pixels and are 0 when a class has fewer
//! than two nuclei in the tile.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ingest::{CellClass, NucleusRecord};
use crate::splits::{GrowthPattern, LabeledTile};

pub const FEATURE_CLASSES: [CellClass; 4] = [
    CellClass::Neoplastic,
    CellClass::NonNeoplasticEpithelial,
    CellClass::Connective,
    CellClass::Inflammatory,
];

pub const N_FEATURES: usize = 12;

/// Column names of `f1..f12`, in order.
pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "neoplastic_count",
    "neoplastic_max_dist",
    "neoplastic_min_dist",
    "non_neoplastic_count",
    "non_neoplastic_max_dist",
    "non_neoplastic_min_dist",
    "connective_count",
    "connective_max_dist",
    "connective_min_dist",
    "inflammatory_count",
    "inflammatory_max_dist",
    "inflammatory_min_dist",
];

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FeatureVector(pub [f64; N_FEATURES]);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// (count, max_dist, min_dist) for one of [`FEATURE_CLASSES`].
    pub fn triple(&self, class: CellClass) -> Option<(f64, f64, f64)> {
        let i = FEATURE_CLASSES.iter().position(|c| *c == class)?;
        Some((self.0[3 * i], self.0[3 * i + 1], self.0[3 * i + 2]))
    }
}

fn sq_dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    dx * dx + dy * dy
}

/// Exact (max, min) pairwise distance; (0, 0) for fewer than two points.
///
/// Max scans all pairs. Min sweeps points sorted by x and stops a scan once
/// the x gap alone exceeds the best distance, which keeps it exact.
pub fn pairwise_extremes(points: &[(f64, f64)]) -> (f64, f64) {
    if points.len() < 2 {
        return (0.0, 0.0);
    }
    let mut max2 = 0.0f64;
    for (i, &a) in points.iter().enumerate() {
        for &b in &points[i + 1..] {
            max2 = max2.max(sq_dist(a, b));
        }
    }

    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut min2 = f64::INFINITY;
    for (i, &a) in sorted.iter().enumerate() {
        for &b in &sorted[i + 1..] {
            let dx = b.0 - a.0;
            if dx * dx > min2 {
                break;
            }
            min2 = min2.min(sq_dist(a, b));
        }
    }
    (max2.sqrt(), min2.sqrt())
}

/// Features for the nuclei of one tile. Classes outside
/// [`FEATURE_CLASSES`] are ignored.
pub fn extract_features(records: &[NucleusRecord]) -> FeatureVector {
    let mut out = [0.0; N_FEATURES];
    for (i, class) in FEATURE_CLASSES.iter().enumerate() {
        let pts: Vec<(f64, f64)> = records
            .iter()
            .filter(|r| r.class == *class)
            .map(|r| (r.x, r.y))
            .collect();
        let (max, min) = pairwise_extremes(&pts);
        out[3 * i] = pts.len() as f64;
        out[3 * i + 1] = max;
        out[3 * i + 2] = min;
    }
    FeatureVector(out)
}

/// Half-open bounds `[lo, hi)` of grid index `i` along one axis.
fn tile_bounds(i: usize, footprint: f64) -> (f64, f64) {
    let lo = i as f64 * footprint;
    (lo, lo + footprint)
}

fn axis_index(v: f64, footprint: f64) -> usize {
    let mut i = (v / footprint).floor().max(0.0) as usize;
    while i > 0 && v < tile_bounds(i, footprint).0 {
        i -= 1;
    }
    while v >= tile_bounds(i, footprint).1 {
        i += 1;
    }
    i
}

/// Records inside the half-open footprint of tile (`row`, `col`), translated
/// to tile-local coordinates. `footprint` is the tile edge at detection
/// magnification.
pub fn window_records(records: &[NucleusRecord], row: usize, col: usize, footprint: f64) -> Vec<NucleusRecord> {
    let (x0, x1) = tile_bounds(col, footprint);
    let (y0, y1) = tile_bounds(row, footprint);
    records
        .iter()
        .filter(|r| r.x >= x0 && r.x < x1 && r.y >= y0 && r.y < y1)
        .map(|r| NucleusRecord {
            x: r.x - x0,
            y: r.y - y0,
            ..*r
        })
        .collect()
}

/// Groups a slide's records by tile in one pass, with the same boundary
/// rule and translation as [`window_records`]. Keys are (row, col).
pub fn bucket_by_tile(records: &[NucleusRecord], footprint: f64) -> BTreeMap<(usize, usize), Vec<NucleusRecord>> {
    let mut buckets: BTreeMap<(usize, usize), Vec<NucleusRecord>> = BTreeMap::new();
    for r in records {
        let col = axis_index(r.x, footprint);
        let row = axis_index(r.y, footprint);
        buckets.entry((row, col)).or_default().push(NucleusRecord {
            x: r.x - tile_bounds(col, footprint).0,
            y: r.y - tile_bounds(row, footprint).0,
            ..*r
        });
    }
    buckets
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub tile: LabeledTile,
    pub features: FeatureVector,
}

/// `tile_id,slide_id,label,f1..f12` with f-columns in [`FEATURE_NAMES`] order.
pub fn write_feature_csv(rows: &[FeatureRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut header = vec!["tile_id".to_string(), "slide_id".into(), "label".into()];
    header.extend((1..=N_FEATURES).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        let mut rec = vec![
            r.tile.tile_id.clone(),
            r.tile.slide_id.clone(),
            r.tile.label.to_string(),
        ];
        rec.extend(r.features.0.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_feature_csv(path: &Path) -> Result<Vec<FeatureRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        if rec.len() != 3 + N_FEATURES {
            return Err(Error::csv(
                path,
                format!("expected {} columns, got {}", 3 + N_FEATURES, rec.len()),
            ));
        }
        let label: GrowthPattern = rec[2].parse()?;
        let mut f = [0.0; N_FEATURES];
        for (i, v) in f.iter_mut().enumerate() {
            *v = rec[3 + i]
                .parse()
                .map_err(|e| Error::csv(path, format!("f{}: {e}", i + 1)))?;
        }
        out.push(FeatureRow {
            tile: LabeledTile::new(&rec[0], &rec[1], label),
            features: FeatureVector(f),
        });
    }
    Ok(out)
}
