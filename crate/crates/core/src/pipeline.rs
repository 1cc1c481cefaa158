//! Steps shared by the CLI and the test suites: per-tile features for a
//! slide, SVM training and scoring under a split plan, and evaluation of
//! score rows against a plan.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{bucket_by_tile, extract_features, FeatureRow, FeatureVector};
use crate::ingest::NucleusRecord;
use crate::metrics::{evaluate, EvalReport, ScoreRow};
use crate::raster::{tile_id, RasterConfig};
use crate::splits::{validate_manifest, EvalUnit, GrowthPattern, LabeledTile, SplitPlan};
use crate::svm::{ScoreVector, SvmClassifier, SvmHyperparams};

/// Features of every (row, col) in `tiles`; tiles without nuclei get the
/// zero vector.
pub fn slide_features(
    records: &[NucleusRecord],
    slide_id: &str,
    tiles: &[(usize, usize)],
    raster: &RasterConfig,
) -> HashMap<String, FeatureVector> {
    let buckets = bucket_by_tile(records, raster.footprint());
    tiles
        .par_iter()
        .map(|&(r, c)| {
            let f = buckets
                .get(&(r, c))
                .map_or_else(FeatureVector::default, |b| extract_features(b));
            (tile_id(slide_id, r, c), f)
        })
        .collect()
}

/// Feature rows for `manifest`, in manifest order.
pub fn feature_rows(manifest: &[LabeledTile], features: &HashMap<String, FeatureVector>) -> Result<Vec<FeatureRow>> {
    manifest
        .iter()
        .map(|t| {
            let f = features
                .get(&t.tile_id)
                .ok_or_else(|| Error::invalid(format!("no features for tile `{}`", t.tile_id)))?;
            Ok(FeatureRow {
                tile: t.clone(),
                features: *f,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct UnitResult {
    pub unit: EvalUnit,
    pub classifier: SvmClassifier,
    pub scores: Vec<ScoreRow>,
}

/// Trains one classifier per evaluation unit of `plan` and scores that
/// unit's test tiles. Validation tiles are neither trained on nor scored.
pub fn train_and_score(
    plan: &SplitPlan,
    features: &HashMap<String, FeatureVector>,
    hyper: &SvmHyperparams,
) -> Result<Vec<UnitResult>> {
    let lookup = |tile_id: &str| -> Result<Vec<f64>> {
        features
            .get(tile_id)
            .map(|f| f.0.to_vec())
            .ok_or_else(|| Error::invalid(format!("no features for tile `{tile_id}`")))
    };
    plan.evaluation_units()
        .into_iter()
        .map(|unit| {
            let mut x = Vec::new();
            let mut y = Vec::new();
            for r in plan.rows.iter().filter(|r| unit.is_train(r.assignment)) {
                x.push(lookup(&r.tile.tile_id)?);
                y.push(r.tile.label);
            }
            let classifier = SvmClassifier::train(&x, &y, hyper)?;
            let scores = plan
                .rows_in(unit.test)
                .map(|r| {
                    let s = classifier.score(&lookup(&r.tile.tile_id)?)?;
                    Ok(ScoreRow {
                        tile_id: r.tile.tile_id.clone(),
                        scores: s,
                        predicted: s.argmax(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(UnitResult {
                unit,
                classifier,
                scores,
            })
        })
        .collect()
}

/// One report per evaluation unit of `plan`, using the score rows of its
/// test tiles. Every test tile must have a score row.
pub fn evaluate_plan(plan: &SplitPlan, scores: &[ScoreRow]) -> Result<Vec<(String, EvalReport)>> {
    let by_id: HashMap<&str, &ScoreRow> = scores.iter().map(|s| (s.tile_id.as_str(), s)).collect();
    plan.evaluation_units()
        .into_iter()
        .map(|unit| {
            let mut truth = Vec::new();
            let mut sv: Vec<ScoreVector> = Vec::new();
            let mut predicted = Vec::new();
            for r in plan.rows_in(unit.test) {
                let s = by_id
                    .get(r.tile.tile_id.as_str())
                    .ok_or_else(|| Error::invalid(format!("no score row for test tile `{}`", r.tile.tile_id)))?;
                truth.push(r.tile.label);
                sv.push(s.scores);
                predicted.push(s.predicted);
            }
            if truth.is_empty() {
                return Err(Error::invalid(format!("unit {} has no test tiles", unit.name)));
            }
            let report = crate::metrics::evaluate_with_predictions(&truth, &predicted, &sv)?;
            Ok((unit.name, report))
        })
        .collect()
}

/// Convenience: train, score and evaluate a plan in one call.
pub fn run_plan(
    plan: &SplitPlan,
    features: &HashMap<String, FeatureVector>,
    hyper: &SvmHyperparams,
) -> Result<Vec<(String, EvalReport)>> {
    train_and_score(plan, features, hyper)?
        .into_iter()
        .map(|u| {
            let truth: Vec<_> = plan.rows_in(u.unit.test).map(|r| r.tile.label).collect();
            let s: Vec<_> = u.scores.iter().map(|s| s.scores).collect();
            Ok((u.unit.name, evaluate(&truth, &s)?))
        })
        .collect()
}

/// One manifest line: a labeled tile and, when known, its grid position on
/// the slide's cell map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub tile: LabeledTile,
    pub grid: Option<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct ManifestCsvRow {
    tile_id: String,
    slide_id: String,
    #[serde(default)]
    grid_row: Option<usize>,
    #[serde(default)]
    grid_col: Option<usize>,
    label: GrowthPattern,
}

/// `tile_id,slide_id,grid_row,grid_col,label`
pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for e in entries {
        w.serialize(ManifestCsvRow {
            tile_id: e.tile.tile_id.clone(),
            slide_id: e.tile.slide_id.clone(),
            grid_row: e.grid.map(|g| g.0),
            grid_col: e.grid.map(|g| g.1),
            label: e.tile.label,
        })
        .map_err(|err| Error::csv(path, err))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a manifest. The grid columns may be absent or empty; other extra
/// columns are ignored. Tile ids must be unique.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out = Vec::new();
    for rec in r.deserialize::<ManifestCsvRow>() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let grid = match (rec.grid_row, rec.grid_col) {
            (Some(a), Some(b)) => Some((a, b)),
            (None, None) => None,
            _ => {
                return Err(Error::csv(
                    path,
                    format!("tile {}: grid_row and grid_col must come together", rec.tile_id),
                ))
            }
        };
        out.push(ManifestEntry {
            tile: LabeledTile::new(rec.tile_id, rec.slide_id, rec.label),
            grid,
        });
    }
    let tiles: Vec<LabeledTile> = out.iter().map(|e| e.tile.clone()).collect();
    validate_manifest(&tiles).map_err(|e| Error::csv(path, e))?;
    Ok(out)
}
