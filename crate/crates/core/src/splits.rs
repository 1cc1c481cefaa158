//! Validation split plans over a labeled tile manifest.
//!
//! Two policies are supported:
//!
//! * **WSI-based** (strong validation): whole slides are held out as the test
//!   set, so no test tile shares a slide with a training tile. Test slides are
//!   drawn uniformly and redrawn until every growth pattern is represented.
//!   The remaining tiles are shuffled and split into train and validation.
//! * **Tile-based k-fold** (weak validation): tiles from all slides are mixed,
//!   shuffled and dealt round-robin into `k` folds.
//!
//! Trial `t` under seed `s` draws from stream `t` of the ChaCha8 generator
//! keyed by `s` (see [`crate::rng`]).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthPattern {
    Lepidic,
    Acinar,
    Papillary,
    Micropapillary,
    Solid,
    NonTumor,
}

impl GrowthPattern {
    pub const COUNT: usize = 6;

    pub const ALL: [GrowthPattern; 6] = [
        GrowthPattern::Lepidic,
        GrowthPattern::Acinar,
        GrowthPattern::Papillary,
        GrowthPattern::Micropapillary,
        GrowthPattern::Solid,
        GrowthPattern::NonTumor,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            GrowthPattern::Lepidic => "lepidic",
            GrowthPattern::Acinar => "acinar",
            GrowthPattern::Papillary => "papillary",
            GrowthPattern::Micropapillary => "micropapillary",
            GrowthPattern::Solid => "solid",
            GrowthPattern::NonTumor => "non_tumor",
        }
    }
}

impl fmt::Display for GrowthPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GrowthPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown growth pattern `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledTile {
    pub tile_id: String,
    pub slide_id: String,
    pub label: GrowthPattern,
}

impl LabeledTile {
    pub fn new(tile_id: impl Into<String>, slide_id: impl Into<String>, label: GrowthPattern) -> Self {
        LabeledTile {
            tile_id: tile_id.into(),
            slide_id: slide_id.into(),
            label,
        }
    }
}

/// Checks that tile ids are unique.
pub fn validate_manifest(manifest: &[LabeledTile]) -> Result<()> {
    let mut seen = HashSet::with_capacity(manifest.len());
    for t in manifest {
        if !seen.insert(t.tile_id.as_str()) {
            return Err(Error::invalid(format!("duplicate tile_id `{}`", t.tile_id)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPolicy {
    WsiBased,
    TileBasedKFold { k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Assignment {
    Train,
    Val,
    Test,
    Fold(usize),
}

impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Assignment::Train => f.write_str("train"),
            Assignment::Val => f.write_str("val"),
            Assignment::Test => f.write_str("test"),
            Assignment::Fold(i) => write!(f, "fold{i}"),
        }
    }
}

impl FromStr for Assignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Assignment::Train),
            "val" => Ok(Assignment::Val),
            "test" => Ok(Assignment::Test),
            _ => s
                .strip_prefix("fold")
                .and_then(|n| n.parse().ok())
                .map(Assignment::Fold)
                .ok_or_else(|| Error::invalid(format!("unknown assignment `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanRow {
    pub tile: LabeledTile,
    pub assignment: Assignment,
}

/// Assignment of every manifest tile, in manifest order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub policy: SplitPolicy,
    pub seed: u64,
    pub trial: u64,
    pub rows: Vec<PlanRow>,
}

impl SplitPlan {
    pub fn rows_in(&self, assignment: Assignment) -> impl Iterator<Item = &PlanRow> {
        self.rows.iter().filter(move |r| r.assignment == assignment)
    }

    pub fn assignment_of(&self, tile_id: &str) -> Option<Assignment> {
        self.rows
            .iter()
            .find(|r| r.tile.tile_id == tile_id)
            .map(|r| r.assignment)
    }

    /// Evaluation units as (name, train part, test part). WSI plans have a
    /// single unit; k-fold plans have one per fold.
    pub fn evaluation_units(&self) -> Vec<EvalUnit> {
        match self.policy {
            SplitPolicy::WsiBased => vec![EvalUnit {
                name: "test".into(),
                test: Assignment::Test,
            }],
            SplitPolicy::TileBasedKFold { k } => (0..k)
                .map(|f| EvalUnit {
                    name: format!("fold{f}"),
                    test: Assignment::Fold(f),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalUnit {
    pub name: String,
    pub test: Assignment,
}

impl EvalUnit {
    /// Whether a row belongs to the training side of this unit. Validation
    /// tiles are never trained on.
    pub fn is_train(&self, a: Assignment) -> bool {
        match self.test {
            Assignment::Fold(_) => a != self.test,
            _ => a == Assignment::Train,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WsiSplitConfig {
    pub n_test_slides: usize,
    pub val_fraction: f64,
    pub max_draws: usize,
}

impl Default for WsiSplitConfig {
    fn default() -> Self {
        WsiSplitConfig {
            n_test_slides: 6,
            val_fraction: 0.10,
            max_draws: 10_000,
        }
    }
}

const ALL_CLASSES: u8 = (1 << GrowthPattern::COUNT) - 1;

fn missing_classes(mask: u8) -> Vec<GrowthPattern> {
    GrowthPattern::ALL
        .into_iter()
        .filter(|g| mask & (1 << g.index()) == 0)
        .collect()
}

fn names(classes: &[GrowthPattern]) -> String {
    classes.iter().map(|g| g.name()).collect::<Vec<_>>().join(",")
}

/// Holds out whole slides as the test set.
pub fn make_wsi_split(manifest: &[LabeledTile], cfg: &WsiSplitConfig, seed: u64, trial: u64) -> Result<SplitPlan> {
    if manifest.is_empty() {
        return Err(Error::invalid("empty manifest"));
    }
    validate_manifest(manifest)?;
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::invalid(format!(
            "val_fraction {} outside [0, 1)",
            cfg.val_fraction
        )));
    }

    // Slides in order of first appearance, with the classes each one carries.
    let mut slide_index: HashMap<&str, usize> = HashMap::new();
    let mut slide_masks: Vec<u8> = Vec::new();
    for t in manifest {
        let i = *slide_index.entry(t.slide_id.as_str()).or_insert_with(|| {
            slide_masks.push(0);
            slide_masks.len() - 1
        });
        slide_masks[i] |= 1 << t.label.index();
    }
    let n_slides = slide_masks.len();
    if cfg.n_test_slides == 0 || cfg.n_test_slides >= n_slides {
        return Err(Error::Infeasible(format!(
            "cannot hold out {} of {} slides and keep a training set",
            cfg.n_test_slides, n_slides
        )));
    }
    let all = slide_masks.iter().fold(0, |a, m| a | m);
    if all != ALL_CLASSES {
        return Err(Error::Infeasible(format!(
            "manifest lacks classes: {}",
            names(&missing_classes(all))
        )));
    }

    let mut rng = rng::stream(seed, trial);
    let mut order: Vec<usize> = (0..n_slides).collect();
    let mut best_mask = 0u8;
    let mut test_slides = None;
    for _ in 0..cfg.max_draws {
        order.sort_unstable();
        let (drawn, _) = order.partial_shuffle(&mut rng, cfg.n_test_slides);
        let mask = drawn.iter().fold(0, |a, &s| a | slide_masks[s]);
        if mask == ALL_CLASSES {
            test_slides = Some(drawn.iter().copied().collect::<HashSet<_>>());
            break;
        }
        if mask.count_ones() > best_mask.count_ones() {
            best_mask = mask;
        }
    }
    let test_slides = test_slides.ok_or_else(|| {
        Error::Infeasible(format!(
            "no {}-slide test set covering all classes found in {} draws; best draw lacked: {}",
            cfg.n_test_slides,
            cfg.max_draws,
            names(&missing_classes(best_mask))
        ))
    })?;

    let is_test = |t: &LabeledTile| test_slides.contains(&slide_index[t.slide_id.as_str()]);
    let mut rest: Vec<usize> = (0..manifest.len()).filter(|&i| !is_test(&manifest[i])).collect();
    rest.shuffle(&mut rng);
    let n_val = (cfg.val_fraction * rest.len() as f64).round() as usize;
    if n_val >= rest.len() {
        return Err(Error::Infeasible(format!(
            "validation fraction {} leaves no training tiles out of {}",
            cfg.val_fraction,
            rest.len()
        )));
    }
    let val: HashSet<usize> = rest[..n_val].iter().copied().collect();

    let rows = manifest
        .iter()
        .enumerate()
        .map(|(i, t)| PlanRow {
            tile: t.clone(),
            assignment: if is_test(t) {
                Assignment::Test
            } else if val.contains(&i) {
                Assignment::Val
            } else {
                Assignment::Train
            },
        })
        .collect();
    Ok(SplitPlan {
        policy: SplitPolicy::WsiBased,
        seed,
        trial,
        rows,
    })
}

/// Shuffles all tiles together and deals them round-robin into `k` folds.
pub fn make_tile_kfold(manifest: &[LabeledTile], k: usize, seed: u64, trial: u64) -> Result<SplitPlan> {
    if k < 2 {
        return Err(Error::invalid(format!("k must be at least 2, got {k}")));
    }
    if manifest.len() < k {
        return Err(Error::invalid(format!(
            "{} tiles cannot fill {k} folds",
            manifest.len()
        )));
    }
    validate_manifest(manifest)?;
    let mut rng = rng::stream(seed, trial);
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    order.shuffle(&mut rng);
    let mut fold = vec![0usize; manifest.len()];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k;
    }
    let rows = manifest
        .iter()
        .zip(fold)
        .map(|(t, f)| PlanRow {
            tile: t.clone(),
            assignment: Assignment::Fold(f),
        })
        .collect();
    Ok(SplitPlan {
        policy: SplitPolicy::TileBasedKFold { k },
        seed,
        trial,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PairingLeakage {
    pub test_part: String,
    pub test_tiles: usize,
    /// Test tiles whose slide also contributes a training tile.
    pub leaked_tiles: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeakageReport {
    pub pairings: Vec<PairingLeakage>,
}

impl LeakageReport {
    pub fn total_leaked(&self) -> usize {
        self.pairings.iter().map(|p| p.leaked_tiles).sum()
    }
}

/// Counts, for each train/test pairing of the plan, test tiles that share a
/// slide with a training tile. Training includes validation tiles here.
pub fn audit_leakage(plan: &SplitPlan, manifest: &[LabeledTile]) -> Result<LeakageReport> {
    let assigned: HashMap<&str, Assignment> = plan
        .rows
        .iter()
        .map(|r| (r.tile.tile_id.as_str(), r.assignment))
        .collect();
    let mut rows = Vec::with_capacity(manifest.len());
    for t in manifest {
        let a = assigned
            .get(t.tile_id.as_str())
            .ok_or_else(|| Error::invalid(format!("plan has no assignment for `{}`", t.tile_id)))?;
        rows.push((t, *a));
    }

    let units: Vec<(String, Assignment)> = match plan.policy {
        SplitPolicy::WsiBased => vec![("test".into(), Assignment::Test)],
        SplitPolicy::TileBasedKFold { k } => (0..k).map(|f| (format!("fold{f}"), Assignment::Fold(f))).collect(),
    };
    let pairings = units
        .into_iter()
        .map(|(name, test)| {
            let train_slides: HashSet<&str> = rows
                .iter()
                .filter(|(_, a)| *a != test)
                .map(|(t, _)| t.slide_id.as_str())
                .collect();
            let test_rows: Vec<_> = rows.iter().filter(|(_, a)| *a == test).collect();
            PairingLeakage {
                test_part: name,
                test_tiles: test_rows.len(),
                leaked_tiles: test_rows
                    .iter()
                    .filter(|(t, _)| train_slides.contains(t.slide_id.as_str()))
                    .count(),
            }
        })
        .collect();
    Ok(LeakageReport { pairings })
}

#[derive(Debug, Serialize, Deserialize)]
struct PlanCsvRow {
    tile_id: String,
    slide_id: String,
    label: GrowthPattern,
    assignment: String,
    trial: u64,
    seed: u64,
}

/// `tile_id,slide_id,label,assignment,trial,seed`
pub fn write_plan_csv(plan: &SplitPlan, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in &plan.rows {
        w.serialize(PlanCsvRow {
            tile_id: r.tile.tile_id.clone(),
            slide_id: r.tile.slide_id.clone(),
            label: r.tile.label,
            assignment: r.assignment.to_string(),
            trial: plan.trial,
            seed: plan.seed,
        })
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_plan_csv(path: &Path) -> Result<SplitPlan> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut rows = Vec::new();
    let mut header: Option<(u64, u64)> = None;
    for rec in r.deserialize::<PlanCsvRow>() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        match header {
            None => header = Some((rec.trial, rec.seed)),
            Some(h) if h != (rec.trial, rec.seed) => {
                return Err(Error::csv(path, "mixed trial/seed values in one plan"))
            }
            _ => {}
        }
        rows.push(PlanRow {
            tile: LabeledTile::new(rec.tile_id, rec.slide_id, rec.label),
            assignment: rec.assignment.parse()?,
        });
    }
    let (trial, seed) = header.ok_or_else(|| Error::csv(path, "empty plan"))?;
    let folds: BTreeMap<usize, ()> = rows
        .iter()
        .filter_map(|r| match r.assignment {
            Assignment::Fold(f) => Some((f, ())),
            _ => None,
        })
        .collect();
    let policy = match (
        folds.len(),
        rows.iter().all(|r| matches!(r.assignment, Assignment::Fold(_))),
    ) {
        (0, _) => SplitPolicy::WsiBased,
        (_, true) => SplitPolicy::TileBasedKFold {
            k: folds.keys().next_back().map_or(0, |m| m + 1),
        },
        _ => return Err(Error::csv(path, "plan mixes folds with train/val/test")),
    };
    Ok(SplitPlan {
        policy,
        seed,
        trial,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two tiles per (slide, class) for the given slide→classes layout.
    fn manifest(layout: &[&[GrowthPattern]]) -> Vec<LabeledTile> {
        let mut m = Vec::new();
        for (s, classes) in layout.iter().enumerate() {
            for (j, c) in classes.iter().enumerate() {
                for k in 0..2 {
                    m.push(LabeledTile::new(format!("s{s}_t{j}_{k}"), format!("s{s}"), *c));
                }
            }
        }
        m
    }

    fn one_class_per_slide(per_class: usize) -> Vec<LabeledTile> {
        let layout: Vec<&[GrowthPattern]> = GrowthPattern::ALL
            .iter()
            .flat_map(|g| std::iter::repeat_n(std::slice::from_ref(g), per_class))
            .collect();
        manifest(&layout)
    }

    #[test]
    fn growth_pattern_names_round_trip() {
        for g in GrowthPattern::ALL {
            assert_eq!(g.name().parse::<GrowthPattern>().unwrap(), g);
            assert_eq!(GrowthPattern::from_index(g.index()), Some(g));
        }
    }

    #[test]
    fn wsi_split_holds_out_whole_slides() {
        let m = one_class_per_slide(3);
        let plan = make_wsi_split(&m, &WsiSplitConfig::default(), 7, 0).unwrap();
        let test: HashSet<_> = plan
            .rows_in(Assignment::Test)
            .map(|r| r.tile.slide_id.clone())
            .collect();
        let train: HashSet<_> = plan
            .rows
            .iter()
            .filter(|r| r.assignment != Assignment::Test)
            .map(|r| r.tile.slide_id.clone())
            .collect();
        assert_eq!(test.len(), 6);
        assert!(test.is_disjoint(&train));
        let covered: HashSet<_> = plan.rows_in(Assignment::Test).map(|r| r.tile.label).collect();
        assert_eq!(covered.len(), 6);
        let non_test = plan.rows.iter().filter(|r| r.assignment != Assignment::Test).count();
        assert_eq!(
            plan.rows_in(Assignment::Val).count(),
            (0.1 * non_test as f64).round() as usize
        );
    }

    #[test]
    fn rare_class_slide_always_tested() {
        use GrowthPattern::*;
        // Micropapillary only lives on s5.
        let m = manifest(&[
            &[Lepidic, Acinar],
            &[Papillary, Solid],
            &[NonTumor, Lepidic],
            &[Acinar, Solid],
            &[Papillary, NonTumor],
            &[Micropapillary],
            &[Solid],
            &[Lepidic],
        ]);
        let cfg = WsiSplitConfig {
            n_test_slides: 4,
            ..Default::default()
        };
        for seed in 0..50 {
            let plan = make_wsi_split(&m, &cfg, seed, 0).unwrap();
            assert!(plan.rows_in(Assignment::Test).any(|r| r.tile.slide_id == "s5"));
        }
    }

    #[test]
    fn infeasible_cases() {
        use GrowthPattern::*;
        let single = manifest(&[&GrowthPattern::ALL]);
        assert!(matches!(
            make_wsi_split(&single, &WsiSplitConfig::default(), 1, 0),
            Err(Error::Infeasible(_))
        ));

        // Six classes on seven slides, but no two slides cover everything.
        let m = manifest(&[
            &[Lepidic],
            &[Acinar],
            &[Papillary],
            &[Micropapillary],
            &[Solid],
            &[NonTumor],
            &[Solid],
        ]);
        let cfg = WsiSplitConfig {
            n_test_slides: 2,
            max_draws: 100,
            ..Default::default()
        };
        match make_wsi_split(&m, &cfg, 1, 0) {
            Err(Error::Infeasible(msg)) => assert!(msg.contains("best draw lacked")),
            other => panic!("expected infeasible, got {other:?}"),
        }

        let missing = manifest(&[&[Lepidic], &[Acinar], &[Solid]]);
        match make_wsi_split(
            &missing,
            &WsiSplitConfig {
                n_test_slides: 1,
                ..Default::default()
            },
            1,
            0,
        ) {
            Err(Error::Infeasible(msg)) => assert!(msg.contains("papillary")),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn same_seed_same_plan_and_seed_matters() {
        let m = one_class_per_slide(3);
        let cfg = WsiSplitConfig::default();
        assert_eq!(
            make_wsi_split(&m, &cfg, 11, 2).unwrap(),
            make_wsi_split(&m, &cfg, 11, 2).unwrap()
        );
        let distinct: HashSet<Vec<Assignment>> = (0..20)
            .map(|s| {
                make_wsi_split(&m, &cfg, s, 0)
                    .unwrap()
                    .rows
                    .iter()
                    .map(|r| r.assignment)
                    .collect()
            })
            .collect();
        assert!(distinct.len() > 1);
    }

    fn fold_sizes(plan: &SplitPlan, k: usize) -> Vec<usize> {
        (0..k).map(|f| plan.rows_in(Assignment::Fold(f)).count()).collect()
    }

    #[test]
    fn kfold_sizes() {
        let m: Vec<_> = (0..10)
            .map(|i| LabeledTile::new(format!("t{i}"), "s", GrowthPattern::Solid))
            .collect();
        assert_eq!(fold_sizes(&make_tile_kfold(&m, 5, 3, 0).unwrap(), 5), vec![2; 5]);
        let m11: Vec<_> = (0..11)
            .map(|i| LabeledTile::new(format!("t{i}"), "s", GrowthPattern::Solid))
            .collect();
        assert_eq!(
            fold_sizes(&make_tile_kfold(&m11, 5, 3, 0).unwrap(), 5),
            vec![3, 2, 2, 2, 2]
        );
        assert!(make_tile_kfold(&m[..4], 5, 3, 0).is_err());
        assert!(make_tile_kfold(&m, 1, 3, 0).is_err());
    }

    #[test]
    fn duplicate_tile_ids_rejected() {
        let m = vec![
            LabeledTile::new("a", "s", GrowthPattern::Solid),
            LabeledTile::new("a", "s", GrowthPattern::Solid),
        ];
        assert!(make_tile_kfold(&m, 2, 0, 0).is_err());
    }

    #[test]
    fn kfold_leaks_when_slides_are_large() {
        // Every slide has ≥ k tiles; count leakage by brute force.
        let m = one_class_per_slide(2);
        let k = 2;
        let plan = make_tile_kfold(&m, k, 5, 0).unwrap();
        let report = audit_leakage(&plan, &m).unwrap();
        for (f, p) in report.pairings.iter().enumerate() {
            let brute = plan
                .rows_in(Assignment::Fold(f))
                .filter(|t| {
                    plan.rows
                        .iter()
                        .any(|o| o.assignment != Assignment::Fold(f) && o.tile.slide_id == t.tile.slide_id)
                })
                .count();
            assert_eq!(p.leaked_tiles, brute);
        }

        let wsi = make_wsi_split(&m, &WsiSplitConfig::default(), 5, 0).unwrap();
        assert_eq!(audit_leakage(&wsi, &m).unwrap().total_leaked(), 0);
    }

    #[test]
    fn plan_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = one_class_per_slide(2);
        for plan in [
            make_wsi_split(&m, &WsiSplitConfig::default(), 9, 3).unwrap(),
            make_tile_kfold(&m, 5, 9, 1).unwrap(),
        ] {
            let path = dir.path().join("plan.csv");
            write_plan_csv(&plan, &path).unwrap();
            assert_eq!(read_plan_csv(&path).unwrap(), plan);
        }
        let text = std::fs::read_to_string(dir.path().join("plan.csv")).unwrap();
        assert!(text.starts_with("tile_id,slide_id,label,assignment,trial,seed\n"));
    }
}
