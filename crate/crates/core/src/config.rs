//! Pipeline configuration file (TOML).
//!
//! Every section and key is optional; missing ones take defaults. Values
//! are resolved in this order, later winning: built-in defaults, the config
//! file, the `CELLMAP_SEED` environment variable (all seeds), command-line
//! flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{CellClass, ClassCodeTable, RecordPolicy};
use crate::raster::RasterConfig;
use crate::splits::{GrowthPattern, WsiSplitConfig};
use crate::svm::SvmHyperparams;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub io: IoConfig,
    pub ingest: IngestConfig,
    pub raster: RasterConfig,
    pub splits: SplitsConfig,
    pub svm: SvmHyperparams,
    pub synth: SynthConfig,
}

/// Artifact locations. Relative paths resolve against the working directory
/// of the process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    /// Root of the run directory; every default artifact path lives below it.
    pub work_dir: PathBuf,
    /// Slide table for `ingest`. Defaults to the synthetic cohort's table.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slides: Option<PathBuf>,
    /// Labeled tile manifest. Defaults to the synthetic cohort's manifest.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig {
            work_dir: PathBuf::from("cellmap_run"),
            slides: None,
            manifest: None,
        }
    }
}

impl IoConfig {
    pub fn cohort_dir(&self) -> PathBuf {
        self.work_dir.join("cohort")
    }

    pub fn slides_path(&self) -> PathBuf {
        self.slides
            .clone()
            .unwrap_or_else(|| self.cohort_dir().join("slides.csv"))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.manifest
            .clone()
            .unwrap_or_else(|| self.cohort_dir().join("manifest.csv"))
    }

    pub fn nuclei_dir(&self) -> PathBuf {
        self.work_dir.join("nuclei")
    }

    pub fn maps_dir(&self) -> PathBuf {
        self.work_dir.join("maps")
    }

    pub fn tiles_dir(&self) -> PathBuf {
        self.work_dir.join("tiles")
    }

    pub fn features_path(&self) -> PathBuf {
        self.work_dir.join("features.csv")
    }

    pub fn plans_dir(&self) -> PathBuf {
        self.work_dir.join("plans")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.work_dir.join("models")
    }

    pub fn scores_dir(&self) -> PathBuf {
        self.work_dir.join("scores")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.work_dir.join("eval")
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.work_dir.join("dataset")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub policy: RecordPolicy,
    /// Detector type code (as a string key) to cell class.
    pub class_codes: BTreeMap<String, CellClass>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            policy: RecordPolicy::default(),
            class_codes: ClassCodeTable::default()
                .iter()
                .map(|(k, c)| (k.to_string(), c))
                .collect(),
        }
    }
}

impl IngestConfig {
    pub fn table(&self) -> Result<ClassCodeTable> {
        let mut pairs = Vec::with_capacity(self.class_codes.len());
        for (k, c) in &self.class_codes {
            let code: i64 = k
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("ingest.class_codes: key `{k}` is not an integer")))?;
            if pairs.iter().any(|(p, _)| *p == code) {
                return Err(Error::Config(format!("ingest.class_codes: code {code} listed twice")));
            }
            pairs.push((code, *c));
        }
        Ok(ClassCodeTable::from_pairs(pairs))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyName {
    #[default]
    Wsi,
    Tile,
}

impl std::str::FromStr for PolicyName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wsi" => Ok(PolicyName::Wsi),
            "tile" => Ok(PolicyName::Tile),
            _ => Err(Error::Config(format!(
                "unknown split policy `{s}` (expected wsi or tile)"
            ))),
        }
    }
}

impl PolicyName {
    pub fn name(self) -> &'static str {
        match self {
            PolicyName::Wsi => "wsi",
            PolicyName::Tile => "tile",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitsConfig {
    pub policy: PolicyName,
    pub seed: u64,
    pub trials: usize,
    pub n_test_slides: usize,
    pub val_fraction: f64,
    pub k: usize,
    pub max_draws: usize,
}

impl Default for SplitsConfig {
    fn default() -> Self {
        let w = WsiSplitConfig::default();
        SplitsConfig {
            policy: PolicyName::Wsi,
            seed: 0,
            trials: 5,
            n_test_slides: w.n_test_slides,
            val_fraction: w.val_fraction,
            k: 5,
            max_draws: w.max_draws,
        }
    }
}

impl SplitsConfig {
    pub fn wsi(&self) -> WsiSplitConfig {
        WsiSplitConfig {
            n_test_slides: self.n_test_slides,
            val_fraction: self.val_fraction,
            max_draws: self.max_draws,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Leading growth patterns to generate, 1 to 6.
    pub classes: usize,
    pub per_class: usize,
    pub seed: u64,
    pub width: u64,
    pub height: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: GrowthPattern::COUNT,
            per_class: 3,
            seed: 0,
            width: 4096,
            height: 4096,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(s).map_err(|e| Error::Config(one_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Sets every seed in the config.
    pub fn set_seed(&mut self, seed: u64) {
        self.splits.seed = seed;
        self.svm.seed = seed;
        self.synth.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.raster
            .validate()
            .map_err(|e| Error::Config(format!("raster: {e}")))?;
        self.ingest.table()?;
        if let Some(p) = &self.io.slides {
            if !p.is_file() {
                return bad(format!("io.slides: {} does not exist", p.display()));
            }
        }
        if let Some(p) = &self.io.manifest {
            if !p.is_file() {
                return bad(format!("io.manifest: {} does not exist", p.display()));
            }
        }
        let s = &self.splits;
        if s.trials == 0 {
            return bad("splits.trials must be at least 1".into());
        }
        if s.k < 2 {
            return bad(format!("splits.k must be at least 2, got {}", s.k));
        }
        if s.n_test_slides == 0 {
            return bad("splits.n_test_slides must be at least 1".into());
        }
        if !(0.0..1.0).contains(&s.val_fraction) {
            return bad(format!("splits.val_fraction {} outside [0, 1)", s.val_fraction));
        }
        if s.max_draws == 0 {
            return bad("splits.max_draws must be at least 1".into());
        }
        let h = &self.svm;
        if !(h.eta0 > 0.0 && h.eta0.is_finite()) {
            return bad(format!("svm.eta0 must be positive, got {}", h.eta0));
        }
        if !(h.lambda >= 0.0 && h.lambda.is_finite()) {
            return bad(format!("svm.lambda must be non-negative, got {}", h.lambda));
        }
        let y = &self.synth;
        if y.classes == 0 || y.classes > GrowthPattern::COUNT {
            return bad(format!("synth.classes must be in 1..=6, got {}", y.classes));
        }
        if y.per_class == 0 {
            return bad("synth.per_class must be at least 1".into());
        }
        let fp = self.raster.footprint();
        if (y.width as f64) < fp || (y.height as f64) < fp {
            return bad(format!(
                "synth extent {}x{} is smaller than one {fp} px tile footprint",
                y.width, y.height
            ));
        }
        Ok(())
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(PipelineConfig::from_toml_str("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn round_trip_default_and_custom() {
        let d = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml_str(&d.to_toml_string().unwrap()).unwrap(), d);

        let mut c = PipelineConfig::default();
        c.io.work_dir = "runs/a b".into();
        c.ingest.policy = RecordPolicy::Skip;
        c.ingest.class_codes.insert("17".into(), CellClass::Dead);
        c.splits.policy = PolicyName::Tile;
        c.splits.val_fraction = 0.1 + 0.2;
        c.svm.lambda = 1e-4;
        c.svm.seed = 99;
        c.synth.width = 3000;
        let text = c.to_toml_string().unwrap();
        assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn partial_sections() {
        let c = PipelineConfig::from_toml_str("[splits]\nseed = 7\npolicy = \"tile\"\n[svm]\nepochs = 3\n").unwrap();
        assert_eq!(c.splits.seed, 7);
        assert_eq!(c.splits.policy, PolicyName::Tile);
        assert_eq!(c.splits.trials, 5);
        assert_eq!(c.svm.epochs, 3);
        assert_eq!(c.svm.eta0, 0.1);
    }

    #[test]
    fn class_codes_from_toml() {
        let c = PipelineConfig::from_toml_str("[ingest.class_codes]\n0 = \"unlabeled\"\n7 = \"neoplastic\"\n").unwrap();
        let t = c.ingest.table().unwrap();
        assert_eq!(t.class_of(7), Some(CellClass::Neoplastic));
        assert_eq!(t.class_of(1), None);
    }

    #[test]
    fn rejections_are_config_errors() {
        for text in [
            "[splits]\nval_fraction = 1.0\n",
            "[splits]\nk = 1\n",
            "[splits]\ntrials = 0\n",
            "[raster]\ntile_size = 0\n",
            "[synth]\nclasses = 7\n",
            "[synth]\nwidth = 100\n",
            "[svm]\neta0 = 0.0\n",
            "[ingest.class_codes]\nx = \"dead\"\n",
            "[ingest.class_codes]\n1 = \"goblin\"\n",
            "[nope]\n",
            "[splits]\nseeds = 3\n",
            "[io]\nmanifest = \"/definitely/not/here.csv\"\n",
            "not toml at all",
        ] {
            match PipelineConfig::from_toml_str(text) {
                Err(Error::Config(m)) => assert!(!m.contains('\n'), "{m}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn set_seed_touches_all() {
        let mut c = PipelineConfig::default();
        c.set_seed(42);
        assert_eq!((c.splits.seed, c.svm.seed, c.synth.seed), (42, 42, 42));
    }
}
