//! Cell-map pipeline for lung adenocarcinoma growth-pattern tiles.
//!
//! * [`ingest`] parses nuclei-detection JSON into [`NucleusRecord`]s.
//! * [`raster`] renders nuclei into three-plane binary cell maps, tiles them
//!   and exports PNGs.
//! * [`features`] computes the twelve per-tile cellular statistics.
//! * [`splits`] builds WSI-based and tile-based validation plans and audits
//!   them for slide leakage.
//! * [`svm`] trains the one-vs-rest linear SVM on those features.
//! * [`metrics`] computes accuracy, macro F1 and macro AUC-ROC.
//! * [`synth`] generates seeded synthetic slides for end-to-end runs.
//! * [`cli`] wires everything behind the `cellmap` binary.

pub mod cli;
pub mod config;
pub mod error;
pub mod features;
pub mod ingest;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod rng;
pub mod splits;
pub mod svm;
pub mod synth;

pub use error::{Error, Result};
pub use features::FeatureVector;
pub use ingest::{CellClass, ClassCodeTable, NucleusRecord, RecordPolicy, SlideMeta};
pub use raster::{CellMap, RasterConfig, TileRecord};
pub use splits::{GrowthPattern, LabeledTile, SplitPlan};
pub use svm::{LinearSvmModel, ScoreVector, SvmClassifier, SvmHyperparams};
