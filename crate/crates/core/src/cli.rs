//! The `cellmap` command line.
//!
//! Every subcommand reads and writes files below the run directory
//! (`io.work_dir`, default `cellmap_run`) unless paths are given explicitly:
//!
//! ```text
//! cohort/   slides/*.json, slides.csv, manifest.csv, cohort_summary.csv   synth
//! nuclei/   {slide}.csv, slides.csv, rejections.csv                      ingest
//! maps/     {slide}.png                                                   rasterize
//! tiles/    {tile_id}.png, tiles.csv                                      tile
//! features.csv                                                            featurize
//! plans/    plan_{wsi|tile}_t{trial}.csv                                  split
//! models/   {plan}_{unit}.svm                                             train-svm
//! scores/   {plan}.csv                                                    train-svm
//! eval/     {plan}.csv, confusion/{plan}.csv                              evaluate
//! audit.csv                                                               audit-splits
//! report.csv, report_paired.csv, report.txt                               report
//! dataset/  tiles/, plans/, manifest.csv, classes.csv                     export-dataset
//! ```
//!
//! Exit status: 0 success, 2 usage, 3 config, 4 data, 5 infeasible split.
//! Failures print one line to stderr:
//! `error kind=<usage|config|data|infeasible> exit=<n> message="<escaped>"`.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{PipelineConfig, PolicyName};
use crate::error::{Error, Result};
use crate::features::{read_feature_csv, write_feature_csv, FeatureVector};
use crate::ingest::{
    filter_classes, parse_nuclei, read_nuclei_csv, write_nuclei_csv, CellClass, RecordPolicy, SlideMeta,
};
use crate::metrics::{
    format_report, read_eval_csv, read_score_csv, write_confusion_csv, write_eval_csv, write_score_csv, MeanStd,
};
use crate::pipeline::{evaluate_plan, feature_rows, read_manifest, slide_features, train_and_score, ManifestEntry};
use crate::raster::{build_cell_map, decode_png, encode_png, encode_tile_png, tile_map, RasterConfig};
use crate::splits::{
    audit_leakage, make_tile_kfold, make_wsi_split, read_plan_csv, write_plan_csv, GrowthPattern, LabeledTile,
};
use crate::synth::{generate_cohort, CohortConfig};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_INFEASIBLE: i32 = 5;

pub const SEED_ENV: &str = "CELLMAP_SEED";

#[derive(Parser, Debug)]
#[command(
    name = "cellmap",
    version,
    about = "Cell-map rasterization, features, splits and SVM baseline"
)]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u32).range(1..))]
    jobs: Option<u32>,
    /// Run directory; overrides `io.work_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    work_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic cohort.
    Synth(SynthArgs),
    /// Parse detector JSON listed in a slide table into nuclei tables.
    Ingest(IngestArgs),
    /// Render one cell map per ingested slide.
    Rasterize(RasterizeArgs),
    /// Cut cell maps into PNG tiles.
    Tile(TileArgs),
    /// Compute per-tile cellular features for the manifest.
    Featurize(FeaturizeArgs),
    /// Write split plans.
    Split(SplitArgs),
    /// Train the linear SVM for each plan and score its test tiles.
    TrainSvm(TrainArgs),
    /// Evaluate score files against their plans.
    Evaluate(EvaluateArgs),
    /// Collect labeled tile PNGs, manifest and plans for external training.
    ExportDataset(ExportArgs),
    /// Count test tiles that share a slide with training tiles.
    AuditSplits(AuditArgs),
    /// Mean ± std summary of weak (tile-based) and strong (WSI-based) validation.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    width: Option<u64>,
    #[arg(long)]
    height: Option<u64>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// CSV with `slide_id,json` and optional `width_px,height_px,detection_mag,map_mag`.
    #[arg(long, value_name = "CSV")]
    slides: Option<PathBuf>,
    #[arg(long, value_parser = ["strict", "skip"])]
    policy: Option<String>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RasterizeArgs {
    #[arg(long, value_name = "DIR")]
    nuclei: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TileArgs {
    #[arg(long, value_name = "DIR")]
    maps: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FeaturizeArgs {
    #[arg(long, value_name = "DIR")]
    nuclei: Option<PathBuf>,
    #[arg(long, value_name = "CSV")]
    manifest: Option<PathBuf>,
    #[arg(long, value_name = "CSV")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long, value_parser = ["wsi", "tile"])]
    policy: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    test_slides: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "CSV")]
    manifest: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Plan CSVs; all plans in the run directory when omitted.
    #[arg(long, value_name = "CSV")]
    plan: Vec<PathBuf>,
    #[arg(long, value_name = "CSV")]
    features: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    eta0: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_name = "DIR")]
    models: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    scores: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Plan CSVs; all plans in the run directory when omitted.
    #[arg(long, value_name = "CSV")]
    plan: Vec<PathBuf>,
    /// Score CSVs, paired with `--plan` by position. Defaults to
    /// `scores/{plan}.csv`.
    #[arg(long, value_name = "CSV")]
    scores: Vec<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long, value_name = "DIR")]
    tiles: Option<PathBuf>,
    #[arg(long, value_name = "CSV")]
    manifest: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    plans: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AuditArgs {
    #[arg(long, value_name = "CSV")]
    plan: Vec<PathBuf>,
    #[arg(long, value_name = "CSV")]
    manifest: Option<PathBuf>,
    #[arg(long, value_name = "CSV")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long, value_name = "DIR")]
    eval: Option<PathBuf>,
    /// Report CSV; the paired and text reports go next to it.
    #[arg(long, value_name = "CSV")]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Pipeline(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Pipeline(e)
    }
}

impl Failure {
    fn kind_and_code(&self) -> (&'static str, i32) {
        match self {
            Failure::Usage(_) => ("usage", EXIT_USAGE),
            Failure::Pipeline(e) => match exit_code(e) {
                EXIT_CONFIG => ("config", EXIT_CONFIG),
                EXIT_INFEASIBLE => ("infeasible", EXIT_INFEASIBLE),
                code => ("data", code),
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) => m.clone(),
            Failure::Pipeline(e) => e.to_string(),
        }
    }
}

/// Exit status for a pipeline error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Infeasible(_) => EXIT_INFEASIBLE,
        _ => EXIT_DATA,
    }
}

/// Runs the CLI with `CELLMAP_SEED` taken from the process environment.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let env_seed = std::env::var(SEED_ENV).ok();
    run_with_env(args, env_seed.as_deref())
}

/// Runs the CLI with an explicit value for the seed override.
pub fn run_with_env<I, T>(args: I, env_seed: Option<&str>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let first = e
                .to_string()
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ")
                .to_string();
            return report_failure(&Failure::Usage(first));
        }
    };
    match dispatch(cli, env_seed) {
        Ok(()) => 0,
        Err(f) => report_failure(&f),
    }
}

fn report_failure(f: &Failure) -> i32 {
    let (kind, code) = f.kind_and_code();
    eprintln!("error kind={kind} exit={code} message={:?}", f.message());
    code
}

fn dispatch(cli: Cli, env_seed: Option<&str>) -> std::result::Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = env_seed {
        let seed: u64 = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?;
        cfg.set_seed(seed);
    }
    if let Some(w) = &cli.work_dir {
        cfg.io.work_dir = w.clone();
    }
    let go = move || -> std::result::Result<(), Failure> {
        match cli.command {
            Command::Synth(a) => synth(&mut cfg, a),
            Command::Ingest(a) => ingest(&cfg, a),
            Command::Rasterize(a) => rasterize(&cfg, a),
            Command::Tile(a) => tile(&cfg, a),
            Command::Featurize(a) => featurize(&cfg, a),
            Command::Split(a) => split(&mut cfg, a),
            Command::TrainSvm(a) => train_svm(&mut cfg, a),
            Command::Evaluate(a) => evaluate(&cfg, a),
            Command::ExportDataset(a) => export_dataset(&cfg, a),
            Command::AuditSplits(a) => audit_splits(&cfg, a),
            Command::Report(a) => report(&cfg, a),
        }
    };
    match cli.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build()
            .map_err(|e| Failure::Usage(format!("--jobs {n}: {e}")))?
            .install(go),
        None => go(),
    }
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(p: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(p, bytes).map_err(|e| Error::io(p, e))
}

fn read_file(p: &Path) -> Result<Vec<u8>> {
    std::fs::read(p).map_err(|e| Error::io(p, e))
}

/// Sort key that orders `plan_wsi_t2` before `plan_wsi_t10`.
fn natural_key(s: &str) -> (String, u64, String) {
    let digits = s.len() - s.trim_end_matches(|c: char| c.is_ascii_digit()).len();
    let (head, tail) = s.split_at(s.len() - digits);
    (head.to_string(), tail.parse().unwrap_or(0), s.to_string())
}

/// Files in `dir` with extension `ext`, naturally sorted by stem.
fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == ext))
        .collect();
    out.sort_by_key(|p| natural_key(&stem(p)));
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn check_slide_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "slide id `{id}` must be ASCII letters, digits, `-`, `_` or `.`"
        )))
    }
}

fn synth(cfg: &mut PipelineConfig, a: SynthArgs) -> std::result::Result<(), Failure> {
    let s = &mut cfg.synth;
    s.classes = a.classes.unwrap_or(s.classes);
    s.per_class = a.per_class.unwrap_or(s.per_class);
    s.seed = a.seed.unwrap_or(s.seed);
    s.width = a.width.unwrap_or(s.width);
    s.height = a.height.unwrap_or(s.height);
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let out = a.out.unwrap_or_else(|| cfg.io.cohort_dir());
    let slides = generate_cohort(&CohortConfig {
        per_class: cfg.synth.per_class,
        base_seed: cfg.synth.seed,
        n_classes: cfg.synth.classes,
        width: cfg.synth.width,
        height: cfg.synth.height,
        raster: cfg.raster,
    })?;
    mkdir(&out)?;
    crate::synth::write_cohort(&slides, &cfg.ingest.table()?, &out)?;
    let tiles: usize = slides.iter().map(|s| s.tiles.len()).sum();
    println!("synth: {} slides, {tiles} tiles -> {}", slides.len(), out.display());
    Ok(())
}

#[derive(Deserialize)]
struct SlideTableRow {
    slide_id: String,
    json: PathBuf,
    #[serde(default)]
    width_px: Option<u64>,
    #[serde(default)]
    height_px: Option<u64>,
    #[serde(default)]
    detection_mag: Option<f64>,
    #[serde(default)]
    map_mag: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct IngestedSlide {
    slide_id: String,
    width_px: u64,
    height_px: u64,
    detection_mag: f64,
    map_mag: f64,
    nuclei: usize,
    rejected: usize,
}

impl IngestedSlide {
    fn meta(&self) -> Result<SlideMeta> {
        SlideMeta::new(
            &self.slide_id,
            self.width_px,
            self.height_px,
            self.detection_mag,
            self.map_mag,
        )
    }
}

#[derive(Serialize)]
struct RejectionRow<'a> {
    slide_id: &'a str,
    key: &'a str,
    reason: &'a str,
}

fn ingest(cfg: &PipelineConfig, a: IngestArgs) -> std::result::Result<(), Failure> {
    let table_path = a.slides.unwrap_or_else(|| cfg.io.slides_path());
    let policy: RecordPolicy = match a.policy {
        Some(p) => p.parse()?,
        None => cfg.ingest.policy,
    };
    let codes = cfg.ingest.table()?;
    let out = a.out.unwrap_or_else(|| cfg.io.nuclei_dir());

    let mut rdr = csv::Reader::from_path(&table_path).map_err(|e| Error::csv(&table_path, e))?;
    let rows: Vec<SlideTableRow> = rdr
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::csv(&table_path, e))?;
    let mut seen = std::collections::HashSet::new();
    for r in &rows {
        check_slide_id(&r.slide_id)?;
        if !seen.insert(r.slide_id.as_str()) {
            return Err(Error::csv(&table_path, format!("duplicate slide_id `{}`", r.slide_id)).into());
        }
    }
    let base = table_path.parent().unwrap_or(Path::new("")).to_path_buf();
    mkdir(&out)?;

    let results: Vec<(IngestedSlide, Vec<crate::ingest::Rejection>)> = rows
        .par_iter()
        .map(|row| {
            let json = base.join(&row.json);
            let parsed = parse_nuclei(&read_file(&json)?, &codes, policy)
                .map_err(|e| Error::invalid(format!("{}: {e}", json.display())))?;
            let missing = |what: &str| Error::invalid(format!("slide {}: {what} unknown", row.slide_id));
            let meta = SlideMeta::new(
                &row.slide_id,
                row.width_px.or(parsed.fragment.width).ok_or_else(|| missing("width"))?,
                row.height_px
                    .or(parsed.fragment.height)
                    .ok_or_else(|| missing("height"))?,
                row.detection_mag
                    .or(parsed.fragment.mag)
                    .unwrap_or(cfg.raster.detection_mag),
                row.map_mag.unwrap_or(cfg.raster.map_mag),
            )?;
            write_nuclei_csv(&parsed.records, &out.join(format!("{}.csv", row.slide_id)))?;
            Ok((
                IngestedSlide {
                    slide_id: meta.slide_id.clone(),
                    width_px: meta.width_px,
                    height_px: meta.height_px,
                    detection_mag: meta.detection_mag,
                    map_mag: meta.map_mag,
                    nuclei: parsed.records.len(),
                    rejected: parsed.rejected.len(),
                },
                parsed.rejected,
            ))
        })
        .collect::<Result<_>>()?;

    let p = out.join("slides.csv");
    let mut w = csv::Writer::from_path(&p).map_err(|e| Error::csv(&p, e))?;
    for (s, _) in &results {
        w.serialize(s).map_err(|e| Error::csv(&p, e))?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;

    let p = out.join("rejections.csv");
    let mut w = csv::Writer::from_path(&p).map_err(|e| Error::csv(&p, e))?;
    w.write_record(["slide_id", "key", "reason"])
        .map_err(|e| Error::csv(&p, e))?;
    for (s, rej) in &results {
        for r in rej {
            w.serialize(RejectionRow {
                slide_id: &s.slide_id,
                key: &r.key,
                reason: &r.reason,
            })
            .map_err(|e| Error::csv(&p, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&p, e))?;

    let kept: usize = results.iter().map(|(s, _)| s.nuclei).sum();
    let rejected: usize = results.iter().map(|(s, _)| s.rejected).sum();
    println!(
        "ingest: {} slides, {kept} nuclei, {rejected} rejected -> {}",
        results.len(),
        out.display()
    );
    Ok(())
}

fn read_ingested(dir: &Path) -> Result<Vec<IngestedSlide>> {
    let p = dir.join("slides.csv");
    let mut r = csv::Reader::from_path(&p).map_err(|e| Error::csv(&p, e))?;
    let rows: Vec<IngestedSlide> = r
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::csv(&p, e))?;
    for s in &rows {
        check_slide_id(&s.slide_id)?;
    }
    Ok(rows)
}

/// Raster settings for one slide: the slide's own magnifications with the
/// configured disk radius and tile size.
fn slide_raster(cfg: &RasterConfig, meta: &SlideMeta) -> RasterConfig {
    RasterConfig {
        detection_mag: meta.detection_mag,
        map_mag: meta.map_mag,
        ..*cfg
    }
}

fn rasterize(cfg: &PipelineConfig, a: RasterizeArgs) -> std::result::Result<(), Failure> {
    let nuclei = a.nuclei.unwrap_or_else(|| cfg.io.nuclei_dir());
    let out = a.out.unwrap_or_else(|| cfg.io.maps_dir());
    let slides = read_ingested(&nuclei)?;
    mkdir(&out)?;
    let keep = CellClass::RENDERED.into_iter().collect();
    slides.par_iter().try_for_each(|s| -> Result<()> {
        let meta = s.meta()?;
        let recs = filter_classes(&read_nuclei_csv(&nuclei.join(format!("{}.csv", s.slide_id)))?, &keep);
        let map = build_cell_map(&recs, &meta, &slide_raster(&cfg.raster, &meta))?;
        write_file(&out.join(format!("{}.png", s.slide_id)), &encode_png(&map)?)
    })?;
    println!("rasterize: {} maps -> {}", slides.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct TileIndexRow {
    tile_id: String,
    slide_id: String,
    grid_row: usize,
    grid_col: usize,
    file: String,
}

fn tile(cfg: &PipelineConfig, a: TileArgs) -> std::result::Result<(), Failure> {
    let maps = a.maps.unwrap_or_else(|| cfg.io.maps_dir());
    let out = a.out.unwrap_or_else(|| cfg.io.tiles_dir());
    let files = list_files(&maps, "png")?;
    mkdir(&out)?;
    let index: Vec<Vec<TileIndexRow>> = files
        .par_iter()
        .map(|f| {
            let slide = stem(f);
            let map = decode_png(&read_file(f)?).map_err(|e| Error::invalid(format!("{}: {e}", f.display())))?;
            tile_map(&map, &cfg.raster, &slide)
                .iter()
                .map(|t| {
                    write_file(&out.join(t.file_name()), &encode_tile_png(t)?)?;
                    Ok(TileIndexRow {
                        tile_id: t.tile_id(),
                        slide_id: slide.clone(),
                        grid_row: t.grid_row,
                        grid_col: t.grid_col,
                        file: t.file_name(),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let p = out.join("tiles.csv");
    let mut w = csv::Writer::from_path(&p).map_err(|e| Error::csv(&p, e))?;
    let mut n = 0;
    for row in index.iter().flatten() {
        w.serialize(row).map_err(|e| Error::csv(&p, e))?;
        n += 1;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;
    println!("tile: {n} tiles from {} maps -> {}", files.len(), out.display());
    Ok(())
}

fn manifest_tiles(entries: &[ManifestEntry]) -> Vec<LabeledTile> {
    entries.iter().map(|e| e.tile.clone()).collect()
}

fn featurize(cfg: &PipelineConfig, a: FeaturizeArgs) -> std::result::Result<(), Failure> {
    let nuclei = a.nuclei.unwrap_or_else(|| cfg.io.nuclei_dir());
    let manifest_path = a.manifest.unwrap_or_else(|| cfg.io.manifest_path());
    let out = a.out.unwrap_or_else(|| cfg.io.features_path());
    let manifest = read_manifest(&manifest_path)?;
    let slides: HashMap<String, IngestedSlide> = read_ingested(&nuclei)?
        .into_iter()
        .map(|s| (s.slide_id.clone(), s))
        .collect();

    let mut by_slide: BTreeMap<&str, Vec<(usize, usize)>> = BTreeMap::new();
    for e in &manifest {
        let g = e.grid.ok_or_else(|| {
            Error::csv(
                &manifest_path,
                format!("tile {} has no grid_row/grid_col", e.tile.tile_id),
            )
        })?;
        by_slide.entry(e.tile.slide_id.as_str()).or_default().push(g);
    }
    let per_slide: Vec<HashMap<String, FeatureVector>> = by_slide
        .par_iter()
        .map(|(slide, tiles)| {
            let s = slides
                .get(*slide)
                .ok_or_else(|| Error::invalid(format!("slide {slide} is in the manifest but was not ingested")))?;
            let meta = s.meta()?;
            let recs = read_nuclei_csv(&nuclei.join(format!("{slide}.csv")))?;
            Ok(slide_features(&recs, slide, tiles, &slide_raster(&cfg.raster, &meta)))
        })
        .collect::<Result<_>>()?;
    let all: HashMap<String, FeatureVector> = per_slide.into_iter().flatten().collect();
    let rows = feature_rows(&manifest_tiles(&manifest), &all)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    write_feature_csv(&rows, &out)?;
    println!("featurize: {} tiles -> {}", rows.len(), out.display());
    Ok(())
}

fn split(cfg: &mut PipelineConfig, a: SplitArgs) -> std::result::Result<(), Failure> {
    let s = &mut cfg.splits;
    if let Some(p) = a.policy {
        s.policy = p.parse()?;
    }
    s.trials = a.trials.unwrap_or(s.trials);
    s.n_test_slides = a.test_slides.unwrap_or(s.n_test_slides);
    s.val_fraction = a.val_fraction.unwrap_or(s.val_fraction);
    s.k = a.k.unwrap_or(s.k);
    s.seed = a.seed.unwrap_or(s.seed);
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let s = cfg.splits;
    let manifest = manifest_tiles(&read_manifest(&a.manifest.unwrap_or_else(|| cfg.io.manifest_path()))?);
    let out = a.out.unwrap_or_else(|| cfg.io.plans_dir());
    let plans = (0..s.trials as u64)
        .into_par_iter()
        .map(|t| match s.policy {
            PolicyName::Wsi => make_wsi_split(&manifest, &s.wsi(), s.seed, t),
            PolicyName::Tile => make_tile_kfold(&manifest, s.k, s.seed, t),
        })
        .collect::<Result<Vec<_>>>()?;
    mkdir(&out)?;
    for (t, plan) in plans.iter().enumerate() {
        write_plan_csv(plan, &out.join(format!("plan_{}_t{t}.csv", s.policy.name())))?;
    }
    println!("split: {} {} plans -> {}", plans.len(), s.policy.name(), out.display());
    Ok(())
}

fn plans_or_default(given: Vec<PathBuf>, cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    if !given.is_empty() {
        return Ok(given);
    }
    let found = list_files(&cfg.io.plans_dir(), "csv")?;
    if found.is_empty() {
        return Err(Error::invalid(format!("no plans in {}", cfg.io.plans_dir().display())));
    }
    Ok(found)
}

fn train_svm(cfg: &mut PipelineConfig, a: TrainArgs) -> std::result::Result<(), Failure> {
    let h = &mut cfg.svm;
    h.seed = a.seed.unwrap_or(h.seed);
    h.epochs = a.epochs.unwrap_or(h.epochs);
    h.eta0 = a.eta0.unwrap_or(h.eta0);
    h.lambda = a.lambda.unwrap_or(h.lambda);
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let features_path = a.features.unwrap_or_else(|| cfg.io.features_path());
    let features: HashMap<String, FeatureVector> = read_feature_csv(&features_path)?
        .into_iter()
        .map(|r| (r.tile.tile_id, r.features))
        .collect();
    let plans = plans_or_default(a.plan, cfg)?;
    let models = a.models.unwrap_or_else(|| cfg.io.models_dir());
    let scores = a.scores.unwrap_or_else(|| cfg.io.scores_dir());
    mkdir(&models)?;
    mkdir(&scores)?;
    for path in &plans {
        let plan = read_plan_csv(path)?;
        let name = stem(path);
        let units = train_and_score(&plan, &features, &cfg.svm)?;
        let mut rows = Vec::new();
        for u in units {
            u.classifier.save(&models.join(format!("{name}_{}.svm", u.unit.name)))?;
            rows.extend(u.scores);
        }
        write_score_csv(&rows, &scores.join(format!("{name}.csv")))?;
        println!("train-svm: {name}: {} scored tiles", rows.len());
    }
    Ok(())
}

fn evaluate(cfg: &PipelineConfig, a: EvaluateArgs) -> std::result::Result<(), Failure> {
    if !a.scores.is_empty() && a.scores.len() != a.plan.len() {
        return Err(Failure::Usage(format!(
            "{} --scores given for {} --plan; pass one per plan or none",
            a.scores.len(),
            a.plan.len()
        )));
    }
    let plans = plans_or_default(a.plan, cfg)?;
    let scores: Vec<PathBuf> = if a.scores.is_empty() {
        plans
            .iter()
            .map(|p| cfg.io.scores_dir().join(format!("{}.csv", stem(p))))
            .collect()
    } else {
        a.scores
    };
    let out = a.out.unwrap_or_else(|| cfg.io.eval_dir());
    mkdir(&out.join("confusion"))?;
    for (plan_path, score_path) in plans.iter().zip(&scores) {
        let plan = read_plan_csv(plan_path)?;
        let units = evaluate_plan(&plan, &read_score_csv(score_path)?)?;
        let name = stem(plan_path);
        write_eval_csv(&units, &out.join(format!("{name}.csv")))?;
        write_confusion_csv(&units, &out.join("confusion").join(format!("{name}.csv")))?;
        for (unit, r) in &units {
            print!("{}", format_report(&format!("{name} {unit}"), r));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct DatasetRow<'a> {
    tile_id: &'a str,
    slide_id: &'a str,
    label: GrowthPattern,
    label_index: usize,
    png: String,
}

fn export_dataset(cfg: &PipelineConfig, a: ExportArgs) -> std::result::Result<(), Failure> {
    let tiles = a.tiles.unwrap_or_else(|| cfg.io.tiles_dir());
    let manifest = read_manifest(&a.manifest.unwrap_or_else(|| cfg.io.manifest_path()))?;
    let plans = a.plans.unwrap_or_else(|| cfg.io.plans_dir());
    let out = a.out.unwrap_or_else(|| cfg.io.dataset_dir());
    mkdir(&out.join("tiles"))?;

    manifest.par_iter().try_for_each(|e| -> Result<()> {
        let name = format!("{}.png", e.tile.tile_id);
        write_file(&out.join("tiles").join(&name), &read_file(&tiles.join(&name))?)
    })?;

    let p = out.join("manifest.csv");
    let mut w = csv::Writer::from_path(&p).map_err(|e| Error::csv(&p, e))?;
    for e in &manifest {
        w.serialize(DatasetRow {
            tile_id: &e.tile.tile_id,
            slide_id: &e.tile.slide_id,
            label: e.tile.label,
            label_index: e.tile.label.index(),
            png: format!("tiles/{}.png", e.tile.tile_id),
        })
        .map_err(|err| Error::csv(&p, err))?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;

    let p = out.join("classes.csv");
    let mut w = csv::Writer::from_path(&p).map_err(|e| Error::csv(&p, e))?;
    w.write_record(["index", "name"]).map_err(|e| Error::csv(&p, e))?;
    for g in GrowthPattern::ALL {
        w.write_record([g.index().to_string(), g.name().to_string()])
            .map_err(|e| Error::csv(&p, e))?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;

    let mut n_plans = 0;
    if plans.is_dir() {
        mkdir(&out.join("plans"))?;
        for f in list_files(&plans, "csv")? {
            let name = f.file_name().unwrap_or_default();
            write_file(&out.join("plans").join(name), &read_file(&f)?)?;
            n_plans += 1;
        }
    }
    println!(
        "export-dataset: {} tiles, {n_plans} plans -> {}",
        manifest.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct AuditRow<'a> {
    plan: &'a str,
    test_part: &'a str,
    test_tiles: usize,
    leaked_tiles: usize,
}

fn audit_splits(cfg: &PipelineConfig, a: AuditArgs) -> std::result::Result<(), Failure> {
    let manifest = manifest_tiles(&read_manifest(&a.manifest.unwrap_or_else(|| cfg.io.manifest_path()))?);
    let plans = plans_or_default(a.plan, cfg)?;
    let out = a.out.unwrap_or_else(|| cfg.io.work_dir.join("audit.csv"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    let mut w = csv::Writer::from_path(&out).map_err(|e| Error::csv(&out, e))?;
    for path in &plans {
        let name = stem(path);
        let report = audit_leakage(&read_plan_csv(path)?, &manifest)?;
        for p in &report.pairings {
            w.serialize(AuditRow {
                plan: &name,
                test_part: &p.test_part,
                test_tiles: p.test_tiles,
                leaked_tiles: p.leaked_tiles,
            })
            .map_err(|e| Error::csv(&out, e))?;
        }
        let tested: usize = report.pairings.iter().map(|p| p.test_tiles).sum();
        println!(
            "audit-splits: {name}: {} of {tested} test tiles share a slide with training",
            report.total_leaked()
        );
    }
    w.flush().map_err(|e| Error::io(&out, e))?;
    Ok(())
}

/// One evaluation unit as read back from an eval CSV.
struct UnitScore {
    label: String,
    aucroc: f64,
    f1: f64,
    accuracy: f64,
}

fn summary_row(validation: &str, protocol: &str, units: &[UnitScore]) -> Result<(Vec<String>, [MeanStd; 3])> {
    let m = |f: fn(&UnitScore) -> f64| MeanStd::of(&units.iter().map(f).collect::<Vec<_>>());
    let stats = [m(|u| u.aucroc)?, m(|u| u.f1)?, m(|u| u.accuracy)?];
    let mut row = vec![validation.to_string(), protocol.to_string(), units.len().to_string()];
    for s in &stats {
        row.push(format!("{:?}", s.mean));
        row.push(format!("{:?}", s.std));
    }
    Ok((row, stats))
}

fn report(cfg: &PipelineConfig, a: ReportArgs) -> std::result::Result<(), Failure> {
    let eval = a.eval.unwrap_or_else(|| cfg.io.eval_dir());
    let out = a.out.unwrap_or_else(|| cfg.io.work_dir.join("report.csv"));
    let mut weak = Vec::new();
    let mut strong = Vec::new();
    for f in list_files(&eval, "csv")? {
        let name = stem(&f);
        for r in read_eval_csv(&f)? {
            let u = UnitScore {
                label: format!("{name}/{}", r.unit),
                aucroc: r.aucroc_macro,
                f1: r.f1_macro,
                accuracy: r.accuracy,
            };
            if r.unit.starts_with("fold") {
                weak.push(u);
            } else {
                strong.push(u);
            }
        }
    }
    if weak.is_empty() && strong.is_empty() {
        return Err(Error::invalid(format!("no evaluation results in {}", eval.display())).into());
    }

    let header = [
        "validation",
        "protocol",
        "units",
        "aucroc_mean",
        "aucroc_std",
        "f1_macro_mean",
        "f1_macro_std",
        "accuracy_mean",
        "accuracy_std",
    ];
    let mut text = String::new();
    let _ = writeln!(
        text,
        "{:<8} {:<10} {:>5}  {:<13} {:<13} {:<13}",
        "", "", "units", "AUCROC", "F1-macro", "accuracy"
    );
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    let mut w = csv::Writer::from_path(&out).map_err(|e| Error::csv(&out, e))?;
    w.write_record(header).map_err(|e| Error::csv(&out, e))?;
    for (validation, protocol, units) in [("weak", "tile-based", &weak), ("strong", "wsi-based", &strong)] {
        if units.is_empty() {
            continue;
        }
        let (row, s) = summary_row(validation, protocol, units)?;
        w.write_record(&row).map_err(|e| Error::csv(&out, e))?;
        let _ = writeln!(
            text,
            "{validation:<8} {protocol:<10} {:>5}  {:<13} {:<13} {:<13}",
            units.len(),
            s[0].to_string(),
            s[1].to_string(),
            s[2].to_string()
        );
    }
    w.flush().map_err(|e| Error::io(&out, e))?;

    let paired = out.with_file_name(format!("{}_paired.csv", stem(&out)));
    let mut w = csv::Writer::from_path(&paired).map_err(|e| Error::csv(&paired, e))?;
    w.write_record([
        "pair",
        "weak_unit",
        "strong_unit",
        "weak_accuracy",
        "strong_accuracy",
        "margin",
    ])
    .map_err(|e| Error::csv(&paired, e))?;
    let mut wins = 0;
    let n_pairs = weak.len().min(strong.len());
    for (i, (a, b)) in weak.iter().zip(&strong).enumerate() {
        let margin = a.accuracy - b.accuracy;
        wins += usize::from(margin > 0.0);
        w.write_record([
            i.to_string(),
            a.label.clone(),
            b.label.clone(),
            format!("{:?}", a.accuracy),
            format!("{:?}", b.accuracy),
            format!("{margin:?}"),
        ])
        .map_err(|e| Error::csv(&paired, e))?;
    }
    w.flush().map_err(|e| Error::io(&paired, e))?;
    if n_pairs > 0 {
        let _ = writeln!(
            text,
            "tile-based accuracy above WSI-based in {wins} of {n_pairs} paired units"
        );
    }

    write_file(&out.with_extension("txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn natural_order() {
        let mut v = vec!["plan_wsi_t10", "plan_wsi_t2", "plan_tile_t0", "plan_wsi_t0"];
        v.sort_by_key(|s| natural_key(s));
        assert_eq!(v, ["plan_tile_t0", "plan_wsi_t0", "plan_wsi_t2", "plan_wsi_t10"]);
    }

    #[test]
    fn slide_ids() {
        assert!(check_slide_id("TCGA-05-4244.01_x").is_ok());
        for bad in ["", "../x", "a/b", ".hidden", "a b"] {
            assert!(check_slide_id(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Infeasible("x".into())), EXIT_INFEASIBLE);
        assert_eq!(exit_code(&Error::invalid("x")), EXIT_DATA);
    }

    #[test]
    fn usage_errors() {
        assert_eq!(run_with_env(["cellmap", "frobnicate"], None), EXIT_USAGE);
        assert_eq!(run_with_env(["cellmap", "split", "--bogus"], None), EXIT_USAGE);
        assert_eq!(
            run_with_env(["cellmap", "split", "--policy", "random"], None),
            EXIT_USAGE
        );
        assert_eq!(run_with_env(["cellmap", "--jobs", "0", "report"], None), EXIT_USAGE);
        assert_eq!(run_with_env(["cellmap", "--help"], None), 0);
    }

    #[test]
    fn bad_seed_env_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let w = dir.path().to_str().unwrap();
        assert_eq!(
            run_with_env(["cellmap", "--work-dir", w, "report"], Some("seven")),
            EXIT_CONFIG
        );
    }
}
