//! Seeded synthetic slides.
//!
//! Each slide carries one growth pattern, laid out as nuclei point patterns
//! at detection magnification:
//!
//! | pattern        | neoplastic                               | other                              |
//! |----------------|------------------------------------------|------------------------------------|
//! | solid          | Poisson-disc sheet, spacing ≈ 12 px      | none                               |
//! | lepidic        | single file along circles, r 120–240 px  | sparse connective in septa         |
//! | acinar         | small rings, r 40–80 px, empty lumina    | sparse connective between rings    |
//! | papillary      | lining both sides of cores at ≈ 14 px    | connective branching cores         |
//! | micropapillary | isolated tufts of 5–10 cells, r ≤ 30 px  | none                               |
//! | non-tumor      | none                                     | non-neoplastic along circles       |
//!
//! Every slide also gets a uniform inflammatory sprinkle. Per-slide style
//! (density multiplier, rotation, positional jitter and a few texture knobs)
//! makes slides of one pattern differ systematically, so tiles of one slide
//! resemble each other more than tiles of another slide with the same label.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::{emit_nuclei_json, CellClass, ClassCodeTable, NucleusRecord, SlideMeta};
use crate::pipeline::{write_manifest, ManifestEntry};
use crate::raster::{grid_shape, tile_id, RasterConfig};
use crate::rng::{self, StreamRng};
use crate::splits::{GrowthPattern, LabeledTile};

/// Spacing between neighbouring nuclei along a curve.
const CELL_STEP: f64 = 11.0;
/// Reference area for per-tile rates (one 1024×1024 footprint).
const TILE_AREA: f64 = 1024.0 * 1024.0;

/// Nuisance parameters shared by all tiles of one slide.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlideStyle {
    /// Scales structure density; in [0.7, 1.3].
    pub density: f64,
    /// Global rotation in radians.
    pub rotation: f64,
    /// Gaussian positional jitter σ in pixels.
    pub jitter_sigma: f64,
    /// Scales the spacing of nuclei along curves; in [0.85, 1.15].
    pub cell_spacing: f64,
    /// Inflammatory nuclei per 1024² footprint.
    pub inflammatory_rate: f64,
}

impl SlideStyle {
    pub fn sample(rng: &mut StreamRng) -> Self {
        SlideStyle {
            density: rng.random_range(0.7..=1.3),
            rotation: rng.random_range(0.0..TAU),
            jitter_sigma: rng.random_range(0.5..3.0),
            cell_spacing: rng.random_range(0.85..=1.15),
            inflammatory_rate: rng.random_range(4.0..20.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSlideConfig {
    pub slide_id: String,
    pub pattern: GrowthPattern,
    pub slide_seed: u64,
    pub style: SlideStyle,
    pub width: u64,
    pub height: u64,
    pub raster: RasterConfig,
}

impl SynthSlideConfig {
    /// Style drawn from `slide_seed`; default 4096² extent.
    pub fn new(slide_id: impl Into<String>, pattern: GrowthPattern, slide_seed: u64) -> Self {
        let style = SlideStyle::sample(&mut rng::stream(slide_seed, 1));
        SynthSlideConfig {
            slide_id: slide_id.into(),
            pattern,
            slide_seed,
            style,
            width: 4096,
            height: 4096,
            raster: RasterConfig::default(),
        }
    }

    pub fn with_extent(mut self, width: u64, height: u64) -> Self {
        self.width = width;
        self.height = height;
        self
    }

    fn validate(&self) -> Result<()> {
        self.raster.validate()?;
        let fp = self.raster.footprint();
        if (self.width as f64) < fp || (self.height as f64) < fp {
            return Err(Error::invalid(format!(
                "extent {}x{} is smaller than one {fp} px tile footprint",
                self.width, self.height
            )));
        }
        let s = &self.style;
        if !(s.density > 0.0 && s.cell_spacing > 0.0 && s.jitter_sigma >= 0.0 && s.inflammatory_rate >= 0.0) {
            return Err(Error::invalid(format!("invalid slide style {s:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSlide {
    pub meta: SlideMeta,
    pub pattern: GrowthPattern,
    pub records: Vec<NucleusRecord>,
    /// (row, col) of every map tile, row-major; all carry `pattern`.
    pub tiles: Vec<(usize, usize)>,
}

impl SyntheticSlide {
    pub fn labeled_tiles(&self) -> Vec<LabeledTile> {
        self.tiles
            .iter()
            .map(|&(r, c)| LabeledTile::new(tile_id(&self.meta.slide_id, r, c), &self.meta.slide_id, self.pattern))
            .collect()
    }
}

/// Points are built in an unrotated square frame of side `side` that covers
/// the slide under any rotation, then rotated about the slide center.
struct Canvas {
    side: f64,
    pts: Vec<(f64, f64, CellClass)>,
}

impl Canvas {
    fn push(&mut self, x: f64, y: f64, class: CellClass) {
        self.pts.push((x, y, class));
    }

    /// Nuclei every `step` px along a circle, starting at a random phase.
    fn circle(&mut self, rng: &mut StreamRng, cx: f64, cy: f64, r: f64, step: f64, class: CellClass) {
        let n = ((TAU * r) / step).round().max(3.0) as usize;
        let phase = rng.random_range(0.0..TAU);
        for i in 0..n {
            let a = phase + TAU * i as f64 / n as f64;
            self.push(cx + r * a.cos(), cy + r * a.sin(), class);
        }
    }

    /// Jittered grid of structure centers with spacing `g`.
    fn centers(&self, rng: &mut StreamRng, g: f64, jitter: f64) -> Vec<(f64, f64)> {
        let n = (self.side / g).ceil() as usize;
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                out.push((
                    (j as f64 + 0.5) * g + rng.random_range(-jitter..=jitter),
                    (i as f64 + 0.5) * g + rng.random_range(-jitter..=jitter),
                ));
            }
        }
        out
    }

    fn sprinkle(&mut self, rng: &mut StreamRng, per_tile: f64, class: CellClass) {
        let mean = per_tile * self.side * self.side / TILE_AREA;
        if mean <= 0.0 {
            return;
        }
        let n = Poisson::new(mean).map(|p| p.sample(rng) as usize).unwrap_or(0);
        for _ in 0..n {
            let x = rng.random_range(0.0..self.side);
            let y = rng.random_range(0.0..self.side);
            self.push(x, y, class);
        }
    }
}

/// Bridson dart throwing over `[0, side)²` with minimum spacing `r` and `k`
/// candidates per active point.
pub fn poisson_disc(rng: &mut StreamRng, side: f64, r: f64, k: usize) -> Vec<(f64, f64)> {
    let cell = r / std::f64::consts::SQRT_2;
    let n = (side / cell).ceil() as usize;
    let mut grid: Vec<Option<usize>> = vec![None; n * n];
    let mut pts: Vec<(f64, f64)> = Vec::new();
    let mut active: Vec<usize> = Vec::new();
    let gi = |p: (f64, f64)| ((p.1 / cell) as usize).min(n - 1) * n + ((p.0 / cell) as usize).min(n - 1);

    let first = (rng.random_range(0.0..side), rng.random_range(0.0..side));
    grid[gi(first)] = Some(0);
    pts.push(first);
    active.push(0);
    let r2 = r * r;
    while !active.is_empty() {
        let slot = rng.random_range(0..active.len());
        let base = pts[active[slot]];
        let mut placed = false;
        for _ in 0..k {
            let a = rng.random_range(0.0..TAU);
            let d = r * (1.0 + rng.random::<f64>());
            let c = (base.0 + d * a.cos(), base.1 + d * a.sin());
            if !(0.0..side).contains(&c.0) || !(0.0..side).contains(&c.1) {
                continue;
            }
            let cx = (c.0 / cell) as usize;
            let cy = (c.1 / cell) as usize;
            let mut ok = true;
            'scan: for yy in cy.saturating_sub(2)..(cy + 3).min(n) {
                for xx in cx.saturating_sub(2)..(cx + 3).min(n) {
                    if let Some(j) = grid[yy * n + xx] {
                        let q = pts[j];
                        if (q.0 - c.0).powi(2) + (q.1 - c.1).powi(2) < r2 {
                            ok = false;
                            break 'scan;
                        }
                    }
                }
            }
            if ok {
                grid[gi(c)] = Some(pts.len());
                active.push(pts.len());
                pts.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            active.swap_remove(slot);
        }
    }
    pts
}

fn solid(c: &mut Canvas, rng: &mut StreamRng, st: &SlideStyle) {
    let spacing = 12.0 / st.density.sqrt();
    for (x, y) in poisson_disc(rng, c.side, spacing, 30) {
        c.push(x, y, CellClass::Neoplastic);
    }
}

fn curves(c: &mut Canvas, rng: &mut StreamRng, st: &SlideStyle, class: CellClass, septa_rate: f64) {
    let g = 520.0 / st.density.sqrt();
    let step = CELL_STEP * st.cell_spacing;
    for (cx, cy) in c.centers(rng, g, 0.1 * g) {
        let r = rng.random_range(120.0..=240.0);
        c.circle(rng, cx, cy, r, step, class);
    }
    c.sprinkle(rng, septa_rate * st.density, CellClass::Connective);
}

fn acinar(c: &mut Canvas, rng: &mut StreamRng, st: &SlideStyle) {
    let g = 200.0 / st.density.sqrt();
    let step = CELL_STEP * st.cell_spacing;
    for (cx, cy) in c.centers(rng, g, 0.12 * g) {
        let r = rng.random_range(40.0..=80.0);
        c.circle(rng, cx, cy, r, step, CellClass::Neoplastic);
    }
    c.sprinkle(rng, 2.0 * st.density, CellClass::Connective);
}

/// A fibrovascular core from `a` to `b`: connective nuclei on the axis and
/// neoplastic nuclei lining both sides.
fn core_segment(c: &mut Canvas, a: (f64, f64), b: (f64, f64), step: f64) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len = (dx * dx + dy * dy).sqrt();
    if len == 0.0 {
        return;
    }
    let (ux, uy) = (dx / len, dy / len);
    let (nx, ny) = (-uy, ux);
    let n = (len / step).floor() as usize;
    for i in 0..=n {
        let t = i as f64 * step;
        let (px, py) = (a.0 + ux * t, a.1 + uy * t);
        c.push(px, py, CellClass::Connective);
        c.push(px + 14.0 * nx, py + 14.0 * ny, CellClass::Neoplastic);
        c.push(px - 14.0 * nx, py - 14.0 * ny, CellClass::Neoplastic);
    }
}

fn papillary(c: &mut Canvas, rng: &mut StreamRng, st: &SlideStyle) {
    let spacing = 260.0 / st.density.sqrt();
    let step = CELL_STEP * st.cell_spacing;
    let n_trunks = (c.side / spacing).ceil() as usize;
    for i in 0..n_trunks {
        // Trunks run roughly along x as wavy polylines.
        let y0 = (i as f64 + 0.5) * spacing;
        let mut prev = (0.0, y0 + rng.random_range(-20.0..20.0));
        let mut x = 0.0;
        while x < c.side {
            x += rng.random_range(80.0..140.0);
            let next = (x, y0 + rng.random_range(-30.0..30.0));
            core_segment(c, prev, next, step);
            if rng.random_bool(0.6) {
                let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let ang = side * rng.random_range(PI / 6.0..PI / 3.0);
                let l = rng.random_range(60.0..120.0);
                let tip = (next.0 + l * ang.cos(), next.1 + l * ang.sin());
                core_segment(c, next, tip, step);
            }
            prev = next;
        }
    }
}

fn micropapillary(c: &mut Canvas, rng: &mut StreamRng, st: &SlideStyle) {
    let g = 170.0 / st.density.sqrt();
    for (cx, cy) in c.centers(rng, g, 0.3 * g) {
        let n = rng.random_range(5..=10);
        let mut placed: Vec<(f64, f64)> = Vec::with_capacity(n);
        let mut tries = 0;
        while placed.len() < n && tries < 200 {
            tries += 1;
            let a = rng.random_range(0.0..TAU);
            let d = 30.0 * rng.random::<f64>().sqrt();
            let p = (cx + d * a.cos(), cy + d * a.sin());
            if placed.iter().all(|q| (q.0 - p.0).powi(2) + (q.1 - p.1).powi(2) >= 64.0) {
                placed.push(p);
            }
        }
        for (x, y) in placed {
            c.push(x, y, CellClass::Neoplastic);
        }
    }
}

/// Generates one slide. Deterministic for a fixed config.
pub fn generate_slide(cfg: &SynthSlideConfig) -> Result<SyntheticSlide> {
    cfg.validate()?;
    let meta = SlideMeta::new(
        &cfg.slide_id,
        cfg.width,
        cfg.height,
        cfg.raster.detection_mag,
        cfg.raster.map_mag,
    )?;
    let st = &cfg.style;
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let side = (w * w + h * h).sqrt().ceil();
    let mut canvas = Canvas { side, pts: Vec::new() };
    let mut rng = rng::stream(cfg.slide_seed, 2);

    match cfg.pattern {
        GrowthPattern::Solid => solid(&mut canvas, &mut rng, st),
        GrowthPattern::Lepidic => curves(&mut canvas, &mut rng, st, CellClass::Neoplastic, 1.5),
        GrowthPattern::NonTumor => curves(&mut canvas, &mut rng, st, CellClass::NonNeoplasticEpithelial, 1.5),
        GrowthPattern::Acinar => acinar(&mut canvas, &mut rng, st),
        GrowthPattern::Papillary => papillary(&mut canvas, &mut rng, st),
        GrowthPattern::Micropapillary => micropapillary(&mut canvas, &mut rng, st),
    }
    canvas.sprinkle(&mut rng, st.inflammatory_rate, CellClass::Inflammatory);

    let (sin, cos) = st.rotation.sin_cos();
    let half = side / 2.0;
    let jitter = Normal::new(0.0, st.jitter_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut records = Vec::with_capacity(canvas.pts.len());
    for &(x, y, class) in &canvas.pts {
        let (lx, ly) = (x - half, y - half);
        let rx = w / 2.0 + cos * lx - sin * ly + jitter.sample(&mut rng);
        let ry = h / 2.0 + sin * lx + cos * ly + jitter.sample(&mut rng);
        if (0.0..w).contains(&rx) && (0.0..h).contains(&ry) {
            // Two decimals keeps files compact and survives a JSON round trip.
            let q = |v: f64| (v * 100.0).round() / 100.0;
            let (qx, qy) = (q(rx), q(ry));
            if qx < w && qy < h {
                records.push(NucleusRecord::new(qx, qy, class));
            }
        }
    }

    let scale = meta.scale();
    let (rows, cols) = grid_shape(
        (w * scale).ceil() as usize,
        (h * scale).ceil() as usize,
        cfg.raster.tile_size as usize,
    );
    let tiles = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect();
    Ok(SyntheticSlide {
        meta,
        pattern: cfg.pattern,
        records,
        tiles,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortConfig {
    pub per_class: usize,
    pub base_seed: u64,
    /// Leading entries of [`GrowthPattern::ALL`] to generate.
    pub n_classes: usize,
    pub width: u64,
    pub height: u64,
    pub raster: RasterConfig,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            per_class: 3,
            base_seed: 0,
            n_classes: GrowthPattern::COUNT,
            width: 4096,
            height: 4096,
            raster: RasterConfig::default(),
        }
    }
}

/// Seed of slide `index` of `class` under `base_seed`.
pub fn slide_seed(base_seed: u64, class: GrowthPattern, index: usize) -> u64 {
    rng::stream(base_seed, ((class.index() as u64 + 1) << 32) | index as u64).next_u64()
}

pub fn slide_name(class: GrowthPattern, index: usize) -> String {
    format!("syn_{}_{index:02}", class.name())
}

/// Slide configs of a cohort, ordered by class then index.
pub fn cohort_configs(cfg: &CohortConfig) -> Result<Vec<SynthSlideConfig>> {
    if cfg.per_class == 0 {
        return Err(Error::invalid("per_class must be at least 1"));
    }
    if cfg.n_classes == 0 || cfg.n_classes > GrowthPattern::COUNT {
        return Err(Error::invalid(format!(
            "n_classes must be in 1..=6, got {}",
            cfg.n_classes
        )));
    }
    Ok(GrowthPattern::ALL[..cfg.n_classes]
        .iter()
        .flat_map(|&g| {
            (0..cfg.per_class).map(move |i| {
                let mut s = SynthSlideConfig::new(slide_name(g, i), g, slide_seed(cfg.base_seed, g, i))
                    .with_extent(cfg.width, cfg.height);
                s.raster = cfg.raster;
                s
            })
        })
        .collect())
}

pub fn generate_cohort(cfg: &CohortConfig) -> Result<Vec<SyntheticSlide>> {
    cohort_configs(cfg)?.par_iter().map(generate_slide).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassSummary {
    pub class: GrowthPattern,
    pub slides: usize,
    pub tiles: usize,
    pub nuclei: usize,
    pub mean_neoplastic_per_tile: f64,
    pub mean_connective_per_tile: f64,
    pub mean_non_neoplastic_per_tile: f64,
}

pub fn summarize(slides: &[SyntheticSlide]) -> Vec<ClassSummary> {
    GrowthPattern::ALL
        .iter()
        .filter_map(|&g| {
            let of: Vec<_> = slides.iter().filter(|s| s.pattern == g).collect();
            if of.is_empty() {
                return None;
            }
            let tiles: usize = of.iter().map(|s| s.tiles.len()).sum();
            let count = |c: CellClass| {
                of.iter().flat_map(|s| &s.records).filter(|r| r.class == c).count() as f64 / tiles.max(1) as f64
            };
            Some(ClassSummary {
                class: g,
                slides: of.len(),
                tiles,
                nuclei: of.iter().map(|s| s.records.len()).sum(),
                mean_neoplastic_per_tile: count(CellClass::Neoplastic),
                mean_connective_per_tile: count(CellClass::Connective),
                mean_non_neoplastic_per_tile: count(CellClass::NonNeoplasticEpithelial),
            })
        })
        .collect()
}

#[derive(Serialize)]
struct SlideRow<'a> {
    slide_id: &'a str,
    pattern: GrowthPattern,
    width_px: u64,
    height_px: u64,
    detection_mag: f64,
    map_mag: f64,
    nuclei: usize,
    json: String,
}

/// Writes `slides/{slide_id}.json`, `slides.csv`, `manifest.csv` and
/// `cohort_summary.csv` under `dir`.
pub fn write_cohort(slides: &[SyntheticSlide], table: &ClassCodeTable, dir: &Path) -> Result<()> {
    let slide_dir = dir.join("slides");
    std::fs::create_dir_all(&slide_dir).map_err(|e| Error::io(&slide_dir, e))?;
    let docs: Vec<Vec<u8>> = slides
        .par_iter()
        .map(|s| emit_nuclei_json(&s.records, &s.meta, table))
        .collect::<Result<_>>()?;
    for (s, doc) in slides.iter().zip(&docs) {
        let p = slide_dir.join(format!("{}.json", s.meta.slide_id));
        std::fs::write(&p, doc).map_err(|e| Error::io(&p, e))?;
    }

    let p = dir.join("slides.csv");
    let mut w = csv::Writer::from_path(&p).map_err(|e| Error::csv(&p, e))?;
    for s in slides {
        w.serialize(SlideRow {
            slide_id: &s.meta.slide_id,
            pattern: s.pattern,
            width_px: s.meta.width_px,
            height_px: s.meta.height_px,
            detection_mag: s.meta.detection_mag,
            map_mag: s.meta.map_mag,
            nuclei: s.records.len(),
            json: format!("slides/{}.json", s.meta.slide_id),
        })
        .map_err(|e| Error::csv(&p, e))?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;

    let entries: Vec<ManifestEntry> = slides
        .iter()
        .flat_map(|s| {
            s.tiles.iter().map(|&(r, c)| ManifestEntry {
                tile: LabeledTile::new(tile_id(&s.meta.slide_id, r, c), &s.meta.slide_id, s.pattern),
                grid: Some((r, c)),
            })
        })
        .collect();
    write_manifest(&entries, &dir.join("manifest.csv"))?;

    let p = dir.join("cohort_summary.csv");
    let mut w = csv::Writer::from_path(&p).map_err(|e| Error::csv(&p, e))?;
    for row in summarize(slides) {
        w.serialize(row).map_err(|e| Error::csv(&p, e))?;
    }
    w.flush().map_err(|e| Error::io(&p, e))
}
