//! Cell-map rasterization.
//!
//! Nuclei are rescaled to the map magnification, rounded half away from zero,
//! and stamped as filled disks (inclusive boundary) onto one binary plane per
//! rendered class. Plane order is fixed: 0 neoplastic, 1 connective,
//! 2 non-neoplastic epithelial. Under RGB export plane 0 is green, plane 1
//! red and plane 2 blue.

use std::io::Cursor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{rescale_to_map, CellClass, NucleusRecord, SlideMeta};
use crate::splits::GrowthPattern;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RasterConfig {
    pub disk_radius: u32,
    pub map_mag: f64,
    pub detection_mag: f64,
    pub tile_size: u32,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            disk_radius: 4,
            map_mag: 5.0,
            detection_mag: 20.0,
            tile_size: 256,
        }
    }
}

impl RasterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 {
            return Err(Error::invalid("tile_size must be positive"));
        }
        if !(self.map_mag > 0.0 && self.detection_mag > self.map_mag) {
            return Err(Error::invalid(format!(
                "need detection_mag > map_mag > 0, got {} and {}",
                self.detection_mag, self.map_mag
            )));
        }
        Ok(())
    }

    /// Tile edge length in detection-magnification pixels.
    pub fn footprint(&self) -> f64 {
        f64::from(self.tile_size) * self.detection_mag / self.map_mag
    }
}

/// Row-major binary raster, one byte per pixel holding 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryPlane {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryPlane {
    pub fn new(width: usize, height: usize) -> Self {
        BinaryPlane {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = u8::from(value);
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn count_set(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// Sets every pixel within `radius` of the rounded center. Out-of-bounds
/// pixels are clipped.
pub fn stamp_disk(plane: &mut BinaryPlane, center: (f64, f64), radius: u32) {
    // f64::round rounds half away from zero.
    let cx = center.0.round() as i64;
    let cy = center.1.round() as i64;
    let r = i64::from(radius);
    let r2 = r * r;
    let (w, h) = (plane.width as i64, plane.height as i64);
    for dy in -r..=r {
        let py = cy + dy;
        if py < 0 || py >= h {
            continue;
        }
        for dx in -r..=r {
            let px = cx + dx;
            if px < 0 || px >= w || dx * dx + dy * dy > r2 {
                continue;
            }
            plane.data[(py * w + px) as usize] = 1;
        }
    }
}

/// Three binary planes sharing one extent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellMap {
    width: usize,
    height: usize,
    planes: [BinaryPlane; 3],
}

impl CellMap {
    pub fn new(width: usize, height: usize) -> Self {
        CellMap {
            width,
            height,
            planes: std::array::from_fn(|_| BinaryPlane::new(width, height)),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn plane(&self, index: usize) -> &BinaryPlane {
        &self.planes[index]
    }

    pub fn plane_mut(&mut self, index: usize) -> &mut BinaryPlane {
        &mut self.planes[index]
    }

    /// Plane holding `class`, if it is rendered at all.
    pub fn plane_index(class: CellClass) -> Option<usize> {
        match class {
            CellClass::Neoplastic => Some(0),
            CellClass::Connective => Some(1),
            CellClass::NonNeoplasticEpithelial => Some(2),
            _ => None,
        }
    }
}

/// Map extent for a slide: ceil of the rescaled width and height.
pub fn map_dimensions(meta: &SlideMeta) -> (usize, usize) {
    let s = meta.scale();
    (
        (meta.width_px as f64 * s).ceil() as usize,
        (meta.height_px as f64 * s).ceil() as usize,
    )
}

/// Renders records into a cell map. Records must already be filtered to the
/// three rendered classes.
pub fn build_cell_map(records: &[NucleusRecord], meta: &SlideMeta, cfg: &RasterConfig) -> Result<CellMap> {
    meta.validate()?;
    cfg.validate()?;
    let (w, h) = map_dimensions(meta);
    let mut map = CellMap::new(w, h);
    for r in records {
        let plane = CellMap::plane_index(r.class).ok_or_else(|| {
            Error::invalid(format!(
                "slide {}: class {} is not rendered; filter records first",
                meta.slide_id, r.class
            ))
        })?;
        stamp_disk(&mut map.planes[plane], rescale_to_map(r, meta), cfg.disk_radius);
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileRecord {
    pub slide_id: String,
    pub grid_row: usize,
    pub grid_col: usize,
    pub pixels: CellMap,
    pub label: Option<GrowthPattern>,
}

impl TileRecord {
    pub fn tile_id(&self) -> String {
        tile_id(&self.slide_id, self.grid_row, self.grid_col)
    }

    pub fn file_name(&self) -> String {
        format!("{}.png", self.tile_id())
    }
}

/// `{slide_id}_r{row}_c{col}`, shared by PNG names and manifests.
pub fn tile_id(slide_id: &str, row: usize, col: usize) -> String {
    format!("{slide_id}_r{row}_c{col}")
}

/// Grid shape (rows, cols) covering a `width`×`height` map.
pub fn grid_shape(width: usize, height: usize, tile_size: usize) -> (usize, usize) {
    (height.div_ceil(tile_size), width.div_ceil(tile_size))
}

/// Cuts a map into row-major, non-overlapping tiles anchored at the origin.
/// Edge tiles are zero-padded on the right and bottom.
pub fn tile_map(map: &CellMap, cfg: &RasterConfig, slide_id: &str) -> Vec<TileRecord> {
    let ts = cfg.tile_size as usize;
    let (rows, cols) = grid_shape(map.width, map.height, ts);
    let mut tiles = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let mut pixels = CellMap::new(ts, ts);
            let x0 = col * ts;
            let y0 = row * ts;
            let copy_w = ts.min(map.width - x0);
            let copy_h = ts.min(map.height - y0);
            for (src, dst) in map.planes.iter().zip(pixels.planes.iter_mut()) {
                for y in 0..copy_h {
                    let s = (y0 + y) * map.width + x0;
                    dst.data[y * ts..y * ts + copy_w].copy_from_slice(&src.data[s..s + copy_w]);
                }
            }
            tiles.push(TileRecord {
                slide_id: slide_id.to_string(),
                grid_row: row,
                grid_col: col,
                pixels,
                label: None,
            });
        }
    }
    tiles
}

/// Reassembles a `width`×`height` map from tiles, dropping padding.
pub fn stitch_tiles(tiles: &[TileRecord], width: usize, height: usize) -> Result<CellMap> {
    let mut map = CellMap::new(width, height);
    for t in tiles {
        let ts = t.pixels.width;
        if t.pixels.height != ts {
            return Err(Error::invalid(format!("tile {} is not square", t.tile_id())));
        }
        let x0 = t.grid_col * ts;
        let y0 = t.grid_row * ts;
        if x0 >= width || y0 >= height {
            return Err(Error::invalid(format!(
                "tile {} lies outside {width}x{height}",
                t.tile_id()
            )));
        }
        let copy_w = ts.min(width - x0);
        let copy_h = ts.min(height - y0);
        for (src, dst) in t.pixels.planes.iter().zip(map.planes.iter_mut()) {
            for y in 0..copy_h {
                let d = (y0 + y) * width + x0;
                dst.data[d..d + copy_w].copy_from_slice(&src.data[y * ts..y * ts + copy_w]);
            }
        }
    }
    Ok(map)
}

/// 8-bit RGB PNG: R = connective, G = neoplastic, B = non-neoplastic.
pub fn encode_png(map: &CellMap) -> Result<Vec<u8>> {
    let n = map.width * map.height;
    let mut rgb = vec![0u8; n * 3];
    for i in 0..n {
        rgb[3 * i] = 255 * map.planes[1].data[i];
        rgb[3 * i + 1] = 255 * map.planes[0].data[i];
        rgb[3 * i + 2] = 255 * map.planes[2].data[i];
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, map.width as u32, map.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Balanced);
        enc.set_filter(png::Filter::Up);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer.write_image_data(&rgb).map_err(|e| Error::Png(e.to_string()))?;
        writer.finish().map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

pub fn encode_tile_png(tile: &TileRecord) -> Result<Vec<u8>> {
    encode_png(&tile.pixels)
}

/// Decodes a PNG written by [`encode_png`]. Channel values other than 0 and
/// 255 are rejected.
pub fn decode_png(bytes: &[u8]) -> Result<CellMap> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!(
            "expected 8-bit RGB, got {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut map = CellMap::new(w, h);
    for y in 0..h {
        let row = &buf[y * info.line_size..y * info.line_size + 3 * w];
        for x in 0..w {
            let px = &row[3 * x..3 * x + 3];
            let bit = |v: u8| match v {
                0 => Ok(0),
                255 => Ok(1),
                other => Err(Error::Png(format!("non-binary value {other} at ({x}, {y})"))),
            };
            let i = y * w + x;
            map.planes[1].data[i] = bit(px[0])?;
            map.planes[0].data[i] = bit(px[1])?;
            map.planes[2].data[i] = bit(px[2])?;
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Lattice points with dx² + dy² ≤ r², enumerated independently.
    fn lattice_count(r: i64, quadrant: bool) -> usize {
        let lo = if quadrant { 0 } else { -r };
        (lo..=r)
            .flat_map(|dx| (lo..=r).map(move |dy| (dx, dy)))
            .filter(|(dx, dy)| dx * dx + dy * dy <= r * r)
            .count()
    }

    #[test]
    fn disk_counts_match_lattice() {
        assert_eq!(lattice_count(4, false), 49);
        assert_eq!(lattice_count(4, true), 17);

        let mut p = BinaryPlane::new(64, 64);
        stamp_disk(&mut p, (10.0, 10.0), 4);
        assert_eq!(p.count_set(), 49);

        let mut p = BinaryPlane::new(64, 64);
        stamp_disk(&mut p, (0.0, 0.0), 4);
        assert_eq!(p.count_set(), 17);
    }

    #[test]
    fn stamping_is_idempotent() {
        let mut a = BinaryPlane::new(32, 32);
        stamp_disk(&mut a, (7.4, 9.6), 4);
        let once = a.clone();
        stamp_disk(&mut a, (7.4, 9.6), 4);
        assert_eq!(a, once);
    }

    #[test]
    fn rounding_half_away_from_zero() {
        let mut p = BinaryPlane::new(16, 16);
        stamp_disk(&mut p, (2.5, 3.5), 0);
        assert_eq!(p.get(3, 4), 1);
        assert_eq!(p.count_set(), 1);
    }

    #[test]
    fn far_outside_center_sets_nothing() {
        let mut p = BinaryPlane::new(8, 8);
        stamp_disk(&mut p, (100.0, -50.0), 4);
        assert_eq!(p.count_set(), 0);
    }

    #[test]
    fn single_nucleus_map() {
        let meta = SlideMeta::new("s", 1024, 1024, 20.0, 5.0).unwrap();
        let recs = [NucleusRecord::new(40.0, 40.0, CellClass::Neoplastic)];
        let map = build_cell_map(&recs, &meta, &RasterConfig::default()).unwrap();
        assert_eq!((map.width(), map.height()), (256, 256));
        assert_eq!(map.plane(0).count_set(), 49);
        assert_eq!(map.plane(0).get(10, 10), 1);
        assert_eq!(map.plane(0).get(14, 10), 1);
        assert_eq!(map.plane(0).get(15, 10), 0);
        assert_eq!(map.plane(1).count_set(), 0);
        assert_eq!(map.plane(2).count_set(), 0);
    }

    #[test]
    fn empty_records_and_odd_extent() {
        let meta = SlideMeta::new("s", 1001, 999, 20.0, 5.0).unwrap();
        let map = build_cell_map(&[], &meta, &RasterConfig::default()).unwrap();
        assert_eq!((map.width(), map.height()), (251, 250));
        assert!((0..3).all(|i| map.plane(i).count_set() == 0));
    }

    #[test]
    fn planes_independent() {
        let meta = SlideMeta::new("s", 1024, 1024, 20.0, 5.0).unwrap();
        let recs = [
            NucleusRecord::new(200.0, 200.0, CellClass::Neoplastic),
            NucleusRecord::new(200.0, 200.0, CellClass::NonNeoplasticEpithelial),
        ];
        let map = build_cell_map(&recs, &meta, &RasterConfig::default()).unwrap();
        assert_eq!(map.plane(0), map.plane(2));
        assert_eq!(map.plane(0).count_set(), 49);
        assert_eq!(map.plane(1).count_set(), 0);
    }

    #[test]
    fn unrendered_class_rejected() {
        let meta = SlideMeta::new("s", 64, 64, 20.0, 5.0).unwrap();
        let recs = [NucleusRecord::new(1.0, 1.0, CellClass::Inflammatory)];
        assert!(build_cell_map(&recs, &meta, &RasterConfig::default()).is_err());
    }

    #[test]
    fn tiling_examples() {
        let cfg = RasterConfig::default();
        let tiles = tile_map(&CellMap::new(512, 512), &cfg, "s");
        let grid: Vec<_> = tiles.iter().map(|t| (t.grid_row, t.grid_col)).collect();
        assert_eq!(grid, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);

        let mut map = CellMap::new(300, 256);
        for y in 0..256 {
            map.plane_mut(0).set(299, y, true);
            map.plane_mut(1).set(256, y, true);
        }
        let tiles = tile_map(&map, &cfg, "s");
        assert_eq!(tiles.len(), 2);
        let edge = &tiles[1];
        assert_eq!((edge.grid_row, edge.grid_col), (0, 1));
        assert_eq!(edge.pixels.plane(0).get(43, 5), 1);
        assert_eq!(edge.pixels.plane(1).get(0, 5), 1);
        assert!((44..256).all(|x| (0..3).all(|p| edge.pixels.plane(p).get(x, 100) == 0)));

        let mut one = CellMap::new(256, 256);
        stamp_disk(one.plane_mut(2), (100.0, 30.0), 4);
        let tiles = tile_map(&one, &cfg, "s");
        assert_eq!(tiles.len(), 1);
        assert_eq!(tiles[0].pixels, one);
        assert_eq!(tiles[0].tile_id(), "s_r0_c0");
    }

    #[test]
    fn png_zero_and_green() {
        let cfg = RasterConfig::default();
        let zero = &tile_map(&CellMap::new(256, 256), &cfg, "z")[0];
        let bytes = encode_tile_png(zero).unwrap();
        let back = decode_png(&bytes).unwrap();
        assert_eq!(back, zero.pixels);

        let mut map = CellMap::new(256, 256);
        stamp_disk(map.plane_mut(0), (50.0, 50.0), 4);
        let bytes = encode_png(&map).unwrap();
        let decoder = png::Decoder::new(Cursor::new(&bytes[..]));
        let mut reader = decoder.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        reader.next_frame(&mut buf).unwrap();
        let lit: Vec<_> = buf.chunks(3).filter(|p| p != &[0, 0, 0]).collect();
        assert_eq!(lit.len(), 49);
        assert!(lit.iter().all(|p| p == &[0, 255, 0]));
    }

    #[test]
    fn decode_rejects_grey_values() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 1, 1);
            enc.set_color(png::ColorType::Rgb);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0, 128, 0]).unwrap();
        }
        assert!(decode_png(&out).is_err());
    }
}
