//! Nuclei-detection ingestion.
//!
//! Reads the HoverNet whole-slide JSON convention:
//!
//! ```json
//! { "mag": 20, "nuc": { "1": { "centroid": [x, y], "type": 1, "type_prob": 0.9 } } }
//! ```
//!
//! Only centroids, type codes and (optionally) type confidence are used.
//! Contours, bounding boxes and any other fields are ignored.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Semantic nucleus class (PanNuke taxonomy plus "unlabeled").
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellClass {
    Neoplastic,
    Inflammatory,
    Connective,
    Dead,
    NonNeoplasticEpithelial,
    Unlabeled,
}

impl CellClass {
    pub const ALL: [CellClass; 6] = [
        CellClass::Neoplastic,
        CellClass::Inflammatory,
        CellClass::Connective,
        CellClass::Dead,
        CellClass::NonNeoplasticEpithelial,
        CellClass::Unlabeled,
    ];

    /// The three classes drawn into a cell map.
    pub const RENDERED: [CellClass; 3] = [
        CellClass::Neoplastic,
        CellClass::Connective,
        CellClass::NonNeoplasticEpithelial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CellClass::Neoplastic => "neoplastic",
            CellClass::Inflammatory => "inflammatory",
            CellClass::Connective => "connective",
            CellClass::Dead => "dead",
            CellClass::NonNeoplasticEpithelial => "non_neoplastic_epithelial",
            CellClass::Unlabeled => "unlabeled",
        }
    }
}

impl fmt::Display for CellClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CellClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown cell class `{s}`")))
    }
}

/// One detected nucleus, centroid in detection-magnification pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NucleusRecord {
    pub x: f64,
    pub y: f64,
    pub class: CellClass,
    /// Carried through from the detector; never used for filtering.
    pub type_prob: Option<f64>,
}

impl NucleusRecord {
    pub fn new(x: f64, y: f64, class: CellClass) -> Self {
        NucleusRecord {
            x,
            y,
            class,
            type_prob: None,
        }
    }
}

/// Slide geometry and the two magnifications involved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideMeta {
    pub slide_id: String,
    pub width_px: u64,
    pub height_px: u64,
    pub detection_mag: f64,
    pub map_mag: f64,
}

impl SlideMeta {
    pub fn new(
        slide_id: impl Into<String>,
        width_px: u64,
        height_px: u64,
        detection_mag: f64,
        map_mag: f64,
    ) -> Result<Self> {
        let meta = SlideMeta {
            slide_id: slide_id.into(),
            width_px,
            height_px,
            detection_mag,
            map_mag,
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_px == 0 || self.height_px == 0 {
            return Err(Error::invalid(format!(
                "slide {}: zero extent {}x{}",
                self.slide_id, self.width_px, self.height_px
            )));
        }
        if !(self.map_mag > 0.0 && self.detection_mag > self.map_mag) || !self.detection_mag.is_finite() {
            return Err(Error::invalid(format!(
                "slide {}: need detection_mag > map_mag > 0, got {} and {}",
                self.slide_id, self.detection_mag, self.map_mag
            )));
        }
        Ok(())
    }

    /// Map-space pixels per detection-space pixel.
    pub fn scale(&self) -> f64 {
        self.map_mag / self.detection_mag
    }
}

/// Integer type code to cell class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassCodeTable {
    codes: BTreeMap<i64, CellClass>,
}

impl Default for ClassCodeTable {
    /// PanNuke checkpoint convention.
    fn default() -> Self {
        ClassCodeTable::from_pairs([
            (0, CellClass::Unlabeled),
            (1, CellClass::Neoplastic),
            (2, CellClass::Inflammatory),
            (3, CellClass::Connective),
            (4, CellClass::Dead),
            (5, CellClass::NonNeoplasticEpithelial),
        ])
    }
}

impl ClassCodeTable {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (i64, CellClass)>) -> Self {
        ClassCodeTable {
            codes: pairs.into_iter().collect(),
        }
    }

    pub fn class_of(&self, code: i64) -> Option<CellClass> {
        self.codes.get(&code).copied()
    }

    /// First declared code for a class; used when emitting detector-format JSON.
    pub fn code_of(&self, class: CellClass) -> Option<i64> {
        self.codes.iter().find(|(_, c)| **c == class).map(|(k, _)| *k)
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, CellClass)> + '_ {
        self.codes.iter().map(|(k, v)| (*k, *v))
    }
}

/// What to do with an entry that has an unknown code or a bad centroid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordPolicy {
    #[default]
    Strict,
    Skip,
}

impl FromStr for RecordPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(RecordPolicy::Strict),
            "skip" => Ok(RecordPolicy::Skip),
            _ => Err(Error::invalid(format!("unknown record policy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub key: String,
    pub reason: String,
}

/// Slide-level fields found in the document. Width and height are not part
/// of the detector's own output but are accepted when present.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SlideFragment {
    pub mag: Option<f64>,
    pub width: Option<u64>,
    pub height: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct ParsedNuclei {
    pub records: Vec<NucleusRecord>,
    pub fragment: SlideFragment,
    pub rejected: Vec<Rejection>,
    pub total: usize,
}

#[derive(Deserialize)]
struct RawDocument {
    #[serde(default)]
    mag: Option<f64>,
    #[serde(default)]
    width: Option<u64>,
    #[serde(default)]
    height: Option<u64>,
    nuc: BTreeMap<String, RawNucleus>,
}

#[derive(Deserialize)]
struct RawNucleus {
    centroid: [f64; 2],
    #[serde(rename = "type")]
    type_code: i64,
    #[serde(default)]
    type_prob: Option<f64>,
}

fn key_order(a: &str, b: &str) -> std::cmp::Ordering {
    let ka = a.trim().parse::<i128>().ok();
    let kb = b.trim().parse::<i128>().ok();
    match (ka, kb) {
        (Some(x), Some(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.cmp(b),
    }
}

/// Parses a detector document into nucleus records.
///
/// Records come out ascending by nucleus key read as an integer (non-integer
/// keys last), ties by text. Under [`RecordPolicy::Skip`] bad entries are
/// counted in `rejected`; under `Strict` the first one is an error.
pub fn parse_nuclei(document: &[u8], table: &ClassCodeTable, policy: RecordPolicy) -> Result<ParsedNuclei> {
    let raw: RawDocument = serde_json::from_slice(document).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;

    let mut entries: Vec<(String, RawNucleus)> = raw.nuc.into_iter().collect();
    entries.sort_by(|a, b| key_order(&a.0, &b.0));

    let total = entries.len();
    let mut records = Vec::with_capacity(total);
    let mut rejected = Vec::new();
    for (key, entry) in entries {
        match check_entry(&entry, table) {
            Ok(class) => records.push(NucleusRecord {
                x: entry.centroid[0],
                y: entry.centroid[1],
                class,
                type_prob: entry.type_prob,
            }),
            Err(reason) => match policy {
                RecordPolicy::Strict => return Err(Error::Nucleus { key, reason }),
                RecordPolicy::Skip => rejected.push(Rejection { key, reason }),
            },
        }
    }

    Ok(ParsedNuclei {
        records,
        fragment: SlideFragment {
            mag: raw.mag,
            width: raw.width,
            height: raw.height,
        },
        rejected,
        total,
    })
}

fn check_entry(entry: &RawNucleus, table: &ClassCodeTable) -> std::result::Result<CellClass, String> {
    let [x, y] = entry.centroid;
    if !x.is_finite() || !y.is_finite() {
        return Err(format!("non-finite centroid ({x}, {y})"));
    }
    if x < 0.0 || y < 0.0 {
        return Err(format!("negative centroid ({x}, {y})"));
    }
    table
        .class_of(entry.type_code)
        .ok_or_else(|| format!("unknown type code {}", entry.type_code))
}

/// Keeps records whose class is in `keep`, preserving order.
pub fn filter_classes(records: &[NucleusRecord], keep: &BTreeSet<CellClass>) -> Vec<NucleusRecord> {
    records.iter().filter(|r| keep.contains(&r.class)).copied().collect()
}

/// Centroid in map-magnification pixels. No rounding.
pub fn rescale_to_map(record: &NucleusRecord, meta: &SlideMeta) -> (f64, f64) {
    let s = meta.scale();
    (record.x * s, record.y * s)
}

#[derive(Serialize)]
struct EmitDocument {
    mag: f64,
    width: u64,
    height: u64,
    nuc: BTreeMap<String, EmitNucleus>,
}

#[derive(Serialize)]
struct EmitNucleus {
    centroid: [f64; 2],
    #[serde(rename = "type")]
    type_code: i64,
    #[serde(skip_serializing_if = "Option::is_none")]
    type_prob: Option<f64>,
}

/// Writes records in the detector JSON convention, keys `1..=n` in record
/// order. Classes missing from `table` are an error.
pub fn emit_nuclei_json(records: &[NucleusRecord], meta: &SlideMeta, table: &ClassCodeTable) -> Result<Vec<u8>> {
    let mut nuc = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let code = table
            .code_of(r.class)
            .ok_or_else(|| Error::invalid(format!("no type code for class {}", r.class)))?;
        nuc.insert(
            (i + 1).to_string(),
            EmitNucleus {
                centroid: [r.x, r.y],
                type_code: code,
                type_prob: r.type_prob,
            },
        );
    }
    let doc = EmitDocument {
        mag: meta.detection_mag,
        width: meta.width_px,
        height: meta.height_px,
        nuc,
    };
    serde_json::to_vec(&doc).map_err(|e| Error::invalid(e.to_string()))
}

#[derive(Serialize, Deserialize)]
struct NucleusCsvRow {
    x: f64,
    y: f64,
    class: CellClass,
    type_prob: Option<f64>,
}

/// `x,y,class,type_prob`, one row per record; an empty `type_prob` means none.
pub fn write_nuclei_csv(records: &[NucleusRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in records {
        w.serialize(NucleusCsvRow {
            x: r.x,
            y: r.y,
            class: r.class,
            type_prob: r.type_prob,
        })
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_nuclei_csv(path: &Path) -> Result<Vec<NucleusRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out = Vec::new();
    for rec in r.deserialize::<NucleusCsvRow>() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        if !(rec.x.is_finite() && rec.y.is_finite() && rec.x >= 0.0 && rec.y >= 0.0) {
            return Err(Error::csv(path, format!("bad centroid ({}, {})", rec.x, rec.y)));
        }
        out.push(NucleusRecord {
            x: rec.x,
            y: rec.y,
            class: rec.class,
            type_prob: rec.type_prob,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(doc: &str, policy: RecordPolicy) -> Result<ParsedNuclei> {
        parse_nuclei(doc.as_bytes(), &ClassCodeTable::default(), policy)
    }

    #[test]
    fn maps_default_code() {
        let p = parse(
            r#"{"mag": 20, "nuc": {"1": {"centroid": [100.0, 200.0], "type": 1}}}"#,
            RecordPolicy::Strict,
        )
        .unwrap();
        assert_eq!(p.records, vec![NucleusRecord::new(100.0, 200.0, CellClass::Neoplastic)]);
        assert_eq!(p.fragment.mag, Some(20.0));
        assert!(p.rejected.is_empty());
    }

    #[test]
    fn empty_collection() {
        let p = parse(r#"{"mag": 20, "nuc": {}}"#, RecordPolicy::Strict).unwrap();
        assert!(p.records.is_empty());
        assert_eq!(p.total, 0);
        assert!(p.rejected.is_empty());
    }

    #[test]
    fn unknown_code_policies() {
        let doc = r#"{"nuc": {"1": {"centroid": [1, 2], "type": 7}, "2": {"centroid": [3, 4], "type": 3}}}"#;
        let p = parse(doc, RecordPolicy::Skip).unwrap();
        assert_eq!(p.rejected.len(), 1);
        assert_eq!(p.rejected[0].key, "1");
        assert_eq!(p.records.len(), 1);
        assert_eq!(p.records.len() + p.rejected.len(), p.total);

        match parse(doc, RecordPolicy::Strict) {
            Err(Error::Nucleus { key, .. }) => assert_eq!(key, "1"),
            other => panic!("expected nucleus error, got {other:?}"),
        }
    }

    #[test]
    fn negative_centroid_policies() {
        let doc = r#"{"nuc": {"5": {"centroid": [-1.0, 2], "type": 1}}}"#;
        assert_eq!(parse(doc, RecordPolicy::Skip).unwrap().rejected.len(), 1);
        assert!(matches!(parse(doc, RecordPolicy::Strict), Err(Error::Nucleus { .. })));
    }

    #[test]
    fn malformed_reports_position() {
        let doc = "{\n  \"nuc\": {\n    \"1\": {\"centroid\": [1, 2], \"type\": }\n  }\n}";
        match parse(doc, RecordPolicy::Strict) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(
            parse(r#"{"mag": 20}"#, RecordPolicy::Strict),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn orders_by_integer_key() {
        let doc = r#"{"nuc": {
            "10": {"centroid": [10, 0], "type": 1},
            "9": {"centroid": [9, 0], "type": 1},
            "09": {"centroid": [9.5, 0], "type": 1},
            "x": {"centroid": [99, 0], "type": 1},
            "100": {"centroid": [100, 0], "type": 1}
        }}"#;
        let xs: Vec<f64> = parse(doc, RecordPolicy::Strict)
            .unwrap()
            .records
            .iter()
            .map(|r| r.x)
            .collect();
        assert_eq!(xs, vec![9.5, 9.0, 10.0, 100.0, 99.0]);
    }

    #[test]
    fn extra_fields_ignored() {
        let doc = r#"{"mag": 40, "extra": [1,2], "nuc": {"1": {"centroid": [1, 2], "type": 5,
            "bbox": [[0,0],[3,3]], "contour": [[0,0],[1,1]], "type_prob": 0.75}}}"#;
        let p = parse(doc, RecordPolicy::Strict).unwrap();
        assert_eq!(p.records[0].class, CellClass::NonNeoplasticEpithelial);
        assert_eq!(p.records[0].type_prob, Some(0.75));
    }

    #[test]
    fn filter_examples() {
        let recs = [
            NucleusRecord::new(0.0, 0.0, CellClass::Neoplastic),
            NucleusRecord::new(1.0, 0.0, CellClass::Dead),
            NucleusRecord::new(2.0, 0.0, CellClass::Connective),
        ];
        let keep: BTreeSet<_> = [CellClass::Neoplastic, CellClass::Connective].into();
        let out = filter_classes(&recs, &keep);
        assert_eq!(out, vec![recs[0], recs[2]]);
        assert_eq!(filter_classes(&out, &keep), out);

        let all: BTreeSet<_> = CellClass::ALL.into();
        assert_eq!(filter_classes(&recs, &all), recs.to_vec());
        assert!(filter_classes(&recs, &BTreeSet::new()).is_empty());
    }

    #[test]
    fn rescale_examples() {
        let meta = SlideMeta::new("s", 1024, 1024, 20.0, 5.0).unwrap();
        let r = |x, y| rescale_to_map(&NucleusRecord::new(x, y, CellClass::Neoplastic), &meta);
        assert_eq!(r(100.0, 200.0), (25.0, 50.0));
        assert_eq!(r(0.0, 0.0), (0.0, 0.0));
        assert_eq!(r(13.0, 7.0), (3.25, 1.75));
    }

    #[test]
    fn meta_invariants() {
        assert!(SlideMeta::new("s", 0, 10, 20.0, 5.0).is_err());
        assert!(SlideMeta::new("s", 10, 10, 5.0, 5.0).is_err());
        assert!(SlideMeta::new("s", 10, 10, 20.0, 0.0).is_err());
    }

    #[test]
    fn emit_then_parse() {
        let meta = SlideMeta::new("s", 500, 400, 20.0, 5.0).unwrap();
        let recs = vec![
            NucleusRecord::new(1.25, 3.5, CellClass::Neoplastic),
            NucleusRecord::new(0.1, 0.7, CellClass::Inflammatory),
            NucleusRecord {
                x: 7.0,
                y: 9.0,
                class: CellClass::Connective,
                type_prob: Some(0.5),
            },
        ];
        let table = ClassCodeTable::default();
        let bytes = emit_nuclei_json(&recs, &meta, &table).unwrap();
        let p = parse_nuclei(&bytes, &table, RecordPolicy::Strict).unwrap();
        assert_eq!(p.records, recs);
        assert_eq!(
            p.fragment,
            SlideFragment {
                mag: Some(20.0),
                width: Some(500),
                height: Some(400)
            }
        );
    }

    #[test]
    fn nuclei_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.csv");
        let recs = vec![
            NucleusRecord::new(0.1 + 0.2, 1e-7, CellClass::Neoplastic),
            NucleusRecord {
                type_prob: Some(0.8125),
                ..NucleusRecord::new(4095.99, 12.0, CellClass::NonNeoplasticEpithelial)
            },
        ];
        write_nuclei_csv(&recs, &p).unwrap();
        assert_eq!(read_nuclei_csv(&p).unwrap(), recs);
    }
}
