//! C ABI over the cellmap core.
//!
//! Conventions:
//! * Every fallible function returns a [`CmStatus`]; results come back
//!   through out-pointers, which are left untouched on failure.
//! * Objects are opaque handles (`CmNuclei`, `CmCellMap`, `CmClassifier`)
//!   released with the matching `cm_*_free`. Passing NULL to a free function
//!   is a no-op.
//! * After a failure, [`cm_last_error`] returns a message for the calling
//!   thread. The pointer stays valid until the next failing call on that
//!   thread.
//! * Panics never cross the boundary; they surface as `CM_STATUS_PANIC`.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use cellmap::features::{extract_features, N_FEATURES};
use cellmap::ingest::{filter_classes, parse_nuclei};
use cellmap::metrics::{accuracy, auc_binary};
use cellmap::raster::{build_cell_map, encode_png};
use cellmap::{
    CellClass, CellMap, ClassCodeTable, Error, GrowthPattern, NucleusRecord, RasterConfig, RecordPolicy, SlideMeta,
    SvmClassifier,
};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Data = 4,
    Io = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Nucleus classes as reported through the ABI.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmCellClass {
    Neoplastic = 0,
    Inflammatory = 1,
    Connective = 2,
    Dead = 3,
    NonNeoplasticEpithelial = 4,
    Unlabeled = 5,
}

impl From<CellClass> for CmCellClass {
    fn from(c: CellClass) -> Self {
        match c {
            CellClass::Neoplastic => CmCellClass::Neoplastic,
            CellClass::Inflammatory => CmCellClass::Inflammatory,
            CellClass::Connective => CmCellClass::Connective,
            CellClass::Dead => CmCellClass::Dead,
            CellClass::NonNeoplasticEpithelial => CmCellClass::NonNeoplasticEpithelial,
            CellClass::Unlabeled => CmCellClass::Unlabeled,
        }
    }
}

impl From<CmCellClass> for CellClass {
    fn from(c: CmCellClass) -> Self {
        match c {
            CmCellClass::Neoplastic => CellClass::Neoplastic,
            CmCellClass::Inflammatory => CellClass::Inflammatory,
            CmCellClass::Connective => CellClass::Connective,
            CmCellClass::Dead => CellClass::Dead,
            CmCellClass::NonNeoplasticEpithelial => CellClass::NonNeoplasticEpithelial,
            CmCellClass::Unlabeled => CellClass::Unlabeled,
        }
    }
}

/// One nucleus. `cell_class` holds a [`CmCellClass`] value; `type_prob` is
/// NaN when the detector gave none.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CmNucleus {
    pub x: f64,
    pub y: f64,
    pub cell_class: i32,
    pub type_prob: f64,
}

impl CmCellClass {
    const ALL: [CmCellClass; 6] = [
        CmCellClass::Neoplastic,
        CmCellClass::Inflammatory,
        CmCellClass::Connective,
        CmCellClass::Dead,
        CmCellClass::NonNeoplasticEpithelial,
        CmCellClass::Unlabeled,
    ];

    fn from_code(code: i32) -> Option<Self> {
        Self::ALL.into_iter().find(|c| *c as i32 == code)
    }
}

/// Byte buffer owned by the library; release with [`cm_bytes_free`].
#[repr(C)]
#[derive(Debug)]
pub struct CmBytes {
    pub data: *mut u8,
    pub len: usize,
}

/// Parsed nuclei of one slide.
pub struct CmNuclei {
    records: Vec<NucleusRecord>,
    rejected: usize,
}

/// Three-plane binary cell map.
pub struct CmCellMap {
    map: CellMap,
}

/// Trained feature standardizer plus one-vs-rest linear SVM.
pub struct CmClassifier {
    inner: SvmClassifier,
}

/// Number of values written by [`cm_features`].
pub const CM_N_FEATURES: usize = 12;
/// Number of growth-pattern classes scored by a classifier.
pub const CM_N_CLASSES: usize = 6;

const _: () = assert!(CM_N_FEATURES == N_FEATURES && CM_N_CLASSES == GrowthPattern::COUNT);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CmStatus {
    match e {
        Error::Parse { .. } | Error::Nucleus { .. } => CmStatus::Parse,
        Error::Io { .. } => CmStatus::Io,
        _ => CmStatus::Data,
    }
}

struct Fail(CmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(CmStatus::NullPointer, format!("{what} is NULL"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(CmStatus::InvalidArgument, msg.into())
}

/// Runs `f`, recording its failure (or panic) as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CmStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            CmStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be NULL or valid for `len` reads.
unsafe fn slice_arg<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be NULL or point to a live handle.
unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Fail> {
    ptr.as_ref().ok_or_else(|| null(what))
}

fn pattern_of(code: i32) -> Result<GrowthPattern, Fail> {
    usize::try_from(code)
        .ok()
        .and_then(GrowthPattern::from_index)
        .ok_or_else(|| invalid(format!("class index {code} outside 0..{}", GrowthPattern::COUNT)))
}

/// Message of the last failure on this thread, or NULL if there was none.
#[no_mangle]
pub extern "C" fn cm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses detector JSON using the default code table. With `skip_invalid`
/// nonzero, bad entries are dropped and counted instead of failing.
///
/// # Safety
/// `json` must be valid for `len` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cm_nuclei_parse(
    json: *const u8,
    len: usize,
    skip_invalid: i32,
    out: *mut *mut CmNuclei,
) -> CmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let bytes = slice_arg(json, len, "json")?;
        let policy = if skip_invalid != 0 {
            RecordPolicy::Skip
        } else {
            RecordPolicy::Strict
        };
        let parsed = parse_nuclei(bytes, &ClassCodeTable::default(), policy)?;
        *out = Box::into_raw(Box::new(CmNuclei {
            records: parsed.records,
            rejected: parsed.rejected.len(),
        }));
        Ok(())
    })
}

/// Builds a nuclei handle from caller-provided records.
///
/// # Safety
/// `records` must be valid for `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cm_nuclei_from_records(
    records: *const CmNucleus,
    n: usize,
    out: *mut *mut CmNuclei,
) -> CmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let recs = to_records(slice_arg(records, n, "records")?)?;
        *out = Box::into_raw(Box::new(CmNuclei {
            records: recs,
            rejected: 0,
        }));
        Ok(())
    })
}

fn to_records(src: &[CmNucleus]) -> Result<Vec<NucleusRecord>, Fail> {
    src.iter()
        .enumerate()
        .map(|(i, r)| {
            if !(r.x.is_finite() && r.y.is_finite() && r.x >= 0.0 && r.y >= 0.0) {
                return Err(invalid(format!("record {i}: centroid must be finite and non-negative")));
            }
            let class = CmCellClass::from_code(r.cell_class)
                .ok_or_else(|| invalid(format!("record {i}: unknown cell class {}", r.cell_class)))?;
            Ok(NucleusRecord {
                x: r.x,
                y: r.y,
                class: class.into(),
                type_prob: (!r.type_prob.is_nan()).then_some(r.type_prob),
            })
        })
        .collect()
}

/// Number of records held; 0 for NULL.
///
/// # Safety
/// `nuclei` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cm_nuclei_len(nuclei: *const CmNuclei) -> usize {
    nuclei.as_ref().map_or(0, |n| n.records.len())
}

/// Entries dropped under `skip_invalid`; 0 for NULL.
///
/// # Safety
/// `nuclei` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cm_nuclei_rejected(nuclei: *const CmNuclei) -> usize {
    nuclei.as_ref().map_or(0, |n| n.rejected)
}

/// Copies record `index` into `out`.
///
/// # Safety
/// `nuclei` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cm_nuclei_get(nuclei: *const CmNuclei, index: usize, out: *mut CmNucleus) -> CmStatus {
    guard(|| {
        let n = handle(nuclei, "nuclei")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let r = n
            .records
            .get(index)
            .ok_or_else(|| invalid(format!("index {index} out of range for {} records", n.records.len())))?;
        *out = CmNucleus {
            x: r.x,
            y: r.y,
            cell_class: CmCellClass::from(r.class) as i32,
            type_prob: r.type_prob.unwrap_or(f64::NAN),
        };
        Ok(())
    })
}

/// # Safety
/// `nuclei` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cm_nuclei_free(nuclei: *mut CmNuclei) {
    if !nuclei.is_null() {
        drop(Box::from_raw(nuclei));
    }
}

/// Renders the neoplastic, connective and non-neoplastic nuclei of a slide
/// into a cell map. Other classes are ignored.
///
/// # Safety
/// `nuclei` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cm_cell_map_build(
    nuclei: *const CmNuclei,
    width_px: u64,
    height_px: u64,
    detection_mag: f64,
    map_mag: f64,
    disk_radius: u32,
    out: *mut *mut CmCellMap,
) -> CmStatus {
    guard(|| {
        let n = handle(nuclei, "nuclei")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let meta =
            SlideMeta::new("ffi", width_px, height_px, detection_mag, map_mag).map_err(|e| invalid(e.to_string()))?;
        let cfg = RasterConfig {
            disk_radius,
            detection_mag,
            map_mag,
            ..RasterConfig::default()
        };
        let keep: BTreeSet<CellClass> = CellClass::RENDERED.into_iter().collect();
        let map = build_cell_map(&filter_classes(&n.records, &keep), &meta, &cfg)?;
        *out = Box::into_raw(Box::new(CmCellMap { map }));
        Ok(())
    })
}

/// # Safety
/// `map` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cm_cell_map_width(map: *const CmCellMap) -> usize {
    map.as_ref().map_or(0, |m| m.map.width())
}

/// # Safety
/// `map` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cm_cell_map_height(map: *const CmCellMap) -> usize {
    map.as_ref().map_or(0, |m| m.map.height())
}

/// Copies plane `plane` (0 neoplastic, 1 connective, 2 non-neoplastic) as
/// row-major 0/1 bytes. `len` must be at least width × height.
///
/// # Safety
/// `map` must be a live handle; `buf` must be writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn cm_cell_map_copy_plane(
    map: *const CmCellMap,
    plane: u32,
    buf: *mut u8,
    len: usize,
) -> CmStatus {
    guard(|| {
        let m = &handle(map, "map")?.map;
        if plane > 2 {
            return Err(invalid(format!("plane {plane} outside 0..3")));
        }
        let src = m.plane(plane as usize).as_slice();
        if len < src.len() {
            return Err(Fail(
                CmStatus::BufferTooSmall,
                format!("buffer holds {len} bytes, plane needs {}", src.len()),
            ));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        slice::from_raw_parts_mut(buf, src.len()).copy_from_slice(src);
        Ok(())
    })
}

/// Encodes the map as an 8-bit RGB PNG (R connective, G neoplastic,
/// B non-neoplastic).
///
/// # Safety
/// `map` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cm_cell_map_encode_png(map: *const CmCellMap, out: *mut CmBytes) -> CmStatus {
    guard(|| {
        let m = handle(map, "map")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let boxed = encode_png(&m.map)?.into_boxed_slice();
        let len = boxed.len();
        *out = CmBytes {
            data: Box::into_raw(boxed).cast(),
            len,
        };
        Ok(())
    })
}

/// # Safety
/// `map` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cm_cell_map_free(map: *mut CmCellMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// # Safety
/// `bytes` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn cm_bytes_free(bytes: CmBytes) {
    if !bytes.data.is_null() {
        drop(Box::from_raw(std::ptr::slice_from_raw_parts_mut(bytes.data, bytes.len)));
    }
}

/// The twelve tile features of `records`, written to `out[0..12]`.
///
/// # Safety
/// `records` must be valid for `n` elements; `out` for `out_len` writes.
#[no_mangle]
pub unsafe extern "C" fn cm_features(records: *const CmNucleus, n: usize, out: *mut f64, out_len: usize) -> CmStatus {
    guard(|| {
        let recs = to_records(slice_arg(records, n, "records")?)?;
        if out_len < N_FEATURES {
            return Err(Fail(
                CmStatus::BufferTooSmall,
                format!("out holds {out_len} values, need {N_FEATURES}"),
            ));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        slice::from_raw_parts_mut(out, N_FEATURES).copy_from_slice(&extract_features(&recs).0);
        Ok(())
    })
}

/// Loads a classifier saved by `cellmap train-svm`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cm_classifier_load(path: *const c_char, out: *mut *mut CmClassifier) -> CmStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not UTF-8"))?;
        let inner = SvmClassifier::load(Path::new(p))?;
        *out = Box::into_raw(Box::new(CmClassifier { inner }));
        Ok(())
    })
}

/// Parses a classifier from its text form.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cm_classifier_from_text(text: *const c_char, out: *mut *mut CmClassifier) -> CmStatus {
    guard(|| {
        if text.is_null() {
            return Err(null("text"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let t = CStr::from_ptr(text)
            .to_str()
            .map_err(|_| invalid("text is not UTF-8"))?;
        let inner = SvmClassifier::from_text(t)?;
        *out = Box::into_raw(Box::new(CmClassifier { inner }));
        Ok(())
    })
}

/// Feature dimension expected by the classifier; 0 for NULL.
///
/// # Safety
/// `clf` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cm_classifier_dim(clf: *const CmClassifier) -> usize {
    clf.as_ref().map_or(0, |c| c.inner.model.dim())
}

/// Scores one feature row. Writes six margins in class-index order to
/// `scores` and, if `predicted` is not NULL, the argmax class index.
///
/// # Safety
/// `clf` must be a live handle; `x` valid for `n` reads; `scores` for
/// `scores_len` writes; `predicted` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn cm_classifier_score(
    clf: *const CmClassifier,
    x: *const f64,
    n: usize,
    scores: *mut f64,
    scores_len: usize,
    predicted: *mut i32,
) -> CmStatus {
    guard(|| {
        let c = handle(clf, "classifier")?;
        let row = slice_arg(x, n, "x")?;
        if scores_len < GrowthPattern::COUNT {
            return Err(Fail(
                CmStatus::BufferTooSmall,
                format!("scores holds {scores_len} values, need {}", GrowthPattern::COUNT),
            ));
        }
        if scores.is_null() {
            return Err(null("scores"));
        }
        let s = c.inner.score(row).map_err(|e| invalid(e.to_string()))?;
        slice::from_raw_parts_mut(scores, GrowthPattern::COUNT).copy_from_slice(&s.0);
        if !predicted.is_null() {
            *predicted = s.argmax().index() as i32;
        }
        Ok(())
    })
}

/// # Safety
/// `clf` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cm_classifier_free(clf: *mut CmClassifier) {
    if !clf.is_null() {
        drop(Box::from_raw(clf));
    }
}

/// Binary AUC by pair counting, ties counting one half.
///
/// # Safety
/// `pos` and `neg` must be valid for `n_pos` and `n_neg` reads; `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn cm_auc_binary(
    pos: *const f64,
    n_pos: usize,
    neg: *const f64,
    n_neg: usize,
    out: *mut f64,
) -> CmStatus {
    guard(|| {
        let p = slice_arg(pos, n_pos, "pos")?;
        let q = slice_arg(neg, n_neg, "neg")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = auc_binary(p, q).map_err(|e| invalid(e.to_string()))?;
        Ok(())
    })
}

/// Fraction of positions where `truth` and `predicted` (class indices)
/// agree.
///
/// # Safety
/// `truth` and `predicted` must be valid for `n` reads; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cm_accuracy(truth: *const i32, predicted: *const i32, n: usize, out: *mut f64) -> CmStatus {
    guard(|| {
        let t: Vec<GrowthPattern> = slice_arg(truth, n, "truth")?
            .iter()
            .map(|&c| pattern_of(c))
            .collect::<Result<_, _>>()?;
        let p: Vec<GrowthPattern> = slice_arg(predicted, n, "predicted")?
            .iter()
            .map(|&c| pattern_of(c))
            .collect::<Result<_, _>>()?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = accuracy(&t, &p).map_err(|e| invalid(e.to_string()))?;
        Ok(())
    })
}
