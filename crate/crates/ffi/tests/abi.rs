use std::ffi::{CStr, CString};
use std::ptr;

use cellmap::features::extract_features;
use cellmap::raster::{decode_png, stamp_disk, BinaryPlane};
use cellmap::{CellClass, GrowthPattern, NucleusRecord, SvmClassifier, SvmHyperparams};
use cellmap_ffi::*;

fn last_error() -> String {
    let p = cm_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn parse(json: &str, skip: i32) -> (CmStatus, *mut CmNuclei) {
    let mut h: *mut CmNuclei = ptr::null_mut();
    let st = unsafe { cm_nuclei_parse(json.as_ptr(), json.len(), skip, &mut h) };
    (st, h)
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(cm_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn parse_and_read_back() {
    let (st, h) = parse(
        r#"{"mag":20,"nuc":{"2":{"centroid":[5.5,6.0],"type":3},"1":{"centroid":[100.0,200.0],"type":1,"type_prob":0.75}}}"#,
        0,
    );
    assert_eq!(st, CmStatus::Ok);
    unsafe {
        assert_eq!(cm_nuclei_len(h), 2);
        let mut n = CmNucleus {
            x: 0.0,
            y: 0.0,
            cell_class: -1,
            type_prob: 0.0,
        };
        assert_eq!(cm_nuclei_get(h, 0, &mut n), CmStatus::Ok);
        assert_eq!(
            (n.x, n.y, n.cell_class, n.type_prob),
            (100.0, 200.0, CmCellClass::Neoplastic as i32, 0.75)
        );
        assert_eq!(cm_nuclei_get(h, 1, &mut n), CmStatus::Ok);
        assert_eq!(n.cell_class, CmCellClass::Connective as i32);
        assert!(n.type_prob.is_nan());
        assert_eq!(cm_nuclei_get(h, 2, &mut n), CmStatus::InvalidArgument);
        assert!(last_error().contains("out of range"));
        cm_nuclei_free(h);
    }
}

#[test]
fn strict_and_skip() {
    let doc = r#"{"mag":20,"nuc":{"1":{"centroid":[1.0,1.0],"type":1},"2":{"centroid":[1.0,1.0],"type":99}}}"#;
    let (st, h) = parse(doc, 0);
    assert_eq!(st, CmStatus::Parse);
    assert!(h.is_null());
    assert!(last_error().contains("99"));

    let (st, h) = parse(doc, 1);
    assert_eq!(st, CmStatus::Ok);
    unsafe {
        assert_eq!(cm_nuclei_len(h), 1);
        assert_eq!(cm_nuclei_rejected(h), 1);
        cm_nuclei_free(h);
    }

    let (st, _) = parse("{not json", 0);
    assert_eq!(st, CmStatus::Parse);
}

#[test]
fn null_arguments() {
    unsafe {
        assert_eq!(
            cm_nuclei_parse(ptr::null(), 5, 0, ptr::null_mut()),
            CmStatus::NullPointer
        );
        let mut h: *mut CmNuclei = ptr::null_mut();
        assert_eq!(cm_nuclei_parse(ptr::null(), 5, 0, &mut h), CmStatus::NullPointer);
        assert_eq!(cm_nuclei_len(ptr::null()), 0);
        cm_nuclei_free(ptr::null_mut());
        cm_cell_map_free(ptr::null_mut());
        cm_classifier_free(ptr::null_mut());
        cm_bytes_free(CmBytes {
            data: ptr::null_mut(),
            len: 0,
        });
        let mut out = 0.0;
        assert_eq!(
            cm_auc_binary(ptr::null(), 1, [1.0].as_ptr(), 1, &mut out),
            CmStatus::NullPointer
        );
    }
}

#[test]
fn cell_map_matches_core_stamping() {
    // Centroid (400, 400) at 20x lands on map pixel (100, 100) at 5x.
    let recs = [
        CmNucleus {
            x: 400.0,
            y: 400.0,
            cell_class: CmCellClass::Neoplastic as i32,
            type_prob: f64::NAN,
        },
        CmNucleus {
            x: 0.0,
            y: 0.0,
            cell_class: CmCellClass::Connective as i32,
            type_prob: f64::NAN,
        },
        CmNucleus {
            x: 800.0,
            y: 40.0,
            cell_class: CmCellClass::Inflammatory as i32,
            type_prob: f64::NAN,
        },
    ];
    unsafe {
        let mut nuc: *mut CmNuclei = ptr::null_mut();
        assert_eq!(
            cm_nuclei_from_records(recs.as_ptr(), recs.len(), &mut nuc),
            CmStatus::Ok
        );
        let mut map: *mut CmCellMap = ptr::null_mut();
        assert_eq!(cm_cell_map_build(nuc, 1024, 1024, 20.0, 5.0, 4, &mut map), CmStatus::Ok);
        assert_eq!((cm_cell_map_width(map), cm_cell_map_height(map)), (256, 256));

        let mut buf = vec![0u8; 256 * 256];
        let mut expect = BinaryPlane::new(256, 256);
        stamp_disk(&mut expect, (100.0, 100.0), 4);
        assert_eq!(
            cm_cell_map_copy_plane(map, 0, buf.as_mut_ptr(), buf.len()),
            CmStatus::Ok
        );
        assert_eq!(buf, expect.as_slice());
        assert_eq!(buf.iter().filter(|&&b| b == 1).count(), 49);

        assert_eq!(
            cm_cell_map_copy_plane(map, 1, buf.as_mut_ptr(), buf.len()),
            CmStatus::Ok
        );
        assert_eq!(buf.iter().filter(|&&b| b == 1).count(), 17);
        assert_eq!(
            cm_cell_map_copy_plane(map, 2, buf.as_mut_ptr(), buf.len()),
            CmStatus::Ok
        );
        assert!(buf.iter().all(|&b| b == 0));

        assert_eq!(
            cm_cell_map_copy_plane(map, 3, buf.as_mut_ptr(), buf.len()),
            CmStatus::InvalidArgument
        );
        assert_eq!(
            cm_cell_map_copy_plane(map, 0, buf.as_mut_ptr(), 10),
            CmStatus::BufferTooSmall
        );

        let mut png = CmBytes {
            data: ptr::null_mut(),
            len: 0,
        };
        assert_eq!(cm_cell_map_encode_png(map, &mut png), CmStatus::Ok);
        let decoded = decode_png(std::slice::from_raw_parts(png.data, png.len)).unwrap();
        assert_eq!(decoded.plane(0).as_slice(), expect.as_slice());
        cm_bytes_free(png);

        let mut bad: *mut CmCellMap = ptr::null_mut();
        assert_eq!(
            cm_cell_map_build(nuc, 0, 1024, 20.0, 5.0, 4, &mut bad),
            CmStatus::InvalidArgument
        );
        assert!(bad.is_null());

        cm_cell_map_free(map);
        cm_nuclei_free(nuc);
    }
}

#[test]
fn bad_records_rejected() {
    let recs = [CmNucleus {
        x: -1.0,
        y: 0.0,
        cell_class: 0,
        type_prob: f64::NAN,
    }];
    let mut h: *mut CmNuclei = ptr::null_mut();
    unsafe {
        assert_eq!(
            cm_nuclei_from_records(recs.as_ptr(), 1, &mut h),
            CmStatus::InvalidArgument
        );
        let recs = [CmNucleus {
            x: 1.0,
            y: 0.0,
            cell_class: 42,
            type_prob: f64::NAN,
        }];
        assert_eq!(
            cm_nuclei_from_records(recs.as_ptr(), 1, &mut h),
            CmStatus::InvalidArgument
        );
        assert!(last_error().contains("42"));
    }
}

#[test]
fn features_match_core() {
    let pts = [
        (0.0, 0.0, 0),
        (3.0, 4.0, 0),
        (10.0, 0.0, 0),
        (7.0, 7.0, 2),
        (1.0, 1.0, 1),
    ];
    let ffi: Vec<CmNucleus> = pts
        .iter()
        .map(|&(x, y, c)| CmNucleus {
            x,
            y,
            cell_class: c,
            type_prob: f64::NAN,
        })
        .collect();
    let core: Vec<NucleusRecord> = pts
        .iter()
        .map(|&(x, y, c)| {
            let class = [CellClass::Neoplastic, CellClass::Inflammatory, CellClass::Connective][c as usize];
            NucleusRecord::new(x, y, class)
        })
        .collect();
    let mut out = [0.0; CM_N_FEATURES];
    unsafe {
        assert_eq!(
            cm_features(ffi.as_ptr(), ffi.len(), out.as_mut_ptr(), out.len()),
            CmStatus::Ok
        );
        assert_eq!(out, extract_features(&core).0);
        assert_eq!(&out[..3], &[3.0, 10.0, 5.0]);
        assert_eq!(
            cm_features(ffi.as_ptr(), ffi.len(), out.as_mut_ptr(), 11),
            CmStatus::BufferTooSmall
        );
        assert_eq!(cm_features(ptr::null(), 0, out.as_mut_ptr(), out.len()), CmStatus::Ok);
        assert_eq!(out, [0.0; CM_N_FEATURES]);
    }
}

fn toy_classifier() -> SvmClassifier {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (i, g) in GrowthPattern::ALL.iter().enumerate() {
        for j in 0..5 {
            let mut row = vec![0.0; 3];
            row[i % 3] = 10.0 + j as f64 * 0.1;
            row[(i + 1) % 3] = if i < 3 { 0.0 } else { 5.0 };
            x.push(row);
            y.push(*g);
        }
    }
    SvmClassifier::train(&x, &y, &SvmHyperparams::default()).unwrap()
}

#[test]
fn classifier_text_and_file_agree_with_core() {
    let clf = toy_classifier();
    let text = CString::new(clf.to_text()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.svm");
    clf.save(&path).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();

    unsafe {
        let mut a: *mut CmClassifier = ptr::null_mut();
        let mut b: *mut CmClassifier = ptr::null_mut();
        assert_eq!(cm_classifier_from_text(text.as_ptr(), &mut a), CmStatus::Ok);
        assert_eq!(cm_classifier_load(cpath.as_ptr(), &mut b), CmStatus::Ok);
        assert_eq!(cm_classifier_dim(a), 3);

        let row = [10.2, 5.0, 0.0];
        let want = clf.score(&row).unwrap();
        for h in [a, b] {
            let mut s = [0.0; CM_N_CLASSES];
            let mut pred = -1;
            assert_eq!(
                cm_classifier_score(h, row.as_ptr(), 3, s.as_mut_ptr(), s.len(), &mut pred),
                CmStatus::Ok
            );
            assert_eq!(s, want.0);
            assert_eq!(pred, want.argmax().index() as i32);
            assert_eq!(
                cm_classifier_score(h, row.as_ptr(), 2, s.as_mut_ptr(), s.len(), ptr::null_mut()),
                CmStatus::InvalidArgument
            );
        }
        cm_classifier_free(a);
        cm_classifier_free(b);

        let missing = CString::new(dir.path().join("nope.svm").to_str().unwrap()).unwrap();
        let mut c: *mut CmClassifier = ptr::null_mut();
        assert_eq!(cm_classifier_load(missing.as_ptr(), &mut c), CmStatus::Io);
        let junk = CString::new("hello").unwrap();
        assert_eq!(cm_classifier_from_text(junk.as_ptr(), &mut c), CmStatus::Data);
        assert!(c.is_null());
    }
}

#[test]
fn metrics() {
    let mut out = 0.0;
    unsafe {
        // Three of four positive/negative pairs ordered correctly.
        let pos = [0.8, 0.4];
        let neg = [0.5, 0.1];
        assert_eq!(cm_auc_binary(pos.as_ptr(), 2, neg.as_ptr(), 2, &mut out), CmStatus::Ok);
        assert_eq!(out, 0.75);
        assert_eq!(
            cm_auc_binary(pos.as_ptr(), 2, neg.as_ptr(), 0, &mut out),
            CmStatus::InvalidArgument
        );

        let t = [0, 1, 2, 3];
        let p = [0, 1, 2, 5];
        assert_eq!(cm_accuracy(t.as_ptr(), p.as_ptr(), 4, &mut out), CmStatus::Ok);
        assert_eq!(out, 0.75);
        let bad = [0, 1, 2, 6];
        assert_eq!(
            cm_accuracy(t.as_ptr(), bad.as_ptr(), 4, &mut out),
            CmStatus::InvalidArgument
        );
    }
}

#[test]
fn errors_are_per_thread() {
    let (st, _) = parse("{", 0);
    assert_eq!(st, CmStatus::Parse);
    let here = last_error();
    let other = std::thread::spawn(|| cm_last_error().is_null()).join().unwrap();
    assert!(other);
    assert_eq!(last_error(), here);
}
