use std::collections::BTreeMap;
use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use depthhint::harness::{export_lookup, pretrain, TrainSpec};
use depthhint::{BinningSpec, DepthFrame, DepthRecord, EmbeddingStore, L2DConfig, RngSeed};
use depthhint_ffi::*;
use tempfile::TempDir;

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(dh_last_error()) }
        .to_string_lossy()
        .into_owned()
}

struct Fixture {
    _tmp: TempDir,
    dir: PathBuf,
}

/// Store, log-mean and classification checkpoints, lookup tables and a frame on disk.
fn fixture() -> Fixture {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().to_path_buf();
    let mut store = EmbeddingStore::new(3).unwrap();
    for (label, v) in [
        ("chair", [1.0, 0.0, 0.2]),
        ("wall", [0.0, 1.0, 0.4]),
        ("background", [0.3, 0.3, 0.3]),
    ] {
        store
            .insert(label, depthhint::EmbeddingVector::new(v.to_vec()).unwrap())
            .unwrap();
    }
    store.save(dir.join("emb.dhemb")).unwrap();
    let binning = BinningSpec::default();
    let hist = |d: f64| {
        let mut counts = vec![0u64; 256];
        counts[binning.bin_of(d)] = 1;
        Some(depthhint::DepthHistogram::from_counts(&counts).unwrap())
    };
    let records = vec![
        DepthRecord {
            label: "chair".into(),
            pixel_count: 10,
            mean_depth: 1.5,
            histogram: hist(1.5),
        },
        DepthRecord {
            label: "wall".into(),
            pixel_count: 10,
            mean_depth: 4.0,
            histogram: hist(4.0),
        },
    ];
    let spec = TrainSpec {
        epochs: 20,
        ..TrainSpec::inst(RngSeed(1))
    };
    let vocab = ["chair", "wall", "background"];
    for (name, cfg) in [("log", L2DConfig::log_mean(3)), ("cls", L2DConfig::classification(3))] {
        let params = pretrain(&cfg, &store, &records, &spec).unwrap().params;
        params.save(dir.join(format!("{name}.dhl2"))).unwrap();
        export_lookup(&params, &store, &vocab, &binning)
            .unwrap()
            .save(dir.join(format!("{name}.lookup")))
            .unwrap();
    }
    let table: BTreeMap<u16, String> = [(1, "chair"), (2, "wall"), (3, "plant")]
        .into_iter()
        .map(|(k, v)| (k, v.to_string()))
        .collect();
    DepthFrame::new(2, 2, vec![1.0, 2.0, 3.0, 4.0], vec![1, 2, 3, 1], table)
        .unwrap()
        .save(dir.join("f.dhf"))
        .unwrap();
    Fixture { _tmp: tmp, dir }
}

unsafe fn load<T>(f: unsafe extern "C" fn(*const std::ffi::c_char, *mut *mut T) -> DhStatus, path: &Path) -> *mut T {
    let mut out = ptr::null_mut();
    let status = f(cpath(path).as_ptr(), &mut out);
    assert_eq!(status, DhStatus::Ok, "{}", last_error());
    assert!(!out.is_null());
    out
}

unsafe fn plane_values(plane: *const DhPlane) -> Vec<f32> {
    let mut data = ptr::null();
    let mut len = 0;
    assert_eq!(dh_plane_data(plane, &mut data, &mut len), DhStatus::Ok);
    std::slice::from_raw_parts(data, len).to_vec()
}

#[test]
fn store_lookup_and_fallback() {
    let fx = fixture();
    unsafe {
        let store = load(dh_store_load, &fx.dir.join("emb.dhemb"));
        assert_eq!(dh_store_dim(store), 3);
        assert_eq!(dh_store_len(store), 3);
        let mut buf = [0f32; 3];
        let mut fallback = true;
        let label = CString::new("wall").unwrap();
        assert_eq!(
            dh_store_lookup(store, label.as_ptr(), buf.as_mut_ptr(), 3, &mut fallback),
            DhStatus::Ok
        );
        assert_eq!(buf, [0.0, 1.0, 0.4]);
        assert!(!fallback);
        let unknown = CString::new("zebra").unwrap();
        assert_eq!(
            dh_store_lookup(store, unknown.as_ptr(), buf.as_mut_ptr(), 3, &mut fallback),
            DhStatus::Ok
        );
        assert_eq!(buf, [0.3, 0.3, 0.3]);
        assert!(fallback);
        assert_eq!(
            dh_store_lookup(store, label.as_ptr(), buf.as_mut_ptr(), 2, ptr::null_mut()),
            DhStatus::BufferTooSmall
        );
        assert!(last_error().contains("need 3"));
        dh_store_free(store);
        dh_store_free(ptr::null_mut());
    }
}

#[test]
fn load_errors_map_to_status_codes() {
    let fx = fixture();
    std::fs::write(fx.dir.join("bad.dhemb"), "DHEMB 1 2\nx\t1\n").unwrap();
    unsafe {
        let mut store = ptr::null_mut();
        let missing = cpath(&fx.dir.join("missing.dhemb"));
        assert_eq!(dh_store_load(missing.as_ptr(), &mut store), DhStatus::Io);
        assert!(store.is_null());
        assert!(last_error().contains("missing.dhemb"));
        let bad = cpath(&fx.dir.join("bad.dhemb"));
        assert_eq!(dh_store_load(bad.as_ptr(), &mut store), DhStatus::Format);
        assert!(last_error().contains("line 2"));
        assert_eq!(dh_store_load(ptr::null(), &mut store), DhStatus::NullArgument);
        assert_eq!(dh_store_load(bad.as_ptr(), ptr::null_mut()), DhStatus::NullArgument);
        let mut model = ptr::null_mut();
        assert_eq!(dh_model_load(bad.as_ptr(), &mut model), DhStatus::Format);
    }
}

#[test]
fn model_and_lookup_give_identical_scalar_planes() {
    let fx = fixture();
    unsafe {
        let store = load(dh_store_load, &fx.dir.join("emb.dhemb"));
        let frame = load(dh_frame_load, &fx.dir.join("f.dhf"));
        for name in ["log", "cls"] {
            let model = load(dh_model_load, &fx.dir.join(format!("{name}.dhl2")));
            let table = load(dh_lookup_load, &fx.dir.join(format!("{name}.lookup")));
            let mut a = ptr::null_mut();
            let mut b = ptr::null_mut();
            assert_eq!(
                dh_render_scalar_model(frame, model, store, &mut a),
                DhStatus::Ok,
                "{}",
                last_error()
            );
            assert_eq!(
                dh_render_scalar_lookup(frame, table, &mut b),
                DhStatus::Ok,
                "{}",
                last_error()
            );
            let (mut h, mut w, mut c) = (0, 0, 0);
            assert_eq!(dh_plane_shape(a, &mut h, &mut w, &mut c), DhStatus::Ok);
            assert_eq!((h, w, c), (2, 2, 1));
            let va = plane_values(a);
            assert_eq!(va, plane_values(b));
            // Pixels 0 and 3 share the chair label.
            assert_eq!(va[0], va[3]);

            let mut depth = 0.0;
            let mut fallback = false;
            let chair = CString::new("chair").unwrap();
            assert_eq!(
                dh_lookup_depth(table, chair.as_ptr(), &mut depth, &mut fallback),
                DhStatus::Ok
            );
            assert_eq!(depth as f32, va[0]);
            let mut direct = 0.0;
            let input = [1.0f32, 0.0, 0.2];
            assert_eq!(
                dh_model_predict_depth(model, input.as_ptr(), 3, &mut direct),
                DhStatus::Ok
            );
            assert_eq!(direct, depth);
            assert_eq!(
                dh_model_predict_depth(model, input.as_ptr(), 2, &mut direct),
                DhStatus::DimMismatch
            );

            dh_plane_free(a);
            dh_plane_free(b);
            dh_lookup_free(table);
            dh_model_free(model);
        }
        dh_frame_free(frame);
        dh_store_free(store);
    }
}

#[test]
fn feature_planes_need_a_classification_model() {
    let fx = fixture();
    unsafe {
        let store = load(dh_store_load, &fx.dir.join("emb.dhemb"));
        let frame = load(dh_frame_load, &fx.dir.join("f.dhf"));
        let log = load(dh_model_load, &fx.dir.join("log.dhl2"));
        let cls = load(dh_model_load, &fx.dir.join("cls.dhl2"));
        let cls_table = load(dh_lookup_load, &fx.dir.join("cls.lookup"));
        let mut mode = DhMode::LogMean;
        assert_eq!(dh_model_mode(cls, &mut mode), DhStatus::Ok);
        assert_eq!(mode, DhMode::Classification);
        assert_eq!(dh_model_input_dim(cls), 3);

        let mut plane = ptr::null_mut();
        assert_eq!(
            dh_render_features_model(frame, log, store, &mut plane),
            DhStatus::WrongMode
        );
        assert!(plane.is_null());
        assert_eq!(dh_render_features_model(frame, cls, store, &mut plane), DhStatus::Ok);
        let mut from_table = ptr::null_mut();
        assert_eq!(
            dh_render_features_lookup(frame, cls_table, &mut from_table),
            DhStatus::Ok
        );
        let mut channels = 0;
        assert_eq!(
            dh_plane_shape(plane, ptr::null_mut(), ptr::null_mut(), &mut channels),
            DhStatus::Ok
        );
        assert_eq!(channels, 50);
        assert_eq!(plane_values(plane), plane_values(from_table));

        let out = cpath(&fx.dir.join("p.dhp"));
        assert_eq!(dh_plane_save(plane, out.as_ptr()), DhStatus::Ok);
        let reloaded = load(dh_plane_load, &fx.dir.join("p.dhp"));
        assert_eq!(plane_values(reloaded), plane_values(plane));

        for p in [plane, from_table, reloaded] {
            dh_plane_free(p);
        }
        dh_lookup_free(cls_table);
        dh_model_free(log);
        dh_model_free(cls);
        dh_frame_free(frame);
        dh_store_free(store);
    }
}

#[test]
fn unknown_label_without_background_is_reported() {
    let fx = fixture();
    let mut store = EmbeddingStore::new(3).unwrap();
    store
        .insert("chair", depthhint::EmbeddingVector::new(vec![1.0, 0.0, 0.0]).unwrap())
        .unwrap();
    store.save(fx.dir.join("small.dhemb")).unwrap();
    unsafe {
        let store = load(dh_store_load, &fx.dir.join("small.dhemb"));
        let frame = load(dh_frame_load, &fx.dir.join("f.dhf"));
        let model = load(dh_model_load, &fx.dir.join("log.dhl2"));
        let mut plane = ptr::null_mut();
        assert_eq!(
            dh_render_scalar_model(frame, model, store, &mut plane),
            DhStatus::UnknownLabel
        );
        assert!(plane.is_null());
        assert!(last_error().contains("`plant`"));
        dh_model_free(model);
        dh_frame_free(frame);
        dh_store_free(store);
    }
}

#[test]
fn losses_and_metrics() {
    let pred = [std::f64::consts::E, std::f64::consts::E];
    let gt = [1.0, 1.0];
    unsafe {
        let mut loss = 0.0;
        assert_eq!(dh_silog(pred.as_ptr(), gt.as_ptr(), 2, &mut loss), DhStatus::Ok);
        assert!((loss - 10.0 * 1.15f64.sqrt()).abs() < 1e-9);
        let mut m = DhEigenMetrics::default();
        assert_eq!(dh_eigen_metrics(gt.as_ptr(), gt.as_ptr(), 2, &mut m), DhStatus::Ok);
        assert_eq!((m.abs_rel, m.rms, m.delta1), (0.0, 0.0, 1.0));
        assert_eq!(
            dh_eigen_metrics(pred.as_ptr(), gt.as_ptr(), 0, &mut m),
            DhStatus::InvalidArgument
        );
        assert_eq!(dh_silog(ptr::null(), gt.as_ptr(), 2, &mut loss), DhStatus::NullArgument);
        let bad = [-1.0, 1.0];
        assert_ne!(dh_silog(bad.as_ptr(), gt.as_ptr(), 2, &mut loss), DhStatus::Ok);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/depthhint.h")).unwrap();
    for name in [
        "dh_last_error",
        "dh_store_load",
        "dh_store_lookup",
        "dh_model_predict_depth",
        "dh_render_scalar_lookup",
        "dh_render_features_model",
        "dh_plane_data",
        "dh_eigen_metrics",
        "typedef struct DhStore DhStore",
        "DH_STATUS_UNKNOWN_LABEL = 6",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

/// Compiles and runs a small C program against the header and static library.
#[test]
fn c_program_links_against_static_library() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    let fx = fixture();
    let target_dir = std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf();
    let lib = target_dir.join("libdepthhint_ffi.a");
    assert!(lib.is_file(), "{} not built", lib.display());
    let src = fx.dir.join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "depthhint.h"
int main(int argc, char **argv) {
    DhStore *store = NULL;
    DhFrame *frame = NULL;
    DhLookupTable *table = NULL;
    DhPlane *plane = NULL;
    if (dh_store_load(argv[1], &store) != DH_STATUS_OK) return 10;
    if (dh_frame_load(argv[2], &frame) != DH_STATUS_OK) return 11;
    if (dh_lookup_load(argv[3], &table) != DH_STATUS_OK) return 12;
    if (dh_render_scalar_lookup(frame, table, &plane) != DH_STATUS_OK) return 13;
    size_t h, w, c, n;
    const float *data;
    dh_plane_shape(plane, &h, &w, &c);
    dh_plane_data(plane, &data, &n);
    printf("%zu %zu %zu %zu %.9g\n", h, w, c, n, data[0]);
    DhStore *missing = NULL;
    if (dh_store_load("/nonexistent.dhemb", &missing) != DH_STATUS_IO || dh_last_error() == NULL) return 14;
    dh_plane_free(plane);
    dh_lookup_free(table);
    dh_frame_free(frame);
    dh_store_free(store);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = fx.dir.join("main");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe)
        .arg(fx.dir.join("emb.dhemb"))
        .arg(fx.dir.join("f.dhf"))
        .arg(fx.dir.join("log.lookup"))
        .output()
        .unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let fields: Vec<&str> = stdout.split_whitespace().collect();
    assert_eq!(&fields[..4], ["2", "2", "1", "4"]);
    let table = depthhint::LookupTable::load(fx.dir.join("log.lookup")).unwrap();
    let expected = table.get("chair").unwrap().mean_depth as f32;
    assert_eq!(fields[4].parse::<f32>().unwrap(), expected);
}
