//! Exercises the C ABI from Rust: handle lifecycle, error codes, the
//! buffer-size protocol, and agreement with the underlying library.

use latentformer::checkpoint::save_checkpoint;
use latentformer::config::ModelConfig;
use latentformer::model::Model;
use latentformer::scene::{generate_follow, generate_intersection, SceneSet};
use latentformer_ffi::*;
use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::ptr;

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("lf-abi-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        d_m: 16,
        heads: 2,
        i_e: 1,
        i_dd: 1,
        i_dc: 1,
        k_modes: 2,
        use_map: false,
        ..ModelConfig::small()
    }
}

/// Write a checkpoint and a two-scene set under one temp dir.
fn fixture(tag: &str) -> (PathBuf, PathBuf, PathBuf, Model) {
    let dir = workdir(tag);
    let ckpt = dir.join("ckpt");
    std::fs::create_dir_all(&ckpt).unwrap();
    let model = Model::new(tiny_cfg(), 5).unwrap();
    save_checkpoint(&ckpt, &model.cfg, &model.store).unwrap();
    let set = SceneSet::new(vec![
        generate_intersection(3, 2).unwrap(),
        generate_follow(4).unwrap(),
    ])
    .unwrap();
    let scenes = dir.join("scenes.jsonl");
    set.save(&scenes).unwrap();
    (dir, ckpt, scenes, model)
}

fn c(path: &PathBuf) -> CString {
    CString::new(path.to_str().unwrap()).unwrap()
}

fn last_error_string() -> String {
    let mut buf = [0i8; 512];
    let n = unsafe { lf_last_error(buf.as_mut_ptr(), buf.len()) };
    let text = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_string();
    assert_eq!(n, text.len(), "reported length matches copied text");
    text
}

#[test]
fn version_is_a_static_string() {
    let v = unsafe { CStr::from_ptr(lf_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_rejected_without_crashing() {
    unsafe {
        let mut model: *mut LfModel = ptr::null_mut();
        assert_eq!(lf_model_load(ptr::null(), &mut model), LfStatus::LfNullArgument);
        assert!(last_error_string().contains("null"));

        let path = CString::new("/nonexistent").unwrap();
        assert_eq!(lf_model_load(path.as_ptr(), ptr::null_mut()), LfStatus::LfNullArgument);

        assert_eq!(lf_model_info(ptr::null(), ptr::null_mut(), ptr::null_mut()), LfStatus::LfNullArgument);
        assert_eq!(
            lf_predict(ptr::null(), ptr::null(), 0, 1, ptr::null_mut(), 0, ptr::null_mut()),
            LfStatus::LfNullArgument
        );
        assert_eq!(lf_evaluate(ptr::null(), ptr::null(), 1, ptr::null_mut()), LfStatus::LfNullArgument);

        // Free of null is a no-op, not a crash.
        lf_model_free(ptr::null_mut());
        lf_scene_set_free(ptr::null_mut());
    }
}

#[test]
fn missing_files_map_to_io_and_bad_content_to_data() {
    unsafe {
        let mut model: *mut LfModel = ptr::null_mut();
        let missing = CString::new("/no/such/dir").unwrap();
        assert_eq!(lf_model_load(missing.as_ptr(), &mut model), LfStatus::LfIo);
        assert!(model.is_null() || true, "out stays untouched on failure");

        let dir = workdir("badset");
        let bad = dir.join("garbage.jsonl");
        std::fs::write(&bad, "not json at all\n").unwrap();
        let mut set: *mut LfSceneSet = ptr::null_mut();
        assert_eq!(lf_scene_set_load(c(&bad).as_ptr(), &mut set), LfStatus::LfData);
        assert!(!last_error_string().is_empty());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}

#[test]
fn load_inspect_predict_evaluate_round_trip() {
    let (dir, ckpt, scenes, native) = fixture("roundtrip");
    unsafe {
        let mut model: *mut LfModel = ptr::null_mut();
        assert_eq!(lf_model_load(c(&ckpt).as_ptr(), &mut model), LfStatus::LfOk);
        let mut set: *mut LfSceneSet = ptr::null_mut();
        assert_eq!(lf_scene_set_load(c(&scenes).as_ptr(), &mut set), LfStatus::LfOk);

        let (mut k_modes, mut horizon) = (0usize, 0usize);
        assert_eq!(lf_model_info(model, &mut k_modes, &mut horizon), LfStatus::LfOk);
        assert_eq!((k_modes, horizon), (2, 6));

        let (mut n, mut tau, mut h) = (0usize, 0usize, 0usize);
        assert_eq!(lf_scene_set_info(set, &mut n, &mut tau, &mut h), LfStatus::LfOk);
        assert_eq!((n, tau, h), (2, 4, 6));

        let mut agents = 0usize;
        assert_eq!(lf_scene_agent_count(set, 0, &mut agents), LfStatus::LfOk);
        assert_eq!(agents, 2);
        assert_eq!(lf_scene_agent_count(set, 9, &mut agents), LfStatus::LfData);

        // Buffer protocol: query size with a zero-capacity call first.
        let mut needed = 0usize;
        assert_eq!(
            lf_predict(model, set, 0, 2, ptr::null_mut(), 0, &mut needed),
            LfStatus::LfBufferTooSmall
        );
        assert_eq!(needed, 2 * agents * horizon * 2);

        let mut points = vec![0.0f64; needed];
        let mut written = 0usize;
        assert_eq!(
            lf_predict(model, set, 0, 2, points.as_mut_ptr(), points.len(), &mut written),
            LfStatus::LfOk
        );
        assert_eq!(written, needed);

        // The ABI must agree exactly with a direct library call.
        let scene = generate_intersection(3, 2).unwrap();
        let expect: Vec<f64> = native
            .predict(&scene, 2)
            .unwrap()
            .into_iter()
            .flat_map(|s| s.points)
            .collect();
        assert_eq!(points, expect);

        // Asking for more modes than the model has is a config error.
        assert_eq!(
            lf_predict(model, set, 0, 99, points.as_mut_ptr(), points.len(), &mut written),
            LfStatus::LfConfig
        );

        let mut metrics = LfMetrics::default();
        assert_eq!(lf_evaluate(model, set, 2, &mut metrics), LfStatus::LfOk);
        let native_rep = latentformer::metrics::evaluate(&native, &[
            generate_intersection(3, 2).unwrap(),
            generate_follow(4).unwrap(),
        ], 2, false, 0)
        .unwrap();
        assert_eq!(metrics.min_ade, native_rep.min_ade);
        assert_eq!(metrics.avg_fde, native_rep.avg_fde);
        assert!(metrics.min_ade > 0.0 && metrics.min_ade <= metrics.avg_ade);

        lf_scene_set_free(set);
        lf_model_free(model);
    }
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn last_error_truncates_but_reports_full_length() {
    unsafe {
        let mut model: *mut LfModel = ptr::null_mut();
        let missing = CString::new("/definitely/not/here/anywhere").unwrap();
        assert_eq!(lf_model_load(missing.as_ptr(), &mut model), LfStatus::LfIo);

        let full = last_error_string();
        assert!(full.len() > 8);

        let mut tiny = [0i8; 8];
        let n = lf_last_error(tiny.as_mut_ptr(), tiny.len());
        assert_eq!(n, full.len(), "full length reported even when truncated");
        let copy = CStr::from_ptr(tiny.as_ptr()).to_str().unwrap();
        assert_eq!(copy, &full[..7], "seven bytes plus NUL fit in eight");

        // Null buffer only measures.
        assert_eq!(lf_last_error(ptr::null_mut(), 0), full.len());

        // A success clears the message.
        let (dir, ckpt, ..) = fixture("clear");
        assert_eq!(lf_model_load(c(&ckpt).as_ptr(), &mut model), LfStatus::LfOk);
        assert_eq!(lf_last_error(ptr::null_mut(), 0), 0);
        lf_model_free(model);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
