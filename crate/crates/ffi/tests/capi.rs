use std::ffi::{CStr, CString};
use std::ptr;

use groupface_ffi::*;

fn last_error() -> String {
    let p = gf_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn take_string(p: *mut std::os::raw::c_char) -> String {
    let s = CStr::from_ptr(p).to_string_lossy().into_owned();
    gf_string_free(p);
    s
}

fn small_config() -> *mut GfConfig {
    let json = CString::new(
        r#"{"seed": 2, "data": {"train_samples": 150, "test_samples": 40},
            "train": {"epochs": 1}, "rl": {"enabled": false}}"#,
    )
    .unwrap();
    let mut config = ptr::null_mut();
    assert_eq!(unsafe { gf_config_from_json(json.as_ptr(), &mut config) }, GfStatus::Ok);
    config
}

#[test]
fn version_and_pure_functions() {
    let v = unsafe { CStr::from_ptr(gf_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    assert!((gf_aar_score(2.09, 1.25) - 6.66).abs() < 1e-12);
    let mut g = 9;
    assert_eq!(unsafe { gf_group_of_age(15.0, &mut g) }, GfStatus::Ok);
    assert_eq!(g, 1);
    assert_eq!(unsafe { gf_group_of_age(-1.0, &mut g) }, GfStatus::InvalidArgument);
    assert!(!last_error().is_empty());
}

#[test]
fn null_pointers_are_reported_not_dereferenced() {
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { gf_config_from_json(ptr::null(), &mut out) }, GfStatus::NullPointer);
    assert!(last_error().contains("null"));
    assert_eq!(unsafe { gf_dataset_generate(ptr::null(), ptr::null_mut()) }, GfStatus::NullPointer);
    assert_eq!(unsafe { gf_group_of_age(30.0, ptr::null_mut()) }, GfStatus::NullPointer);
    unsafe {
        gf_config_free(ptr::null_mut());
        gf_dataset_free(ptr::null_mut());
        gf_model_free(ptr::null_mut());
        gf_report_free(ptr::null_mut());
        gf_string_free(ptr::null_mut());
    }
}

#[test]
fn config_errors_map_to_status_codes() {
    let mut out = ptr::null_mut();
    let bad = CString::new(r#"{"data": {"proportions": [0.5, 0.5, 0.5, 0.5]}}"#).unwrap();
    assert_eq!(unsafe { gf_config_from_json(bad.as_ptr(), &mut out) }, GfStatus::InvalidConfig);
    assert!(last_error().contains("proportions"));
    let junk = CString::new("{oops").unwrap();
    assert_eq!(unsafe { gf_config_from_json(junk.as_ptr(), &mut out) }, GfStatus::Malformed);
    assert!(out.is_null());
    let latin1 = [0xffu8, 0];
    assert_eq!(unsafe { gf_config_from_json(latin1.as_ptr().cast(), &mut out) }, GfStatus::InvalidUtf8);
}

#[test]
fn config_round_trips_through_json() {
    let config = gf_config_default();
    assert_eq!(unsafe { gf_config_set_seed(config, 41) }, GfStatus::Ok);
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { gf_config_to_json(config, &mut json) }, GfStatus::Ok);
    let text = unsafe { take_string(json) };
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(value["seed"], 41);
    let c = CString::new(text.clone()).unwrap();
    let mut again = ptr::null_mut();
    assert_eq!(unsafe { gf_config_from_json(c.as_ptr(), &mut again) }, GfStatus::Ok);
    let mut json2 = ptr::null_mut();
    assert_eq!(unsafe { gf_config_to_json(again, &mut json2) }, GfStatus::Ok);
    assert_eq!(unsafe { take_string(json2) }, text);
    unsafe {
        gf_config_free(config);
        gf_config_free(again);
    }
}

#[test]
fn default_dataset_has_long_tailed_counts() {
    let config = gf_config_default();
    let mut data = ptr::null_mut();
    assert_eq!(unsafe { gf_dataset_generate(config, &mut data) }, GfStatus::Ok);
    let mut counts = [0usize; 4];
    assert_eq!(unsafe { gf_dataset_group_counts(data, counts.as_mut_ptr()) }, GfStatus::Ok);
    assert_eq!(counts, [6, 44, 887, 63]);
    let mut digest = ptr::null_mut();
    assert_eq!(unsafe { gf_dataset_digest(data, &mut digest) }, GfStatus::Ok);
    assert_eq!(unsafe { take_string(digest) }.len(), 64);
    unsafe {
        gf_dataset_free(data);
        gf_config_free(config);
    }
}

#[test]
fn train_predict_evaluate_and_reload() {
    let config = small_config();
    let mut data = ptr::null_mut();
    assert_eq!(unsafe { gf_dataset_generate(config, &mut data) }, GfStatus::Ok);
    let (mut model, mut report) = (ptr::null_mut(), ptr::null_mut());
    assert_eq!(unsafe { gf_train(config, data, &mut model, &mut report) }, GfStatus::Ok, "{}", last_error());

    let mut needed = 0;
    assert_eq!(unsafe { gf_model_predict(model, data, ptr::null_mut(), 0, &mut needed) }, GfStatus::Ok);
    assert_eq!(needed, 40);
    let mut small = vec![0.0; 10];
    assert_eq!(
        unsafe { gf_model_predict(model, data, small.as_mut_ptr(), small.len(), &mut needed) },
        GfStatus::BufferTooSmall
    );
    let mut preds = vec![f64::NAN; needed];
    assert_eq!(unsafe { gf_model_predict(model, data, preds.as_mut_ptr(), preds.len(), &mut needed) }, GfStatus::Ok);
    assert!(preds.iter().all(|p| p.is_finite()));

    let mut from_report = std::mem::MaybeUninit::<GfMetrics>::uninit();
    let mut evaluated = std::mem::MaybeUninit::<GfMetrics>::uninit();
    assert_eq!(unsafe { gf_report_metrics(report, from_report.as_mut_ptr()) }, GfStatus::Ok);
    assert_eq!(unsafe { gf_model_evaluate(model, data, evaluated.as_mut_ptr()) }, GfStatus::Ok);
    let (a, b) = unsafe { (from_report.assume_init(), evaluated.assume_init()) };
    assert_eq!(a.mae, b.mae);
    assert_eq!(a.group_counts, [10; 4]);
    assert!((a.aar - gf_aar_score(a.mae, a.sigma)).abs() < 1e-12);

    let mut ck = ptr::null_mut();
    assert_eq!(unsafe { gf_model_to_checkpoint(model, &mut ck) }, GfStatus::Ok);
    let ck_text = unsafe { take_string(ck) };
    let c = CString::new(ck_text).unwrap();
    let mut reloaded = ptr::null_mut();
    assert_eq!(unsafe { gf_model_from_checkpoint(c.as_ptr(), &mut reloaded) }, GfStatus::Ok);
    let mut again = vec![0.0; needed];
    assert_eq!(unsafe { gf_model_predict(reloaded, data, again.as_mut_ptr(), again.len(), &mut needed) }, GfStatus::Ok);
    assert_eq!(again, preds);

    let mut json = ptr::null_mut();
    assert_eq!(unsafe { gf_report_to_json(report, &mut json) }, GfStatus::Ok);
    assert!(unsafe { take_string(json) }.contains("\"metrics\""));
    unsafe {
        gf_model_free(model);
        gf_model_free(reloaded);
        gf_report_free(report);
        gf_dataset_free(data);
        gf_config_free(config);
    }
}

#[test]
fn mismatched_dataset_is_rejected() {
    let config = small_config();
    let other = gf_config_default();
    let mut data = ptr::null_mut();
    assert_eq!(unsafe { gf_dataset_generate(other, &mut data) }, GfStatus::Ok);
    let (mut model, mut report) = (ptr::null_mut(), ptr::null_mut());
    assert_eq!(unsafe { gf_train(config, data, &mut model, &mut report) }, GfStatus::InvalidConfig);
    assert!(model.is_null() && report.is_null());
    unsafe {
        gf_dataset_free(data);
        gf_config_free(config);
        gf_config_free(other);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/groupface.h")).unwrap();
    for name in ["gf_train", "gf_model_predict", "gf_last_error_message", "GF_STATUS_BUFFER_TOO_SMALL", "GfMetrics"] {
        assert!(header.contains(name), "{name}");
    }
}
