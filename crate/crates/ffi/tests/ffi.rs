use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use dcss_ffi::*;

fn last_error() -> String {
    let p = dcss_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn take_string(p: *mut std::ffi::c_char) -> String {
    let s = unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned();
    unsafe { dcss_string_free(p) };
    s
}

#[test]
fn flops_and_version() {
    assert_eq!(dcss_conv_flops(3, 3, 16, 32, 32, 32), 4_718_592);
    let v = unsafe { CStr::from_ptr(dcss_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn config_errors_map_to_codes() {
    let mut cfg = ptr::null_mut();
    let bad = CString::new("lamda = 1.0").unwrap();
    assert_eq!(unsafe { dcss_config_from_toml(bad.as_ptr(), &mut cfg) }, DcssStatus::Config);
    assert!(cfg.is_null());
    assert!(last_error().contains("lamda"));
    assert_eq!(unsafe { dcss_config_from_toml(ptr::null(), &mut cfg) }, DcssStatus::NullPointer);
    assert_eq!(unsafe { dcss_config_set_seed(ptr::null_mut(), 1) }, DcssStatus::NullPointer);
    let missing = CString::new("/nonexistent/c.toml").unwrap();
    assert_eq!(unsafe { dcss_config_load(missing.as_ptr(), &mut cfg) }, DcssStatus::Config);
    let model_path = CString::new("/nonexistent/x.ckpt").unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { dcss_model_load(model_path.as_ptr(), &mut model) }, DcssStatus::Io);
}

#[test]
fn success_clears_the_error() {
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { dcss_config_set_lambda(ptr::null_mut(), 1.0) }, DcssStatus::NullPointer);
    assert_eq!(unsafe { dcss_config_default(&mut cfg) }, DcssStatus::Ok);
    assert!(dcss_last_error_message().is_null());
    assert_eq!(unsafe { dcss_config_set_lambda(cfg, -2.0) }, DcssStatus::Config);
    unsafe { dcss_config_free(cfg) };
}

#[test]
fn pipeline_report_and_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let toml = CString::new(
        "base_channels = 4\nn_groups = 4\nwarmup_epochs = 1\nsearch_epochs = 1\ntrain_epochs = 1\nlr_decay_epochs = []\nn_train = 96\nn_test = 32\nimage_size = 8\nnum_classes = 3\nbatch_size = 16\ntrain_baseline = false\n",
    )
    .unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { dcss_config_from_toml(toml.as_ptr(), &mut cfg) }, DcssStatus::Ok);
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { dcss_config_set_out_dir(cfg, out.as_ptr()) }, DcssStatus::Ok);
    assert_eq!(unsafe { dcss_config_set_seed(cfg, 5) }, DcssStatus::Ok);
    let mut hash = ptr::null_mut();
    assert_eq!(unsafe { dcss_config_hash(cfg, &mut hash) }, DcssStatus::Ok);
    let hash = take_string(hash);

    let mut report = ptr::null_mut();
    assert_eq!(unsafe { dcss_run_pipeline(cfg, false, &mut report) }, DcssStatus::Ok, "{}", last_error());
    let json = {
        let mut s = ptr::null_mut();
        assert_eq!(unsafe { dcss_report_to_json(report, &mut s) }, DcssStatus::Ok);
        take_string(s)
    };
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["config_hash"], hash.as_str());
    assert_eq!(v["seed"], 5);
    let acc = unsafe { dcss_report_slim_accuracy(report) };
    assert!((0.0..=100.0).contains(&acc));
    let true_flops = unsafe { dcss_report_true_flops(report) };
    assert!(true_flops as f64 <= unsafe { dcss_report_predicted_flops(report) });
    assert!(unsafe { dcss_report_prune_ratio(report) } >= 0.0);

    let ckpt = CString::new(dir.path().join("search.ckpt").to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { dcss_model_load(ckpt.as_ptr(), &mut model) }, DcssStatus::Ok, "{}", last_error());
    assert!(unsafe { dcss_model_is_gated(model) });
    let mut plan = ptr::null_mut();
    assert_eq!(unsafe { dcss_model_derive_plan(model, 0.1, &mut plan) }, DcssStatus::Ok);
    let plan: serde_json::Value = serde_json::from_str(&take_string(plan)).unwrap();
    assert_eq!(plan["true_flops"], v["true_flops"]);
    unsafe { dcss_model_free(model) };

    let slim = CString::new(dir.path().join("slim.ckpt").to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { dcss_model_load(slim.as_ptr(), &mut model) }, DcssStatus::Ok);
    assert_eq!(unsafe { dcss_model_true_flops(model) }, true_flops);
    let mut plan = ptr::null_mut();
    assert_eq!(unsafe { dcss_model_derive_plan(model, 0.1, &mut plan) }, DcssStatus::State);
    unsafe {
        dcss_model_free(model);
        dcss_report_free(report);
        dcss_config_free(cfg);
    }
}

#[test]
fn verify_counts_suites() {
    let (mut passed, mut total) = (0usize, 0usize);
    assert_eq!(unsafe { dcss_verify(3, 1, &mut passed, &mut total) }, DcssStatus::Ok);
    assert!(total >= 16);
    assert_eq!(passed, total);
}

#[test]
fn header_is_generated_and_usable_from_c() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(root.join("include/dcss.h")).unwrap();
    for f in ["dcss_config_from_toml", "dcss_run_pipeline", "dcss_last_error_message", "DCSS_STATUS_OK", "typedef struct DcssConfig DcssConfig"] {
        assert!(header.contains(f), "header lacks {f}");
    }
    // deps/ sits next to the static library in the target directory
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().unwrap().parent().unwrap();
    let lib = lib_dir.join("libdcss_ffi.a");
    if !lib.exists() {
        eprintln!("skipping C link: {} not built", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let cc = Command::new("cc")
        .arg(root.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(root.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output();
    let cc = match cc {
        Ok(o) => o,
        Err(e) => {
            eprintln!("skipping C link: no C compiler ({e})");
            return;
        }
    };
    assert!(cc.status.success(), "{}", String::from_utf8_lossy(&cc.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}
