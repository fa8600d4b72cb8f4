use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dcss::config::ExperimentConfig;
use dcss::data::{load_binary_dataset, make_synthetic, write_binary_dataset, Dataset, SyntheticSpec, Task};
use dcss::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TINY: &str = r#"
base_channels = 4
n_groups = 4
warmup_epochs = 1
search_epochs = 1
train_epochs = 1
lr_decay_epochs = []
n_train = 96
n_test = 32
image_size = 8
num_classes = 3
batch_size = 16
"#;

fn dcss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcss")).args(args).output().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("c.toml");
    std::fs::write(&path, TINY).unwrap();
    path
}

fn report_without_volatile_fields(dir: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("report.json")).unwrap()).unwrap();
    let obj = v.as_object_mut().unwrap();
    obj.remove("wall_time_s");
    obj["config"].as_object_mut().unwrap().remove("out_dir");
    v
}

#[test]
fn dataset_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec { task: Task::Classify, num_classes: 3, n_samples: 7, channels: 3, height: 4, width: 5, noise: 0.3 };
    let d = make_synthetic(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let path = dir.path().join("d.bin");
    write_binary_dataset(&path, &d).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 16 + 7 * (1 + 3 * 4 * 5));
    let back = load_binary_dataset(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let mut short = bytes.clone();
    short.truncate(bytes.len() - 3);
    let err = Dataset::from_bytes(&short).unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");
    let mut magic = bytes;
    magic[0] = b'X';
    assert!(Dataset::from_bytes(&magic).is_err());
}

#[test]
fn header_arithmetic_single_sample() {
    let mut bytes = b"DCSS".to_vec();
    bytes.push(1);
    bytes.push(3);
    bytes.extend(2u16.to_le_bytes());
    bytes.extend(2u16.to_le_bytes());
    bytes.extend(1u32.to_le_bytes());
    bytes.extend(4u16.to_le_bytes());
    bytes.push(2);
    bytes.extend(0..12u8);
    let d = Dataset::from_bytes(&bytes).unwrap();
    assert_eq!((d.len(), d.channels, d.height, d.width), (1, 3, 2, 2));
    assert_eq!(d.label(0), 2);
}

#[test]
fn config_errors() {
    assert!(ExperimentConfig::from_toml("lamda = 1.0").is_err());
    assert!(ExperimentConfig::from_toml("lambda = -1.0").is_err());
    let cfg = ExperimentConfig::from_toml("lambda = 1.5\nseed = 3").unwrap();
    assert_eq!((cfg.lambda, cfg.seed), (1.5, 3));
    let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn usage_errors_exit_with_code_two() {
    assert_eq!(dcss(&["gen-data"]).status.code(), Some(2));
    assert_eq!(dcss(&["verify", "--lambda", "1.0"]).status.code(), Some(2));
    assert_eq!(dcss(&["pipeline", "--format", "xml"]).status.code(), Some(2));
    assert_eq!(dcss(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn verify_passes() {
    let out = dcss(&["verify", "--instances", "2"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    assert!(stdout.lines().filter(|l| l.starts_with("PASS")).count() >= 10, "{stdout}");
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn gen_data_writes_a_loadable_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.bin");
    let cfg = tiny_config(dir.path());
    let out = dcss(&["gen-data", "--config", cfg.to_str().unwrap(), "--data", path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!load_binary_dataset(&path).unwrap().is_empty());
}

#[test]
fn pipeline_writes_artifacts_and_extract_only_writes_a_plan() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("run");
    let run = dcss(&["pipeline", "--config", cfg.to_str().unwrap(), "--lambda", "1.0", "--seed", "7", "--out", out_dir.to_str().unwrap()]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    for f in ["warmup.ckpt", "search.ckpt", "slim.ckpt", "baseline.ckpt", "history.csv", "history.json", "gates.json", "plan.json", "uniform.json", "report.json"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    let report = report_without_volatile_fields(&out_dir);
    assert_eq!(report["seed"], 7);
    let hash = report["config_hash"].as_str().unwrap().to_string();
    let csv = std::fs::read_to_string(out_dir.join("history.csv")).unwrap();
    assert!(csv.starts_with(&format!("# config_hash={hash} seed=7")));
    assert!(csv.lines().nth(1).unwrap().starts_with("epoch,split,task_loss,cost_term,expected_mflops,temperature,lr_weights,lr_gates,"));
    for f in ["plan.json", "gates.json", "uniform.json", "history.json"] {
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(out_dir.join(f)).unwrap()).unwrap();
        assert_eq!(v["config_hash"], hash.as_str(), "{f}");
    }

    let ex_dir = dir.path().join("extract");
    std::fs::create_dir(&ex_dir).unwrap();
    let ckpt = out_dir.join("search.ckpt");
    let ex = dcss(&["extract", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out", ex_dir.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(ex.status.success(), "{}", String::from_utf8_lossy(&ex.stderr));
    let files: Vec<_> = std::fs::read_dir(&ex_dir).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files, vec![std::ffi::OsString::from("plan.json")]);
    assert_eq!(std::fs::read(ex_dir.join("plan.json")).unwrap(), std::fs::read(out_dir.join("plan.json")).unwrap());

    let ev = dcss(&["eval", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out", out_dir.to_str().unwrap()]);
    assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
}

#[test]
fn staged_resume_matches_a_single_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(dcss(&["pipeline", "--config", cfg, "--out", a.to_str().unwrap()]).status.success());
    for cmd in ["warmup", "search"] {
        assert!(dcss(&[cmd, "--config", cfg, "--out", b.to_str().unwrap()]).status.success());
    }
    assert!(dcss(&["pipeline", "--resume", "--config", cfg, "--out", b.to_str().unwrap()]).status.success());
    assert_eq!(report_without_volatile_fields(&a), report_without_volatile_fields(&b));
    for f in ["warmup.ckpt", "search.ckpt", "slim.ckpt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn failing_stage_is_named_and_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, format!("{TINY}\ndata_path = \"{}\"\n", dir.path().join("missing.bin").display())).unwrap();
    let out = dcss(&["pipeline", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
