use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kdc_core::dataset::write_synthetic_dataset;
use serde_json::Value;

fn kdc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("KDC_RUN_DIR")
        .output()
        .expect("spawn kdc")
}

fn kdc_env(args: &[&str], key: &str, value: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env(key, value)
        .output()
        .expect("spawn kdc")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout_json(o: &Output) -> Value {
    assert_eq!(code(o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("json on stdout")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn ingest_lists_classes_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    write_synthetic_dataset(&root, &["circle", "square"], 3, 16, 1).unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    assert_eq!(code(&kdc(&["ingest", "--root", s(&root), "--out", s(&a)])), 0);
    assert_eq!(code(&kdc(&["ingest", "--root", s(&root), "--out", s(&b)])), 0);
    let (ja, jb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(ja, jb);
    let v: Value = serde_json::from_slice(&ja).unwrap();
    let classes = v["classes"].as_array().unwrap();
    assert_eq!(classes.len(), 2);
    assert!(classes.iter().all(|c| c["count"] == 3));

    std::fs::create_dir(root.join("empty")).unwrap();
    let o = kdc(&["ingest", "--root", s(&root), "--out", s(&a)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("empty"));
}

#[test]
fn ingest_rejects_undecodable_files() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    write_synthetic_dataset(&root, &["circle"], 2, 16, 1).unwrap();
    std::fs::write(root.join("circle/broken.png"), b"not a png").unwrap();
    let o = kdc(&["ingest", "--root", s(&root), "--out", s(&dir.path().join("m.json"))]);
    assert_ne!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("broken.png"));
}

#[test]
fn profile_counts_and_usage_errors() {
    let v = stdout_json(&kdc(&["profile", "--arch", "original", "--scale", "full"]));
    assert_eq!(v["total_params"], 859_520_964u64);
    let gmacs = v["total_gmacs"].as_f64().unwrap();
    assert!((gmacs / 339.01 - 1.0).abs() <= 0.02, "{gmacs}");
    let v = stdout_json(&kdc(&["profile", "--arch", "student", "--scale", "full"]));
    assert_eq!(v["total_params"], 420_423_044u64);
    assert_eq!(v["input_shape"], serde_json::json!([1, 4, 64, 64]));

    let v = stdout_json(&kdc(&["profile", "--arch", "student", "--search-drop"]));
    assert_eq!(v["results"].as_array().unwrap().len(), 9);
    assert_eq!(v["target_params"], 482_346_884u64);

    assert_eq!(code(&kdc(&["profile", "--arch", "medium"])), 2);
    assert_eq!(code(&kdc(&["profile", "--arch", "student", "--input", "64by64"])), 2);
    assert_eq!(code(&kdc(&["profile", "--arch", "student", "--latency"])), 2);
}

#[test]
fn profile_latency_at_toy_scale() {
    let dir = tempfile::tempdir().unwrap();
    let lock = dir.path().join("bench.lock");
    let args = [
        "profile", "--arch", "student", "--scale", "toy", "--latency", "--steps", "1", "--repeats", "3", "--lock", s(&lock),
    ];
    let v = stdout_json(&kdc(&args));
    let lat = &v["latency"];
    assert_eq!(lat["measure_count"], 3);
    assert_eq!(lat["warmup_count"], 2);
    assert!(lat["mean_s"].as_f64().unwrap() > 0.0);
    assert!(!lock.exists());

    std::fs::write(&lock, "busy").unwrap();
    assert_eq!(code(&kdc(&args)), 1);
}

/// Required keys, no extras, JSON types and minimums per the schema.
fn check_schema(report: &Value) {
    let schema: Value = serde_json::from_str(kdc_core::metrics::METRIC_REPORT_SCHEMA).unwrap();
    let props = schema["properties"].as_object().unwrap();
    let obj = report.as_object().unwrap();
    for key in schema["required"].as_array().unwrap() {
        assert!(obj.contains_key(key.as_str().unwrap()), "missing {key}");
    }
    for (k, v) in obj {
        let p = props.get(k).unwrap_or_else(|| panic!("unexpected key {k}"));
        let types: Vec<&str> = match &p["type"] {
            Value::String(t) => vec![t.as_str()],
            Value::Array(ts) => ts.iter().map(|t| t.as_str().unwrap()).collect(),
            other => panic!("bad schema type {other}"),
        };
        let ok = types.iter().any(|t| match *t {
            "number" => v.is_number(),
            "integer" => v.is_u64() || v.is_i64(),
            "string" => v.is_string(),
            "null" => v.is_null(),
            _ => false,
        });
        assert!(ok, "{k} = {v} is not {types:?}");
        if let (Some(min), Some(x)) = (p["minimum"].as_f64(), v.as_f64()) {
            assert!(x >= min, "{k} = {x} below {min}");
        }
    }
}

#[test]
fn eval_self_comparison_and_missing_dir() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    write_synthetic_dataset(&root, &["circle"], 8, 16, 2).unwrap();
    let imgs = root.join("circle");
    let out = dir.path().join("report.json");
    let o = kdc(&["eval", "--real", s(&imgs), "--gen", s(&imgs), "--out", s(&out), "--kid-subset-size", "4"]);
    let v = stdout_json(&o);
    assert!(v["fid"].as_f64().unwrap().abs() <= 1e-6);
    assert_eq!(std::fs::read(&out).unwrap(), o.stdout);
    check_schema(&v);

    let missing = dir.path().join("nope");
    assert_eq!(code(&kdc(&["eval", "--real", s(&missing), "--gen", s(&imgs), "--out", s(&out)])), 2);
}

fn toy_config(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    write_synthetic_dataset(&data, &["circle", "square"], 6, 16, 4).unwrap();
    let text = r#"
schema_version = 1
[train]
class_order = ["circle", "square"]
epochs_per_class = 1
batch_size = 2
learning_rate = 1e-3
buffer_capacity = 4
seed = 3
[teacher]
pretrain_steps = 2
batch_size = 2
[codec]
factor = 2
[eval]
samples_per_class = 2
sampling_steps = 2
saved_samples = 1
[paths]
data_root = "data"
output_root = "runs"
run_name = "toy"
"#;
    let path = dir.join("toy.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn log_steps(run: &Path) -> Vec<u64> {
    std::fs::read_to_string(run.join("losses.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect()
}

#[test]
fn train_neither_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let v = stdout_json(&kdc(&["train", "--config", s(&cfg), "--mode", "neither"]));
    assert_eq!(v["classes_done"], 2);
    assert_eq!(v["buffer_len"], 0);
    let run = dir.path().join("runs/toy");
    for k in 1..=2 {
        assert!(run.join(format!("checkpoints/class_{k}.ckpt")).is_file());
    }
    let steps = log_steps(&run);
    assert_eq!(steps, (1..=steps.len() as u64).collect::<Vec<_>>());
    let snapshot = std::fs::read(run.join("config.toml")).unwrap();
    let hash = std::fs::read_to_string(run.join("config.toml.sha256")).unwrap();
    assert!(hash.starts_with(&kdc_core::trainer::sha256_hex(&snapshot)));

    let missing = dir.path().join("missing.toml");
    assert_eq!(code(&kdc(&["train", "--config", s(&missing)])), 2);
    assert_eq!(code(&kdc(&["train", "--config", s(&cfg), "--mode", "sideways"])), 2);
}

#[test]
fn train_resume_continues_step_counter_and_generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let over = dir.path().join("elsewhere");
    let first = kdc_env(&["train", "--config", s(&cfg), "--stop-after-class", "1"], "KDC_RUN_DIR", &over);
    assert_eq!(stdout_json(&first)["classes_done"], 1);
    let run = over.join("toy");
    assert!(!dir.path().join("runs").exists());
    let ckpt1 = run.join("checkpoints/class_1.ckpt");
    let before = log_steps(&run).len();
    let resumed = kdc_env(&["train", "--config", s(&cfg), "--resume", s(&ckpt1)], "KDC_RUN_DIR", &over);
    assert_eq!(stdout_json(&resumed)["classes_done"], 2);
    let steps = log_steps(&run);
    assert!(steps.len() > before);
    assert_eq!(steps, (1..=steps.len() as u64).collect::<Vec<_>>());

    let buffer = stdout_json(&kdc(&["buffer-inspect", "--buffer", s(&run.join("buffer.bin")), "--class-names", "circle,square"]));
    assert_eq!(buffer["len"], 4);
    assert_eq!(buffer["histogram"]["circle"], 2);

    let ckpt2 = run.join("checkpoints/class_2.ckpt");
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    for out in [&a, &b] {
        let args = ["generate", "--ckpt", s(&ckpt2), "--prompt", "square", "--seed", "5", "--steps", "3", "--out", s(out)];
        assert_eq!(code(&kdc(&args)), 0);
    }
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    let img = kdc_core::dataset::load_png(&a).unwrap();
    assert_eq!(img.shape(), &[3, 16, 16]);

    let o = kdc(&["generate", "--ckpt", s(&ckpt2), "--prompt", "daisy", "--out", s(&a)]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("circle") && err.contains("square"), "{err}");
}
