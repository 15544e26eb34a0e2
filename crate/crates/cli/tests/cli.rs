use std::path::Path;
use std::process::Command;

use serde_json::Value;

const CONFIG: &str = r#"
[model]
train_per_class = 12
val_per_class = 6
[model.train]
steps = 10
eval_every = 0
warmup_steps = 2
[quant]
per_class = 4
[generate]
scheme = "bns"
samples = 8
[generate.config]
budget = 4
batch_size = 4
duplicates = 1
[distill]
per_class = 4
[distill.config]
steps = 3
batch_size = 8
warmup_steps = 1
evals = 1
[measure]
noise_samples = 12
"#;

fn dfkd(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dfkd"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn ok(out: std::process::Output) {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pipeline_artifacts_and_reproducibility() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("run.toml"), CONFIG).unwrap();
    ok(dfkd(d, &["train", "--config", "run.toml", "--out", "nested/teacher"]));
    let t = d.join("nested/teacher");
    for f in ["config.toml", "metrics.jsonl", "report.json", "teacher.dfkd"] {
        assert!(t.join(f).exists(), "{f}");
    }
    let w = "nested/teacher/teacher.dfkd";

    for out in ["g1", "g2"] {
        ok(dfkd(d, &["generate", "--config", "run.toml", "--weights", w, "--out", out, "--dump-images"]));
    }
    let a = std::fs::read(d.join("g1/synthetic.ds")).unwrap();
    assert_eq!(a, std::fs::read(d.join("g2/synthetic.ds")).unwrap());
    assert_eq!(std::fs::read_dir(d.join("g1/images")).unwrap().count(), 8);
    let g = report(&d.join("g1"));
    assert_eq!(g["samples"], 8);

    std::fs::write(d.join("gauss.toml"), CONFIG.replace("scheme = \"bns\"", "scheme = \"gaussian\"")).unwrap();
    ok(dfkd(d, &["generate", "--config", "gauss.toml", "--weights", w, "--out", "gauss"]));
    assert!(report(&d.join("gauss"))["mean_j_kl"].is_null());
    ok(dfkd(d, &["calibrate", "--config", "run.toml", "--weights", w, "--out", "cal", "--seeds", "2"]));
    let c = report(&d.join("cal"));
    assert_eq!(c["summary"]["top1"].as_array().unwrap().len(), 2);
    assert!(c["summary"]["std"].is_number());

    ok(dfkd(d, &["distill", "--config", "run.toml", "--weights", w, "--data", "g1/synthetic.ds", "--out", "kd"]));
    assert!(report(&d.join("kd"))["eval"][0]["top1"].is_number());
    assert!(d.join("kd/student.dfkd.quant.json").exists());

    ok(dfkd(d, &["eval", "--config", "run.toml", "--weights", "kd/student.dfkd", "--out", "ev"]));
    ok(dfkd(d, &["measure", "--config", "run.toml", "--weights", w, "--out", "m"]));
    let rows = report(&d.join("m"))["similarity"]["rows"].clone();
    assert_eq!(rows[0]["dataset"], "train");
    assert_eq!(rows[0]["ratio"], 1.0);
    assert!(d.join("m/similarity.txt").exists());

    ok(dfkd(d, &["analyze-bias", "--config", "run.toml", "--weights", w, "--data", "g1/synthetic.ds", "--out", "b"]));
    let hard: f64 = report(&d.join("b"))["bias"]["hard_mean"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((hard - 1.0).abs() < 1e-6);
    ok(dfkd(d, &["analyze-tail", "--config", "run.toml", "--weights", w, "--student", "kd/student.dfkd", "--data", "g1/synthetic.ds", "--out", "tl"]));
    let tail = report(&d.join("tl"))["tail"]["tail_means"].clone();
    assert!(tail.as_array().unwrap().iter().all(|v| (0.0..=1.0).contains(&v.as_f64().unwrap())));
}

#[test]
fn errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("bad.toml"), "[model]\nwieghts = \"x\"\n").unwrap();
    let out = dfkd(d, &["eval", "--config", "bad.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("wieghts"));
    let out = dfkd(d, &["generate", "--out", "o"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing weights"));
}
