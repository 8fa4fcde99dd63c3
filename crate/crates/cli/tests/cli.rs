use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fairspec"));
    c.env("FAIRSPEC_LOG", "error");
    c
}

fn base_config(out: &Path) -> Value {
    json!({
        "seed": 11,
        "out_dir": out,
        "data": {"source": "blobs", "d": 3, "train_counts": [40, 40, 30], "test_counts": [10, 10, 10],
                 "centers_scale": 2.0, "noise_std": 0.5},
        "model": {"hidden": [8]},
        "attack": {"norm": "linf", "epsilon": 0.2, "step_size": 0.05, "iters": 3, "random_start": true},
        "reg": {"alpha": 0.3, "gamma": 0.0, "mode": "hybrid"},
        "train": {"epochs": 2, "batch_size": 32, "lr": 0.05}
    })
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn run(cmd: &str, cfg: &Path, extra: &[&str]) -> Output {
    bin()
        .arg(cmd)
        .arg("--config")
        .arg(cfg)
        .args(extra)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_required_key_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config(&dir.path().join("out"));
    cfg.as_object_mut().unwrap().remove("seed");
    let o = run("train", &write_config(dir.path(), "c.json", &cfg), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("seed"), "{}", stderr(&o));

    let mut cfg = base_config(&dir.path().join("out"));
    cfg["train"].as_object_mut().unwrap().remove("lr");
    let o = run("train", &write_config(dir.path(), "c.json", &cfg), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lr"));

    let mut cfg = base_config(&dir.path().join("out"));
    cfg.as_object_mut().unwrap().remove("attack");
    let o = run("train", &write_config(dir.path(), "c.json", &cfg), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("attack"));
}

#[test]
fn invalid_values_and_unknown_keys_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config(&dir.path().join("out"));
    cfg["reg"]["alpha"] = json!(-0.5);
    assert_eq!(
        run("train", &write_config(dir.path(), "c.json", &cfg), &[])
            .status
            .code(),
        Some(2)
    );
    let mut cfg = base_config(&dir.path().join("out"));
    cfg["attack"]["radius"] = json!(1.0);
    let o = run("train", &write_config(dir.path(), "c.json", &cfg), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("radius"));
    assert_eq!(bin().arg("train").output().unwrap().status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config(&dir.path().join("out"));
    assert_eq!(
        run("eval", &write_config(dir.path(), "c.json", &cfg), &[])
            .status
            .code(),
        Some(2)
    );
    cfg["model"]["checkpoint"] = json!(dir.path().join("absent.ckpt"));
    assert_eq!(
        run("eval", &write_config(dir.path(), "c.json", &cfg), &[])
            .status
            .code(),
        Some(1)
    );
    cfg["data"] = json!({"source": "csv", "train": dir.path().join("absent.csv")});
    assert_eq!(
        run("eval", &write_config(dir.path(), "c.json", &cfg), &[])
            .status
            .code(),
        Some(1)
    );
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn train_is_byte_deterministic_and_embeds_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let path = write_config(dir.path(), "c.json", &base_config(&out));
    let o = run("train", &path, &["--threads", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let first = snapshot(&out);
    let o = run("train", &path, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(first, snapshot(&out));
    let names: Vec<&str> = first.iter().map(|f| f.0.as_str()).collect();
    for f in [
        "bound.json",
        "config.json",
        "eval.json",
        "eval_per_class.csv",
        "eval_summary.csv",
        "history.csv",
        "model.ckpt",
    ] {
        assert!(names.contains(&f), "{f}");
    }
    for f in ["eval.json", "bound.json"] {
        let v: Value = serde_json::from_slice(&std::fs::read(out.join(f)).unwrap()).unwrap();
        assert_eq!(v["config"]["seed"], json!(11));
        assert!(v["config"]["attack"]["seed"].is_u64());
    }
    let ckpt = std::fs::read(out.join("model.ckpt")).unwrap();
    run("train", &path, &["--seed", "12"]);
    assert_ne!(ckpt, std::fs::read(out.join("model.ckpt")).unwrap());
}

#[test]
fn paired_alpha_runs_give_comparable_histories() {
    let dir = tempfile::tempdir().unwrap();
    let mut heads = Vec::new();
    for (alpha, gamma) in [(0.0, 0.0), (0.3, 0.0), (0.3, 0.1)] {
        let out = dir.path().join(format!("run_{alpha}_{gamma}"));
        let mut cfg = base_config(&out);
        cfg["reg"]["alpha"] = json!(alpha);
        cfg["reg"]["gamma"] = json!(gamma);
        let o = run("train", &write_config(dir.path(), "c.json", &cfg), &[]);
        assert!(o.status.success(), "{}", stderr(&o));
        let text = std::fs::read_to_string(out.join("history.csv")).unwrap();
        assert_eq!(text.lines().count(), 3);
        heads.push(text.lines().next().unwrap().to_string());
    }
    assert!(heads.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn checkpoint_commands_and_nu_study() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = base_config(&out);
    let o = run("train", &write_config(dir.path(), "c.json", &cfg), &[]);
    assert!(o.status.success(), "{}", stderr(&o));

    let mut cfg = base_config(&dir.path().join("post"));
    cfg["model"] = json!({"checkpoint": out.join("model.ckpt")});
    cfg["bound"] = json!({"gamma": 0.1, "delta": 0.05});
    cfg["sharpness"] = json!({"grid": [0.001, 0.01], "n_samples": 3, "flavor": "clean"});
    cfg["nu_study"] = json!({"d_y": 4, "trials": 200});
    cfg.as_object_mut().unwrap().remove("train");
    let path = write_config(dir.path(), "post.json", &cfg);
    for cmd in [
        "eval",
        "bound",
        "sharpness",
        "finetune",
        "nu-study",
        "synth",
    ] {
        let o = run(cmd, &path, &[]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    let post = dir.path().join("post");
    let bound: Value =
        serde_json::from_slice(&std::fs::read(post.join("bound.json")).unwrap()).unwrap();
    assert_eq!(bound["report"]["epsilon_linf"], json!(0.2));
    assert!(bound["report"]["bound"]["total"].as_f64().unwrap() > 0.0);
    let nu: Value = serde_json::from_slice(&std::fs::read(post.join("nu.json")).unwrap()).unwrap();
    assert_eq!(nu["report"]["generator"], json!("simplex-columns"));
    assert!(post.join("nu_histogram.csv").exists());
    assert!(post.join("train.csv").exists() && post.join("test.csv").exists());

    let mut csv_cfg = cfg.clone();
    csv_cfg["data"] =
        json!({"source": "csv", "train": post.join("train.csv"), "test": post.join("test.csv")});
    csv_cfg["out_dir"] = json!(dir.path().join("csv"));
    let o = run("eval", &write_config(dir.path(), "csv.json", &csv_cfg), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(post.join("eval_per_class.csv")).unwrap(),
        std::fs::read(dir.path().join("csv/eval_per_class.csv")).unwrap()
    );
}

#[test]
fn default_regularizer_settings_accepted() {
    let dir = tempfile::tempdir().unwrap();
    for gamma in [0.0, 0.1] {
        let mut cfg = base_config(&dir.path().join("o"));
        cfg["reg"] = json!({"alpha": 0.3, "gamma": gamma, "mode": "hybrid"});
        cfg["train"]["epochs"] = json!(1);
        let o = run("train", &write_config(dir.path(), "c.json", &cfg), &[]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
}
