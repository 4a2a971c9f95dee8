use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use causalcap::experiment::ExperimentConfig;
use causalcap::scenegen::read_manifest;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_causalcap")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A config small enough to train in well under a second.
fn tiny(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::shortcut(seed);
    cfg.world.splits.train = 40;
    cfg.world.splits.valid = 5;
    cfg.world.splits.test = 10;
    cfg.model.embed_dim = 8;
    cfg.model.attention_dim = 8;
    cfg.model.hidden_dim = 8;
    cfg.train.stage1.epochs = 2;
    cfg.train.stage2.epochs = 1;
    cfg.eval.interp_samples = 5;
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> String {
    let p = dir.join("config.toml");
    fs::write(&p, cfg.to_toml()).unwrap();
    p.to_str().unwrap().to_string()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn init_config_round_trips() {
    for preset in ["shortcut", "biased"] {
        let o = bin(&["init-config", "--preset", preset, "--seed", "3"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let cfg = ExperimentConfig::from_toml(&String::from_utf8(o.stdout).unwrap()).unwrap();
        assert_eq!(cfg.world.seed, 3);
        assert_eq!(cfg.bias.is_some(), preset == "biased");
    }
}

#[test]
fn gen_data_is_reproducible_and_hashed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(0);
    let config = write_config(dir.path(), &cfg);
    for out in ["a", "b"] {
        let o = bin(&["gen-data", "--config", &config, "--out", &p(dir.path(), out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["manifest.json", "train.jsonl", "valid.jsonl", "test.jsonl"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{f}");
    }
    let m = read_manifest(&dir.path().join("a")).unwrap();
    assert_eq!(m.config_hash, cfg.world.hash());
    assert_eq!((m.train.count, m.valid.count, m.test.count), (40, 5, 10));
}

#[test]
fn malformed_config_exits_two_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let text = tiny(0).to_toml().replace("batch_size = 16", "batch_size = \"sixteen\"");
    let config = dir.path().join("bad.toml");
    fs::write(&config, text).unwrap();
    let o = bin(&["gen-data", "--config", config.to_str().unwrap(), "--out", &p(dir.path(), "d")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("batch_size"), "{}", stderr(&o));

    let mut cfg = tiny(0);
    cfg.regularization.alpha = 2.0;
    fs::write(&config, cfg.to_toml()).unwrap();
    let o = bin(&["pipeline", "--config", config.to_str().unwrap(), "--out", &p(dir.path(), "x")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("regularization.alpha"), "{}", stderr(&o));

    let o = bin(&["gen-data", "--config", &p(dir.path(), "missing.toml"), "--out", &p(dir.path(), "d")]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_then_evaluate_and_interpret() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(1);
    let config = write_config(dir.path(), &cfg);
    let data = p(dir.path(), "data");
    assert!(bin(&["gen-data", "--config", &config, "--out", &data]).status.success());
    let exp = p(dir.path(), "exp");
    let o = bin(&["train", "--config", &config, "--data", &data, "--out", &exp, "--variant", "nde"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["variant"], "nde");
    for f in ["stage1/checkpoint.json", "cf/train.jsonl", "nde/checkpoint.json", "nde/metrics.json", "nde/summary.json"] {
        assert!(dir.path().join("exp").join(f).exists(), "{f}");
    }

    let ck = p(&dir.path().join("exp"), "nde/checkpoint.json");
    let o = bin(&["evaluate", "--checkpoint", &ck, "--data", &data, "--interp-samples", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    for key in ["chair_s", "p_at_5", "ndcg_at_5", "bleu4", "rouge_l", "interpretability"] {
        let v = report[key].as_f64().unwrap_or_else(|| panic!("missing {key}"));
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    assert!(stderr(&o).contains("CHAIR_s"));

    let o = bin(&["interpret", "--checkpoint", &ck, "--data", &data, "--samples", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["probes"].as_array().unwrap().len(), 3);

    // A dataset from another world is refused.
    let other = write_config(&dir.path().join("data"), &tiny(2));
    let o = bin(&["train", "--config", &other, "--data", &data, "--out", &exp]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("world"));
}

#[test]
fn pipeline_reruns_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny(4));
    let mut outs = Vec::new();
    for run in ["r1", "r2"] {
        let o = bin(&["pipeline", "--config", &config, "--out", &p(dir.path(), run), "--variant", "te"]);
        assert!(o.status.success(), "{}", stderr(&o));
        outs.push(o.stdout);
    }
    assert_eq!(outs[0], outs[1]);
    for f in ["te/checkpoint.json", "te/metrics.json", "te/trace.jsonl"] {
        assert_eq!(
            fs::read(dir.path().join("r1").join(f)).unwrap(),
            fs::read(dir.path().join("r2").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn sweep_prints_one_row_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny(5));
    let out = p(dir.path(), "sweep");
    let o = bin(&["sweep-alpha", "--config", &config, "--alphas", "0.9,1.0", "--out", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 5, "{text}");
    assert!(dir.path().join("sweep/sweep/sweep.svg").exists());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("sweep/sweep/sweep.json")).unwrap()).unwrap();
    assert_eq!(report["alpha_one_matches_vanilla"], true);
}
