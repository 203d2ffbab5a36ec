use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use ctf_core::checkpoint::load_checkpoint;
use ctf_core::clustering::load_cluster_map;
use ctf_core::tokenizer::{export_codebook, Codebook};
use ctf_tensor::SeedStream;
use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = r#"{
  "data": {"classes": 3, "train_per_class": 6, "val_per_class": 2, "height": 16, "width": 16},
  "tokenizer": {"codebook_size": 16, "steps": 60},
  "clustering": {"clusters": 4},
  "model": {
    "stage1": {"dim": 16, "layers": 1, "heads": 2},
    "stage2": {"dim": 16, "layers": 1, "heads": 2},
    "baseline": {"dim": 16, "layers": 1, "heads": 2}
  },
  "train": {"epochs": 1, "batch_size": 8, "lr_init": 0.001},
  "eval": {"samples": 4}
}"#;

fn ctf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctf")).args(args).output().expect("spawn ctf")
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|_| panic!("stderr is not JSON: {text}"))
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

struct Fixture {
    _dir: TempDir,
    config: PathBuf,
    run: PathBuf,
}

/// A run directory taken through every training step once.
fn trained() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let config = dir.path().join("tiny.json");
        fs::write(&config, TINY).unwrap();
        let run = dir.path().join("run");
        for cmd in ["gen-data", "train-tokenizer", "cluster", "train-stage1", "train-stage2", "train-baseline"] {
            let out = ctf(&[cmd, "--config", config.to_str().unwrap(), "--out", run.to_str().unwrap()]);
            assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        }
        Fixture { _dir: dir, config, run }
    })
}

/// Copy of the trained run directory for tests that modify artifacts.
fn scratch_copy(f: &Fixture) -> TempDir {
    let dir = TempDir::new().unwrap();
    copy_dir(&f.run, dir.path());
    dir
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}

#[test]
fn pipeline_artifacts_carry_the_resolved_config() {
    let f = trained();
    for name in ["tokenizer.ckpt", "clusters.clm", "stage1.ckpt", "stage2.ckpt", "baseline.ckpt", "data/train/manifest.json"] {
        assert!(f.run.join(name).exists(), "{name}");
    }
    let ckpt = load_checkpoint(&f.run.join("stage2.ckpt")).unwrap();
    let rc = ckpt.meta.run_config.expect("run config echoed");
    assert_eq!(rc["clustering"]["clusters"], 4);
    assert_eq!(rc["train"]["lr_final"], 1e-5);
    assert!(ckpt.meta.fingerprints.contains_key("clustermap"));
    let report = read_json(&f.run.join("cluster_report.json"));
    assert_eq!(report["config"]["data"]["classes"], 3);
    assert_eq!(report["clustering"]["m"], 4);
}

#[test]
fn sample_flags_reproduce_the_default_sampler() {
    let f = trained();
    let dir = scratch_copy(f);
    let out = ctf(&[
        "sample", "--config", f.config.to_str().unwrap(), "--out", dir.path().to_str().unwrap(),
        "--cfg-scale", "2.0", "--temp1", "1.1", "--top-k", "0",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc = read_json(&dir.path().join("samples.json"));
    let sampler = &doc["samples"]["sampler"];
    assert_eq!(sampler["cfg_scale"].as_f64().unwrap(), 2.0);
    assert_eq!(sampler["temperature_stage1"].as_f64().unwrap(), 1.1);
    assert_eq!(sampler["temperature_stage2"].as_f64().unwrap(), 1.1);
    assert_eq!(sampler["top_k"], 0);
    assert_eq!(sampler["cluster_mask"], false);
    assert_eq!(doc["samples"]["stage2_invocations"], 1);
    assert_eq!(doc["samples"]["stage1_invocations"], 16);
    assert!(dir.path().join("samples.ppm").exists());
}

#[test]
fn seeded_sampling_is_reproducible() {
    let f = trained();
    let (a, b) = (scratch_copy(f), scratch_copy(f));
    for d in [&a, &b] {
        let out = ctf(&["sample", "--config", f.config.to_str().unwrap(), "--out", d.path().to_str().unwrap(), "--seed", "5"]);
        assert!(out.status.success());
    }
    assert_eq!(fs::read(a.path().join("samples.ppm")).unwrap(), fs::read(b.path().join("samples.ppm")).unwrap());
}

#[test]
fn missing_stage2_checkpoint_is_a_validation_failure() {
    let f = trained();
    let dir = scratch_copy(f);
    fs::remove_file(dir.path().join("stage2.ckpt")).unwrap();
    let out = ctf(&["sample", "--config", f.config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "missing_artifact");
    assert!(err["message"].as_str().unwrap().contains("stage2.ckpt"), "{err}");
}

#[test]
fn reclustering_after_training_breaks_lineage() {
    let f = trained();
    let dir = scratch_copy(f);
    let d = dir.path().to_str().unwrap();
    let cfg = f.config.to_str().unwrap();
    assert!(ctf(&["cluster", "--config", cfg, "--out", d, "--seed", "99"]).status.success());
    let out = ctf(&["sample", "--config", cfg, "--out", d]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_json(&out)["error"], "fingerprint");
}

#[test]
fn eval_substitute_and_bench_write_reports() {
    let f = trained();
    let dir = scratch_copy(f);
    let d = dir.path().to_str().unwrap();
    let cfg = f.config.to_str().unwrap();
    assert!(ctf(&["eval", "--config", cfg, "--out", d]).status.success());
    let eval = read_json(&dir.path().join("eval_report.json"));
    for key in ["stage1_accuracy", "stage2_accuracy", "baseline_accuracy", "nll_ctf_masked", "nll_baseline"] {
        assert!(eval["reports"][key].is_object(), "{key}");
    }
    assert!(ctf(&["substitute", "--config", cfg, "--out", d]).status.success());
    let sub = read_json(&dir.path().join("substitution_report.json"));
    assert!(sub["substitution"]["ratio"].as_f64().unwrap() > 0.0);

    let bench_cfg = dir.path().join("bench.json");
    fs::write(
        &bench_cfg,
        r#"{"eval": {"bench": {"codebook_size": 64, "clusters": 2, "seq_len": 16, "trials": 1, "batch": 1,
            "trunk": {"dim": 16, "layers": 1, "heads": 2}}}}"#,
    )
    .unwrap();
    assert!(ctf(&["bench", "--config", bench_cfg.to_str().unwrap(), "--out", d]).status.success());
    let bench = read_json(&dir.path().join("bench_report.json"));
    assert_eq!(bench["report"]["values"]["baseline_steps"], 16.0);
    assert_eq!(bench["report"]["values"]["ctf_steps"], 17.0);
    assert_eq!(bench["report"]["values"]["head_flops_ratio"], 32.0);
}

#[test]
fn sweep_writes_one_row_per_value() {
    let f = trained();
    let dir = scratch_copy(f);
    let out = ctf(&[
        "sweep", "--config", f.config.to_str().unwrap(), "--out", dir.path().to_str().unwrap(),
        "--axis", "top_k", "--values", "1,8,0",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc = read_json(&dir.path().join("sweep_top_k.json"));
    let rows = doc["rows"].as_array().unwrap();
    let values: Vec<&str> = rows.iter().map(|r| r["value"].as_str().unwrap()).collect();
    assert_eq!(values, ["1", "8", "0"]);
    assert!(rows.iter().all(|r| r["metrics"]["distinct_grids"].as_f64().unwrap() >= 1.0));
}

#[test]
fn sweep_usage_errors() {
    let dir = TempDir::new().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = ctf(&["sweep", "--out", d, "--axis", "top_k", "--values", ""]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "usage");
    assert_eq!(ctf(&["sweep", "--out", d, "--axis", "depth", "--values", "1"]).status.code(), Some(2));
    assert_eq!(ctf(&["sweep", "--out", d, "--axis", "cfg"]).status.code(), Some(2));
}

#[test]
fn cluster_an_imported_full_scale_codebook() {
    let dir = TempDir::new().unwrap();
    let cb = Codebook::random(16384, 4, &mut SeedStream::new(3)).unwrap();
    let src = dir.path().join("big.cbk");
    export_codebook(&cb, &src).unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"clustering": {"max_iters": 5}}"#).unwrap();
    let run = dir.path().join("run");
    let (c, r) = (cfg.to_str().unwrap(), run.to_str().unwrap());
    assert!(ctf(&["import-codebook", "--config", c, "--out", r, "--codebook", src.to_str().unwrap()]).status.success());
    let out = ctf(&["cluster", "--config", c, "--out", r, "--clusters", "512"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let map = load_cluster_map(&run.join("clusters.clm")).unwrap();
    assert_eq!((map.m(), map.k()), (512, 16384));
    assert!(map.cluster_sizes().iter().all(|&s| s > 0));
}

#[test]
fn usage_and_validation_exit_codes() {
    let dir = TempDir::new().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(ctf(&["bogus"]).status.code(), Some(2));
    let out = ctf(&["gen-data", "--out", d, "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["exit_code"], 2);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"epochs": 1, "learning_rate": 0.1}}"#).unwrap();
    let out = ctf(&["gen-data", "--config", bad.to_str().unwrap(), "--out", d]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_json(&out)["error"], "config");

    let out = ctf(&["train-stage1", "--out", d]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(ctf(&["gen-data", "--out", d, "--model-size", "huge"]).status.code(), Some(3));
    assert_eq!(ctf(&["gen-data", "--out", d, "--temp1", "0"]).status.code(), Some(3));
}

#[test]
fn every_subcommand_has_help() {
    for cmd in [
        "gen-data", "train-tokenizer", "export-codebook", "import-codebook", "cluster", "train-stage1", "train-stage2",
        "train-baseline", "sample", "eval", "bench", "substitute", "sweep",
    ] {
        let out = ctf(&[cmd, "--help"]);
        assert!(out.status.success(), "{cmd}");
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains("--config") && text.contains("--out") && text.contains("--model-size"), "{cmd}");
    }
}

#[test]
fn export_then_import_codebook_round_trips() {
    let f = trained();
    let dir = scratch_copy(f);
    let d = dir.path().to_str().unwrap();
    let dest = dir.path().join("exported.cbk");
    assert!(ctf(&["export-codebook", "--out", d, "--dest", dest.to_str().unwrap()]).status.success());
    let other = dir.path().join("second");
    let o = other.to_str().unwrap();
    assert!(ctf(&["import-codebook", "--out", o, "--codebook", dest.to_str().unwrap()]).status.success());
    assert_eq!(fs::read(&dest).unwrap(), fs::read(other.join("codebook.cbk")).unwrap());
}
