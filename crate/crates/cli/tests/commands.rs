//! The `nirvis` binary driven through its public command chain.

use std::ffi::OsStr;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nirvis_cli::artifacts::read_csv;
use serde_json::Value;

const SMALL: &str = r#"
name = "chain"
seed = 4

[synth]
n_source_ids = 5
n_target_ids = 3
source_samples_per_id = 6
samples_per_id_per_modality = 6
gallery_per_id = 2
probe_per_id = 2
image_size = 16

[backbone]
embed_dim = 8
width = 4
blocks = 2
input_size = 16

[pretrain]
epochs = 2
batch_size = 8

[finetune]
epochs = 2
lr_decay_epochs = [2]
batch_target = 6
batch_source = 6
classifier = "mean"
lambda = 0.0

[eval]
fars = [0.01, 0.1]
"#;

fn nirvis<S: AsRef<OsStr>>(dir: &Path, args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nirvis"))
        .arg("--config")
        .arg(dir.join("exp.toml"))
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok<S: AsRef<OsStr>>(dir: &Path, args: &[S]) -> Value {
    let out = nirvis(dir, args);
    assert!(
        out.status.success(),
        "{:?} failed:\n{}",
        args.iter().map(|a| a.as_ref().to_string_lossy()).collect::<Vec<_>>(),
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    let json = stdout.rsplit_once("\nartifacts in").map_or(stdout.as_str(), |(j, _)| j);
    serde_json::from_str(json).unwrap_or_else(|e| panic!("{e}: {stdout}"))
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn run_dir(path: &Value) -> PathBuf {
    PathBuf::from(path.as_str().unwrap()).parent().unwrap().to_path_buf()
}

#[test]
fn full_chain_writes_hashed_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("exp.toml"), SMALL).unwrap();

    let synth = ok(dir, &["synth-gen"]);
    let source = synth["source_manifest"].as_str().unwrap().to_string();
    let target = synth["target_manifest"].as_str().unwrap().to_string();
    assert_eq!(synth["target_images"], 3 * 6 * 2);

    let pre = ok(dir, &["pretrain", "--set", &format!("data.source={source:?}")]);
    let pre_ckpt = pre["checkpoint"].as_str().unwrap().to_string();
    let pre_dir = run_dir(&pre["checkpoint"]);
    let pre_report = report(&pre_dir);
    let hash = pre_report["config_hash"].as_str().unwrap().to_string();
    assert_eq!(pre_report["command"], "pretrain");
    assert!(pre_dir.ends_with(Path::new("chain").join(&hash[..16])));
    let meta: Value =
        serde_json::from_str(&std::fs::read_to_string(Path::new(&pre_ckpt).join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config_hash"].as_str(), Some(hash.as_str()));
    let metrics = std::fs::read_to_string(pre_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    assert!(metrics.lines().all(|l| l.contains(&hash)));

    let with_ckpt = |command: &str, ckpt: &str| -> Vec<String> {
        vec![
            command.to_string(),
            "--set".into(),
            format!("data.source={source:?}"),
            "--set".into(),
            format!("data.target={target:?}"),
            "--set".into(),
            format!("data.checkpoint={ckpt:?}"),
        ]
    };

    let ft = ok(dir, &with_ckpt("finetune", &pre_ckpt));
    let ft_ckpt = ft["checkpoint"].as_str().unwrap().to_string();
    // 3 ids x 2 modalities x 2 train images, batches of 6.
    assert_eq!(ft["steps"], 2 * 2);
    assert_ne!(run_dir(&ft["checkpoint"]), pre_dir);

    let eval = ok(dir, &with_ckpt("eval-verify", &ft_ckpt));
    assert_eq!(eval["tar_at"].as_array().unwrap().len(), 2);
    let eval_dir = pre_dir.parent().unwrap().join(&eval["config_hash"].as_str().unwrap()[..16]);
    let (csv_hash, header, rows) = read_csv(&eval_dir.join("metrics.csv")).unwrap();
    assert_eq!(Some(csv_hash.as_str()), eval["config_hash"].as_str());
    assert_eq!(header, vec!["metric", "value"]);
    assert_eq!(rows.len(), 4);

    let emb = ok(dir, &with_ckpt("embed", &ft_ckpt));
    assert_eq!(emb["rows"], 3 * 6 * 2);
    let (_, header, rows) = read_csv(Path::new(emb["embeddings"].as_str().unwrap())).unwrap();
    assert_eq!(header.len(), 4 + 8);
    assert_eq!(rows.len(), 36);

    let cross = ok(
        dir,
        &[
            "cross-eval",
            "--set",
            &format!("cross.baseline={pre_ckpt:?}"),
            "--set",
            &format!("cross.checkpoints=[{{ name = \"ft\", path = {ft_ckpt:?} }}]"),
            "--set",
            &format!("cross.datasets=[{{ name = \"t\", path = {target:?} }}]"),
        ],
    );
    assert_eq!(cross["rows"].as_array().unwrap().len(), 2);
    assert_eq!(cross["columns"][0], "t");
}

#[test]
fn rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("exp.toml"), SMALL).unwrap();
    let synth = ok(dir, &["synth-gen"]);
    let source = synth["source_manifest"].as_str().unwrap().to_string();
    let set = format!("data.source={source:?}");
    let a = ok(dir, &["pretrain", "--set", &set]);
    let bytes = |v: &Value, f: &str| std::fs::read(Path::new(v["checkpoint"].as_str().unwrap()).join(f)).unwrap();
    let first = (bytes(&a, "weights.bin"), bytes(&a, "classifiers.bin"), bytes(&a, "meta.json"));
    let b = ok(dir, &["pretrain", "--set", &set]);
    assert_eq!(a, b);
    assert_eq!(first, (bytes(&b, "weights.bin"), bytes(&b, "classifiers.bin"), bytes(&b, "meta.json")));
}

#[test]
fn random_backbone_evaluates_near_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("exp.toml"), SMALL).unwrap();
    let synth = ok(dir, &["synth-gen"]);
    let target = synth["target_manifest"].as_str().unwrap().to_string();
    let eval = ok(dir, &["eval-verify", "--set", &format!("data.target={target:?}")]);
    let tar = eval["tar_at"][1]["tar"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&tar));
    assert_eq!(eval["counts"]["genuine"], 3 * 4);
}

#[test]
fn invalid_classifier_is_reported_with_allowed_values() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("exp.toml"), SMALL).unwrap();
    let out = nirvis(dir, &["finetune", "--set", "finetune.classifier=median", "--set", "eval.probe_modality=SWIR"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("finetune.classifier"), "{stderr}");
    assert!(stderr.contains("naive, mean, subspace"), "{stderr}");
    assert!(stderr.contains("eval.probe_modality"), "{stderr}");
    assert!(!dir.join("out").exists());
}

#[test]
fn missing_inputs_fail_with_a_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("exp.toml"), SMALL).unwrap();
    let out = nirvis(dir, &["finetune"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.checkpoint must be set"));
    let out = nirvis(dir, &["pretrain", "--set", "data.source=\"/no/such/manifest.csv\""]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.source"));
}

#[test]
fn dry_run_prints_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("exp.toml"), SMALL).unwrap();
    let out = nirvis(dir, &["synth-gen", "--dry-run", "--seed", "11"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("# config_hash: "));
    assert!(text.contains("seed = 11"));
    assert!(!dir.join("out").exists());
}
