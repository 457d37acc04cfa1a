//! End-to-end runs of the binary on a shrunken desk configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: [&str; 7] = [
    "train.warm_start.steps=2",
    "train.stage1.steps=1",
    "train.stage2.steps=2",
    "eval.max_per_task=1",
    "eval.max_new_tokens=4",
    "seeds=[0, 1, 2]",
    "ablation.rows=[\"full\", \"no_structure\", \"no_stage1\"]",
];

fn protfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protfuse"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn with_config(sub: &str, config: &Path, extra: &[&str]) -> Output {
    let config = config.to_str().unwrap();
    let mut args = vec![sub, "--config", config];
    for s in TINY {
        args.extend(["--set", s]);
    }
    args.extend_from_slice(extra);
    protfuse(&args)
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "exit {:?}\n{}", o.status.code(), String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn fixtures(dir: &Path) -> PathBuf {
    let o = protfuse(&["fixtures", "--out", dir.to_str().unwrap(), "--proteins-per-family", "4"]);
    ok(&o);
    dir.join("config.toml")
}

#[test]
fn full_pipeline_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let config = fixtures(tmp.path());

    let built = ok(&with_config("build-data", &config, &[]));
    assert!(!built.trim().is_empty());

    let trained = ok(&with_config("train", &config, &[]));
    assert_eq!(trained.lines().filter(|l| l.starts_with("seed ")).count(), 3, "{trained}");
    let ckpt = tmp.path().join("out/runs/seed0/model.ckpt");
    assert!(ckpt.is_file());

    let report = ok(&with_config("eval", &config, &[]));
    assert!(report.lines().any(|l| l.starts_with("task")), "{report}");
    assert!(tmp.path().join("out/eval/report.txt").is_file());

    let id = std::fs::read_dir(tmp.path().join("out/structures"))
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "struct"))
        .map(|p| p.file_stem().unwrap().to_string_lossy().into_owned())
        .min()
        .expect("a cached structure");
    let answer = with_config(
        "generate",
        &config,
        &["--checkpoint", ckpt.to_str().unwrap(), "--protein", &id, "--question", "What does <protein> do?"],
    );
    ok(&answer);

    let table = ok(&with_config("ablate", &config, &[]));
    let header = table.lines().next().unwrap();
    for row in ["full", "no_structure", "no_stage1"] {
        assert!(header.contains(row), "{header}");
    }
    let results = std::fs::read_to_string(tmp.path().join("out/ablate/results.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = results.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1]["fusion"], "seq_only");
    assert_eq!(rows[2]["recipe"], "Stage2Only");
}

#[test]
fn exit_codes_follow_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let config = fixtures(tmp.path());

    let bad_key = protfuse(&["train", "--config", config.to_str().unwrap(), "--set", "train.bogus=1"]);
    assert_eq!(bad_key.status.code(), Some(2), "{}", String::from_utf8_lossy(&bad_key.stderr));

    let missing = protfuse(&["build-data", "--config", tmp.path().join("nope.toml").to_str().unwrap()]);
    assert_ne!(missing.status.code(), Some(0));

    std::fs::remove_file(tmp.path().join("annotations.tsv")).unwrap();
    let no_data = with_config("build-data", &config, &[]);
    assert_eq!(no_data.status.code(), Some(3), "{}", String::from_utf8_lossy(&no_data.stderr));
}
