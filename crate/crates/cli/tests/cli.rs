use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use difflora::model::{apply_adapter_checkpoint, build_base, inject_adapters, ModelConfig};
use difflora::tasks::{parse_needle_answer, read_jsonl, NeedleMode, NeedleSpec};
use serde_json::{json, Value};

fn difflora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_difflora")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A small needle run rooted in `dir`: 64 training and 32 held-out examples
/// of length 32, three training steps.
fn small_config(dir: &Path) -> Value {
    json!({
        "task": {"needle": {"seq_len": 32, "n_pairs": 2, "n_examples": 64, "seed": 3}},
        "train": {"steps": 3, "batch_size": 8, "learning_rate": 1e-3, "seed": 4},
        "eval": {"n_examples": 32, "n_probes": 4},
        "paths": {
            "dataset": dir.join("train.jsonl"),
            "eval_dataset": dir.join("eval.jsonl"),
            "out_dir": dir.join("run"),
        }
    })
}

fn write_config(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn gen(dir: &Path, cfg: &Value) -> PathBuf {
    let path = write_config(dir, "gen.json", cfg);
    let o = difflora(&["gen-data", "-c", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    path
}

fn checksums(text: &str) -> Vec<String> {
    text.lines().filter_map(|l| l.split("sha256 ").nth(1)).map(String::from).collect()
}

#[test]
fn gen_data_is_reproducible_from_the_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let oa = difflora(&["gen-data", "-c", gen(a.path(), &small_config(a.path())).to_str().unwrap()]);
    let ob = difflora(&["gen-data", "-c", gen(b.path(), &small_config(b.path())).to_str().unwrap()]);
    let (ca, cb) = (checksums(&stdout(&oa)), checksums(&stdout(&ob)));
    assert_eq!(ca.len(), 2);
    assert_eq!(ca, cb);
    assert_ne!(ca[0], ca[1], "held-out set uses a different seed");
}

#[test]
fn infeasible_spec_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg["task"]["needle"]["n_pairs"] = json!(40);
    let path = write_config(dir.path(), "bad.json", &cfg);
    let o = difflora(&["gen-data", "-c", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!stderr(&o).is_empty());
}

#[test]
fn unknown_config_keys_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "typo.json", &json!({"train": {"stpes": 3}}));
    let o = difflora(&["train", "-c", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stpes"));
}

#[test]
fn multi_key_dataset_has_every_record_self_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg["task"] = json!({"needle": {
        "seq_len": 64, "n_examples": 1000, "key_len": 2,
        "mode": {"kind": "multi_key", "distractors": 2}
    }});
    gen(dir.path(), &cfg);
    let data = read_jsonl(&dir.path().join("train.jsonl")).unwrap();
    assert_eq!(data.len(), 1000);
    let spec = NeedleSpec { key_len: 2, mode: NeedleMode::MultiKey { distractors: 2 }, ..NeedleSpec::default() };
    for ex in &data {
        assert_eq!(ex.tokens.len(), 64);
        assert_eq!(parse_needle_answer(&ex.tokens, &spec.partition, 2).unwrap(), ex.answer);
    }
}

#[test]
fn zero_steps_checkpoint_equals_the_injected_init() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gen(dir.path(), &small_config(dir.path()));
    let o = difflora(&["train", "-c", cfg.to_str().unwrap(), "--steps", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let model_cfg = ModelConfig::default();
    let init = inject_adapters(build_base(&model_cfg).unwrap(), &model_cfg).unwrap();
    let (loaded, _) =
        apply_adapter_checkpoint(build_base(&model_cfg).unwrap(), dir.path().join("run/adapters.ckpt")).unwrap();
    for ((ia, a), (ib, b)) in init.params().iter().zip(loaded.params().iter()) {
        assert_eq!(ia.name, ib.name);
        assert_eq!(a, b, "{}", ia.name);
    }
}

fn trainable_line(text: &str) -> usize {
    let line = text.lines().find(|l| l.starts_with("trainable parameters:")).expect("table printed");
    line.rsplit(' ').next().unwrap().parse().unwrap()
}

#[test]
fn parameter_table_shows_negative_only_adapters_and_matched_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gen(dir.path(), &small_config(dir.path()));
    let c = cfg.to_str().unwrap();
    let neg = difflora(&["train", "-c", c, "--variant", "difflora-neg", "--rank", "8", "--lambda", "fixed:0.1"]);
    assert!(neg.status.success(), "{}", stderr(&neg));
    let text = stdout(&neg);
    assert!(text.contains("attn.q2.lora_b") && text.contains("attn.k2.lora_a"));
    assert!(!text.contains("attn.q1.lora") && !text.contains("attn.lambda"));
    let both = difflora(&["train", "-c", c, "--variant", "difflora-both", "--rank", "4"]);
    assert!(both.status.success(), "{}", stderr(&both));
    assert!(stdout(&both).contains("attn.q1.lora_b"));
    assert_eq!(trainable_line(&text), trainable_line(&stdout(&both)));
    assert_eq!(trainable_line(&text), 2048);
}

#[test]
fn train_echoes_the_config_and_writes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gen(dir.path(), &small_config(dir.path()));
    let o = difflora(&["train", "-c", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    let echoed: Value = serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["train"]["steps"], json!(3));
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let last: Value = serde_json::from_str(metrics.lines().last().unwrap()).unwrap();
    assert!(last["eval"]["accuracy"].is_number());
}

#[test]
fn divergence_exits_with_code_3_and_reports_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg["train"]["learning_rate"] = json!(1e300);
    cfg["train"]["optimizer"] = json!({"kind": "sgd"});
    cfg["model"] = json!({"lambda": {"mode": "learnable", "init": 0.1}, "negative_b_init_std": 0.1});
    let path = gen(dir.path(), &cfg);
    let o = difflora(&["train", "-c", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}{}", stdout(&o), stderr(&o));
    assert!(stderr(&o).contains("lambda"), "{}", stderr(&o));
}

#[test]
fn grad_check_passes_on_the_default_grid_and_omits_fixed_lambda() {
    let o = difflora(&["grad-check"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let text = stdout(&o);
    for label in ["neg/fixed", "neg/learnable", "both/fixed", "both/learnable", "both/fixed/gn", "both/learnable/gn"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{label}:"))), "{label}");
    }
    let fixed_block: Vec<&str> =
        text.split("neg/learnable:").next().unwrap().lines().filter(|l| l.contains("lambda")).collect();
    assert!(fixed_block.is_empty(), "{fixed_block:?}");
    assert!(text.contains("layers.*.attn.lambda"));
}

#[test]
fn corrupted_gradient_exits_4_naming_the_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "gc.json", &json!({"grad_check": {"configured_only": true}}));
    let o = difflora(&["grad-check", "-c", path.to_str().unwrap(), "--corrupt", "layers.1.attn.k2.lora_a"]);
    assert_eq!(o.status.code(), Some(4));
    let err = stderr(&o);
    assert!(err.contains("layers.1.attn.k2.lora_a"), "{err}");
    assert!(!err.contains("q2"), "{err}");
}

#[test]
fn oracle_eval_is_perfect_and_missing_files_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gen(dir.path(), &small_config(dir.path()));
    let o = difflora(&["eval", "-c", cfg.to_str().unwrap(), "--oracle"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let row = stdout(&o).lines().nth(1).unwrap().to_string();
    assert!(row.contains("lookup-oracle") && row.contains("1.0000"), "{row}");

    let mut missing = small_config(dir.path());
    missing["paths"]["checkpoint"] = json!(dir.path().join("absent.ckpt"));
    let path = write_config(dir.path(), "missing.json", &missing);
    assert_eq!(difflora(&["eval", "-c", path.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(difflora(&["attn-report", "-c", path.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn base_and_trained_reports_compare() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg["model"] = json!({"negative_b_init_std": 0.05});
    let path = gen(dir.path(), &cfg);
    let c = path.to_str().unwrap();
    assert!(difflora(&["train", "-c", c]).status.success());
    let base = difflora(&["attn-report", "-c", c, "--name", "base"]);
    assert!(base.status.success(), "{}", stderr(&base));
    cfg["paths"]["checkpoint"] = json!(dir.path().join("run/adapters.ckpt"));
    let trained_cfg = write_config(dir.path(), "trained.json", &cfg);
    let trained = difflora(&["attn-report", "-c", trained_cfg.to_str().unwrap(), "--name", "trained"]);
    assert!(trained.status.success(), "{}", stderr(&trained));

    let run = dir.path().join("run");
    for stem in ["base", "trained"] {
        let csv = std::fs::read_to_string(run.join(format!("{stem}.csv"))).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "model,layer,head,region,component,mass,tokens");
    }
    let o = difflora(&[
        "compare",
        "--before",
        run.join("base.json").to_str().unwrap(),
        "--after",
        run.join("trained.json").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 3);
    assert!(!text.contains("NaN") && !text.contains("inf"));
    assert!(run.join("comparison.json").exists());
}

#[test]
fn identical_runs_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    let path = gen(dir.path(), &cfg);
    assert!(difflora(&["train", "-c", path.to_str().unwrap()]).status.success());
    cfg["paths"]["out_dir"] = json!(dir.path().join("run2"));
    let path2 = write_config(dir.path(), "again.json", &cfg);
    assert!(difflora(&["train", "-c", path2.to_str().unwrap()]).status.success());
    for file in ["adapters.ckpt", "metrics.jsonl"] {
        let a = std::fs::read(dir.path().join("run").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("run2").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
}
