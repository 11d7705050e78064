use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn ratectl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ratectl"))
        .args(args)
        .env_remove("RATECTL_SELFTEST_CORRUPT")
        .env_remove("RATECTL_CACHE_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ratectl(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn corpus(dir: &Path, count: usize) -> PathBuf {
    let path = dir.join("corpus");
    ok(&["gen-corpus", "--seed", "4", "--count", &count.to_string(), "--out", s(&path)]);
    path
}

const TINY: &str = r#"version = 1
corpus = "corpus"

[net]
action_bins = 16
embedding_dim = 8
hidden = 16
head_hidden = 16
window = 4

[train]
steps = 6
batch_size = 8
min_replay_episodes = 6
episodes_per_step = 0.5
checkpoint_interval = 3

[train.search]
simulations = 4
"#;

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, TINY).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_corpus_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out_a = ok(&["gen-corpus", "--seed", "9", "--count", "5", "--out", s(&a)]);
    let out_b = ok(&["gen-corpus", "--seed", "9", "--count", "5", "--out", s(&b)]);
    assert_eq!(
        fs::read(a.join("manifest.json")).unwrap(),
        fs::read(b.join("manifest.json")).unwrap()
    );
    assert_eq!(out_a.replace(s(&a), ""), out_b.replace(s(&b), ""));
    let c = dir.path().join("c");
    let out_c = ok(&["gen-corpus", "--seed", "10", "--count", "5", "--out", s(&c)]);
    assert_ne!(out_a.replace(s(&a), ""), out_c.replace(s(&c), ""));
}

#[test]
fn heuristic_against_itself_is_zero() {
    let dir = TempDir::new().unwrap();
    let corpus = corpus(dir.path(), 4);
    let out = dir.path().join("eval");
    let md = ok(&["evaluate", "--corpus", s(&corpus), "--out", s(&out)]);
    assert!(md.contains("## BD-rate (PSNR)"));
    let report = read_json(&out.join("report.json"));
    assert_eq!(report[0]["mean_bd_rate_pct"].as_f64().unwrap(), 0.0);
    let rows = fs::read_to_string(out.join("curves.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 4 * 9);
    for name in ["report.md", "bd_rate_hist.csv", "overshoot_hist.csv"] {
        assert!(out.join(name).is_file(), "{name}");
    }
}

#[test]
fn baselines_sweep_every_target() {
    let dir = TempDir::new().unwrap();
    let corpus = corpus(dir.path(), 3);
    let out = dir.path().join("eval");
    ok(&[
        "evaluate",
        "--corpus",
        s(&corpus),
        "--baseline",
        "heuristic-vbr,constant-qp-100,constant-qp-160",
        "--out",
        s(&out),
    ]);
    let rows = fs::read_to_string(out.join("curves.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 3 * 3 * 9);
    let report = read_json(&out.join("report.json"));
    let tests: Vec<&str> = report.as_array().unwrap().iter().map(|r| r["test"].as_str().unwrap()).collect();
    assert_eq!(tests, ["constant-qp-100", "constant-qp-160"]);
}

#[test]
fn training_writes_json_logs_and_checkpoints() {
    let dir = TempDir::new().unwrap();
    corpus(dir.path(), 3);
    let config = tiny_config(dir.path());
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&config), "--out", s(&out)]);
    let log = fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);
    for line in log.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["loss"].as_f64().unwrap().is_finite());
    }
    assert!(out.join("checkpoints/step-00000003.json").is_file());
    assert!(out.join("checkpoints/step-00000006.json").is_file());
    assert_eq!(
        fs::read(out.join("checkpoint.json")).unwrap(),
        fs::read(out.join("checkpoints/step-00000006.json")).unwrap()
    );
    assert!(out.join("config.toml").is_file());
}

#[test]
fn seeds_pool_into_standard_errors() {
    let dir = TempDir::new().unwrap();
    let corpus = corpus(dir.path(), 3);
    let config = tiny_config(dir.path());
    let mut ckpts = Vec::new();
    for seed in ["1", "2"] {
        let out = dir.path().join(format!("run{seed}"));
        ok(&["train", "--config", s(&config), "--seed", seed, "--out", s(&out)]);
        ckpts.push(format!("agent={}", s(&out.join("checkpoint.json"))));
    }
    let out = dir.path().join("eval");
    ok(&[
        "evaluate",
        "--corpus",
        s(&corpus),
        "--checkpoint",
        &ckpts[0],
        "--checkpoint",
        &ckpts[1],
        "--out",
        s(&out),
    ]);
    let report = read_json(&out.join("report.json"));
    let r = &report[0];
    assert_eq!(r["test"], "agent");
    assert_eq!(r["per_seed_mean_bd_rate_pct"].as_array().unwrap().len(), 2);
    let agent = r["constraints"].as_array().unwrap().iter().find(|c| c["policy"] == "agent").unwrap();
    assert!(agent["seed_se"].is_object());
    assert_eq!(agent["episodes"], 2 * 3 * 9);
}

#[test]
fn lagrangian_run_is_labelled_and_compared() {
    let dir = TempDir::new().unwrap();
    let corpus = corpus(dir.path(), 3);
    let config = tiny_config(dir.path());
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&config), "--reward", "lagrangian", "--lambda", "1.0", "--out", s(&out)]);
    let saved = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(saved.contains("mode = \"lagrangian\""));
    let eval = dir.path().join("eval");
    let md = ok(&[
        "evaluate",
        "--corpus",
        s(&corpus),
        "--checkpoint",
        s(&out.join("checkpoint.json")),
        "--out",
        s(&eval),
    ]);
    assert!(md.contains("| heuristic-vbr | agent-lagrangian |"));
}

#[test]
fn oracle_measures_gaps_and_skips_long_videos() {
    let dir = TempDir::new().unwrap();
    let corpus = corpus(dir.path(), 6);
    let run = |policy: &str, max_frames: &str| {
        let out = dir.path().join(format!("oracle-{policy}-{max_frames}"));
        let text = ok(&[
            "oracle",
            "--corpus",
            s(&corpus),
            "--policy",
            policy,
            "--max-frames",
            max_frames,
            "--targets",
            "256,512,768",
            "--out",
            s(&out),
        ]);
        (text, read_json(&out.join("gap.json")), out)
    };

    let (_, gap, out) = run("oracle", "6");
    assert_eq!(gap["mean_gap_db"].as_f64().unwrap(), 0.0);
    assert_eq!(gap["feasibility_agreement"], gap["cases"]);
    assert_eq!(gap["cases"], 6 * 3);
    let rows = fs::read_to_string(out.join("oracle.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 6 * 3);

    let (_, gap, _) = run("constant-qp-255", "6");
    assert_eq!(gap["policy_feasible"], gap["cases"]);
    assert!(gap["mean_gap_db"].as_f64().unwrap() > 5.0);

    let (text, gap, _) = run("heuristic-vbr", "3");
    let skipped = gap["skipped_videos"].as_u64().unwrap();
    assert!(skipped > 0);
    assert_eq!(gap["cases"].as_u64().unwrap(), (6 - skipped) * 3);
    assert!(text.contains(&format!("{skipped} videos skipped")));
}

#[test]
fn selftest_passes_and_names_a_corrupted_check() {
    let out = ok(&["selftest"]);
    assert!(out.lines().all(|l| l.starts_with("PASS")), "{out}");
    let bad = Command::new(env!("CARGO_BIN_EXE_ratectl"))
        .arg("selftest")
        .env("RATECTL_SELFTEST_CORRUPT", "reward")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
    let stdout = String::from_utf8(bad.stdout).unwrap();
    assert!(stdout.lines().any(|l| l.starts_with("FAIL reward-truth-table")), "{stdout}");
    assert!(String::from_utf8_lossy(&bad.stderr).contains("reward-truth-table"));
}

#[test]
fn exit_codes_separate_usage_from_runtime_errors() {
    let dir = TempDir::new().unwrap();
    assert_eq!(ratectl(&["evaluate"]).status.code(), Some(2));
    assert_eq!(ratectl(&["no-such-command"]).status.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "version = 1\ncorpus = \"c\"\nunknown = 3\n").unwrap();
    let out = ratectl(&["train", "--config", s(&bad), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    let config = tiny_config(dir.path());
    let out = ratectl(&["train", "--config", s(&config), "--lambda", "-1", "--reward", "lagrangian", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    let out = ratectl(&["evaluate", "--corpus", s(&dir.path().join("missing")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
