use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn oirl(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oirl"))
        .args(args)
        .env("OIRL_OUT", out)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, json).unwrap();
    p
}

fn find(root: &Path, file: &str) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() == file {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn verify_passes_and_negation_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = oirl(tmp.path(), &["verify", "--out", tmp.path().to_str().unwrap()]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let text = String::from_utf8(ok.stdout).unwrap();
    for name in ["decomposability/unlinked_pair", "contraction/planted_offsets", "theorem2/exact_rewards"] {
        assert!(text.contains(name), "{name} missing");
    }
    let csv = fs::read_to_string(&find(tmp.path(), "summary.csv")[0]).unwrap();
    assert!(csv.starts_with("# schema=1 config="));
    for line in csv.lines().skip(2) {
        let status = line.split(',').nth(1).unwrap();
        assert!(["pass", "recorded"].contains(&status), "{line}");
    }

    let bad = oirl(tmp.path(), &["verify", "--inject-negated-reward", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8(bad.stdout).unwrap().contains("FAIL  recovery/planted_offset"));
}

#[test]
fn expert_writes_fifty_demos_into_new_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("not/yet/there");
    let out = oirl(&root, &["expert", "--env", "lava_crossing_m"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let demos = find(&root, "demos.jsonl");
    assert_eq!(demos.len(), 1);
    let text = fs::read_to_string(&demos[0]).unwrap();
    assert_eq!(text.lines().filter(|l| l.contains("\"kind\":\"end\"")).count(), 50);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&find(&root, "expert.json")[0]).unwrap()).unwrap();
    assert_eq!(summary["n_demos"], 50);
    assert_eq!(summary["config_hash"].as_str().unwrap().len(), 16);
}

#[test]
fn unknown_env_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = oirl(tmp.path(), &["expert", "--env", "swamp_crossing"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown environment"));
}

#[test]
fn train_is_idempotent_and_resumes_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"seeds": [5], "steps_per_iteration": 128}"#);
    let cfg = cfg.to_str().unwrap();

    let full = tmp.path().join("full");
    let t0 = std::time::Instant::now();
    let out = oirl(&full, &["train", "--config", cfg, "--iterations", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(t0.elapsed().as_secs() < 60);
    let out = oirl(&full, &["train", "--config", cfg, "--iterations", "3", "--resume"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = find(&full, "metrics.csv");
    assert_eq!(metrics.len(), 1);
    let resumed = fs::read(&metrics[0]).unwrap();
    let resumed_opts = fs::read(find(&full, "options.csv")[0].clone()).unwrap();

    // A second invocation leaves outputs untouched.
    let out = oirl(&full, &["train", "--config", cfg, "--iterations", "3"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("up to date"));
    assert_eq!(fs::read(&metrics[0]).unwrap(), resumed);

    let straight = tmp.path().join("straight");
    let out = oirl(&straight, &["train", "--config", cfg, "--iterations", "3", "--threads", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(&find(&straight, "metrics.csv")[0]).unwrap(), resumed);
    assert_eq!(fs::read(&find(&straight, "options.csv")[0]).unwrap(), resumed_opts);

    let text = String::from_utf8(resumed).unwrap();
    assert!(text.starts_with("# schema=1 config="));
    assert_eq!(text.lines().count(), 2 + 3);

    let rewards = fs::read_to_string(&find(&straight, "rewards.csv")[0]).unwrap();
    assert_eq!(rewards.lines().nth(1), Some("option,state,reward"));
    assert!(rewards.lines().count() > 2);

    // Extending without --resume is refused.
    let out = oirl(&straight, &["train", "--config", cfg, "--iterations", "4"]);
    assert!(!out.status.success());
}

#[test]
fn single_option_run_and_identity_transfer() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "one.json",
        r#"{"n_options": 1, "seeds": [1, 2], "iterations": 1, "steps_per_iteration": 128, "eval_episodes": 5}"#,
    );
    let out = oirl(
        tmp.path(),
        &["transfer", "--config", cfg.to_str().unwrap(), "--target", "lava_crossing_m"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let long = fs::read_to_string(&find(tmp.path(), "transfer.csv")[0]).unwrap();
    let mut lines = long.lines();
    assert!(lines.next().unwrap().starts_with("# schema=1 config="));
    assert_eq!(lines.next().unwrap(), "task,n_options,mode,mean,std,n_seeds");
    assert_eq!(lines.count(), 2);

    // Evaluating on the training environment reproduces the run's own
    // evaluation, which uses the same seed and episode count.
    let seeds = fs::read_to_string(&find(tmp.path(), "transfer_seeds.csv")[0]).unwrap();
    for eval in find(tmp.path(), "eval.json") {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&eval).unwrap()).unwrap();
        let seed = v["seed"].as_u64().unwrap();
        let want = v["stochastic"]["mean"].as_f64().unwrap();
        let row = seeds
            .lines()
            .find(|l| l.contains(",stochastic,") && l.split(',').nth(3) == Some(&seed.to_string()))
            .unwrap();
        let got: f64 = row.split(',').nth(4).unwrap().parse().unwrap();
        assert_eq!(got, want);
    }
    let table = fs::read_to_string(&find(tmp.path(), "table.csv")[0]).unwrap();
    assert!(table.contains("oirl/1,"));
}
