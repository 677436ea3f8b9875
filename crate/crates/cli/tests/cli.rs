use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn tup(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tup"))
        .args(args)
        .env_remove("TUP_LLM_API_KEY")
        .env_remove("TUP_EMBED_API_KEY")
        .output()
        .unwrap()
}

fn tup_stdin(args: &[&str], input: &[u8]) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_tup"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input).unwrap();
    child.wait_with_output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// The stderr error line, which must be the only line.
fn error_line(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {err}");
    lines[0].to_owned()
}

fn last_json(stdout: &str) -> Value {
    serde_json::from_str(stdout.lines().last().unwrap()).unwrap()
}

fn json_lines(stdout: &str) -> Vec<Value> {
    stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

/// A small synthetic run that trains in seconds.
fn small_config(dir: &Path, name: &str) -> PathBuf {
    let out = dir.join(name);
    let cfg = serde_json::json!({
        "synth": {"n_users": 30, "seed": 3},
        "output_dir": out,
        "dim": 16,
        "hidden": [8],
        "mf_k": 4,
        "seed": 3,
        "train": {"max_epochs": 3, "patience": 2, "batch_size": 256}
    });
    let path = dir.join(format!("{name}.json"));
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn write_inputs(dir: &Path) -> (PathBuf, PathBuf) {
    let i = dir.join("i.jsonl");
    let c = dir.join("c.jsonl");
    let mut lines = String::new();
    // u1 has 10 events, u2 has 4, plus one malformed line.
    for t in 0..10 {
        lines.push_str(&format!("{{\"reviewerID\":\"u1\",\"asin\":\"i{}\",\"unixReviewTime\":{}}}\n", t % 5, 100 + t));
    }
    for t in 0..4 {
        lines.push_str(&format!("{{\"reviewerID\":\"u2\",\"asin\":\"i{t}\",\"unixReviewTime\":{}}}\n", 200 + t));
    }
    lines.push_str("not json\n");
    std::fs::write(&i, lines).unwrap();
    let catalog: String = (0..5)
        .map(|k| format!("{{\"asin\":\"i{k}\",\"title\":\"Item {k}\",\"description\":\"about {k}\"}}\n"))
        .collect();
    std::fs::write(&c, catalog).unwrap();
    (i, c)
}

#[test]
fn ingest_writes_split_stats_and_rejects() {
    let dir = tempfile::tempdir().unwrap();
    let (i, c) = write_inputs(dir.path());
    let out = dir.path().join("run");
    let stdout = ok(&tup(&[
        "ingest",
        "--interactions",
        i.to_str().unwrap(),
        "--catalog",
        c.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    let stats = last_json(&stdout);
    assert_eq!(stats["n_users"], 2);
    assert_eq!(stats["n_interactions"], 14);
    assert_eq!(stats["rejected_interactions"], 1);
    for f in ["split.json", "stats.json", "rejects_interactions.csv", "rejects_catalog.csv", "config.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let split: Value = serde_json::from_str(&std::fs::read_to_string(out.join("split.json")).unwrap()).unwrap();
    assert_eq!(split["users"]["u1"]["train"]["events"].as_array().unwrap().len(), 6);
    let rejects = std::fs::read_to_string(out.join("rejects_interactions.csv")).unwrap();
    assert!(rejects.lines().nth(1).unwrap().starts_with("15,"));

    let filtered = ok(&tup(&[
        "ingest",
        "--interactions",
        i.to_str().unwrap(),
        "--catalog",
        c.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--min-history",
        "5",
    ]));
    let stats = last_json(&filtered);
    assert_eq!(stats["n_users"], 1);
    assert_eq!(stats["excluded_users"], 1);
    assert_eq!(stats["n_interactions"], 10);
    assert_eq!(stats["min_history"], 5);
}

#[test]
fn missing_input_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let (i, _) = write_inputs(dir.path());
    let missing = dir.path().join("nope.jsonl");
    let out = tup(&[
        "ingest",
        "--interactions",
        i.to_str().unwrap(),
        "--catalog",
        missing.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    let line = error_line(&out);
    assert!(line.starts_with("error[io]: "), "{line}");
    assert!(line.contains("nope.jsonl"), "{line}");
}

#[test]
fn errors_are_single_categorized_lines() {
    let line = error_line(&tup(&["ablate", "--variants", "full,bogus"]));
    assert!(line.starts_with("error[config]: "), "{line}");
    assert!(line.contains("bogus"));
    let line = error_line(&tup(&["frobnicate"]));
    assert!(line.starts_with("error[usage]: "), "{line}");
    let line = error_line(&tup(&["eval", "--out", "/nonexistent/run", "--variants", "full"]));
    assert!(line.starts_with("error[config]: ") || line.starts_with("error[io]: "), "{line}");
}

#[test]
fn remote_backend_without_key_fails_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "remote");
    let out = tup(&["profile", "--config", cfg.to_str().unwrap(), "--backend", "remote-llm"]);
    assert_eq!(out.status.code(), Some(2));
    let line = error_line(&out);
    assert!(line.starts_with("error[config]: "), "{line}");
    assert!(line.contains("TUP_LLM_API_KEY"), "{line}");
    let out = tup(&["ablate", "--config", cfg.to_str().unwrap(), "--embed-backend", "remote-embed"]);
    assert!(error_line(&out).contains("TUP_EMBED_API_KEY"));
    assert!(!dir.path().join("remote").join("split.json").exists());
}

#[test]
fn template_stages_are_offline_and_cached() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "stages");
    let c = cfg.to_str().unwrap();
    ok(&tup(&["ingest", "--config", c]));

    let cold = last_json(&ok(&tup(&["profile", "--config", c])));
    assert_eq!(cold["backend"], "template");
    assert_eq!(cold["network_calls"], 0);
    assert_eq!(cold["outputs"], 90);
    assert_eq!(cold["cache_misses"], 90);
    let warm = last_json(&ok(&tup(&["profile", "--config", c])));
    assert_eq!(warm["hit_rate"], 1.0);
    assert_eq!(warm["cache_hits"], 90);
    assert_eq!(warm["backend_calls"], 0);

    let cold = last_json(&ok(&tup(&["embed", "--config", c])));
    assert_eq!(cold["backend"], "hashing");
    assert_eq!(cold["network_calls"], 0);
    let warm = last_json(&ok(&tup(&["embed", "--config", c])));
    assert_eq!(warm["hit_rate"], 1.0);
    assert_eq!(warm["backend_calls"], 0);

    let run = dir.path().join("stages");
    let profiles = std::fs::read_to_string(run.join("profiles.jsonl")).unwrap();
    assert_eq!(profiles.lines().count(), 90);
    assert!(run.join("items.emb").exists() && run.join("profiles.emb").exists());
}

#[test]
fn staged_run_matches_ablate_and_train_is_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let staged = small_config(dir.path(), "staged");
    let s = staged.to_str().unwrap();
    for stage in ["ingest", "profile", "embed"] {
        ok(&tup(&[stage, "--config", s]));
    }
    let trained = json_lines(&ok(&tup(&["train", "--config", s])));
    assert_eq!(trained.len(), 8);
    let again = last_json(&ok(&tup(&["train", "--config", s])));
    assert_eq!(again["train"], "up to date");
    ok(&tup(&["eval", "--config", s]));

    let all = small_config(dir.path(), "all");
    ok(&tup(&["ablate", "--config", all.to_str().unwrap()]));
    let a = std::fs::read(dir.path().join("staged/report.csv")).unwrap();
    let b = std::fs::read(dir.path().join("all/report.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn ablate_reports_every_variant_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let first = small_config(dir.path(), "first");
    let second = small_config(dir.path(), "second");
    let stdout = ok(&tup(&["ablate", "--config", first.to_str().unwrap()]));
    ok(&tup(&["ablate", "--config", second.to_str().unwrap()]));

    let summary: Vec<String> = stdout
        .lines()
        .filter_map(|l| serde_json::from_str::<Value>(l).ok())
        .filter_map(|v| v["variant"].as_str().map(str::to_owned))
        .collect::<Vec<_>>();
    assert!(summary.ends_with(&["centric", "tempfusion", "popularity", "mf", "full", "st", "lt", "nots", "dp"].map(String::from)));

    let report = std::fs::read_to_string(dir.path().join("first/report.csv")).unwrap();
    let mut rows = report.lines();
    assert_eq!(rows.next().unwrap(), "variant,metric,K,value,p_value_vs_centric");
    let mut variants: Vec<&str> = Vec::new();
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        if variants.last() != Some(&cols[0]) {
            variants.push(cols[0]);
        }
        // Every non-centric row carries a p-value against centric.
        assert_eq!(cols[4].is_empty(), cols[0] == "centric", "{row}");
    }
    assert_eq!(variants, ["centric", "tempfusion", "popularity", "mf", "full", "st", "lt", "nots", "dp"]);

    for f in ["report.csv", "report_per_user.csv", "attention.csv"] {
        let a = std::fs::read(dir.path().join("first").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("second").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    let echoed: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("first/config.json")).unwrap()).unwrap();
    assert_eq!(echoed["seed"], 3);
    assert_eq!(echoed["dim"], 16);
}

#[test]
fn synth_prints_a_config_that_reads_from_stdin() {
    let dir = tempfile::tempdir().unwrap();
    let printed = ok(&tup(&["synth", "--seed", "5", "--n-users", "20"]));
    let cfg: Value = serde_json::from_str(&printed).unwrap();
    assert_eq!(cfg["seed"], 5);
    assert_eq!(cfg["synth"]["seed"], 5);
    assert_eq!(cfg["dim"], 32);
    let out = dir.path().join("piped");
    let stats = last_json(&ok(&tup_stdin(&["stats", "--config", "-", "--out", out.to_str().unwrap()], printed.as_bytes())));
    assert_eq!(stats["n_users"], 20);

    let data = dir.path().join("data");
    let printed = ok(&tup(&["synth", "--seed", "5", "--n-users", "20", "--data", data.to_str().unwrap()]));
    let cfg: Value = serde_json::from_str(&printed).unwrap();
    assert!(cfg["synth"].is_null());
    assert!(data.join("interactions.jsonl").exists() && data.join("catalog.jsonl").exists());
    let from_files = last_json(&ok(&tup_stdin(&["stats", "--config", "-", "--out", out.to_str().unwrap()], printed.as_bytes())));
    assert_eq!(from_files, stats);
}

fn recall10(report: &str, variant: &str) -> f64 {
    report
        .lines()
        .map(|l| l.split(',').collect::<Vec<_>>())
        .find(|c| c[0] == variant && c[1] == "recall" && c[2] == "10")
        .map(|c| c[3].parse().unwrap())
        .unwrap()
}

fn reference_flow(dir: &Path, name: &str, drift_strength: &str) -> String {
    let printed = ok(&tup(&["synth", "--seed", "7", "--drift-strength", drift_strength]));
    let out = dir.join(name);
    ok(&tup_stdin(
        &[
            "ablate",
            "--config",
            "-",
            "--out",
            out.to_str().unwrap(),
            "--variants",
            "centric,tempfusion,full",
            "--no-reference",
        ],
        printed.as_bytes(),
    ));
    std::fs::read_to_string(out.join("report.csv")).unwrap()
}

#[test]
fn reference_flow_reproduces_the_drift_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let drift = reference_flow(dir.path(), "drift", "0.9");
    let (centric, tf, full) = (recall10(&drift, "centric"), recall10(&drift, "tempfusion"), recall10(&drift, "full"));
    // Reported with six significant digits.
    assert_eq!((centric, tf, full), (0.245054, 0.413881, 0.33281));
    assert!(full >= 1.15 * centric && tf >= 1.15 * centric);

    let flat = reference_flow(dir.path(), "flat", "0");
    assert!((recall10(&flat, "full") - recall10(&flat, "centric")).abs() <= 0.02);
}
