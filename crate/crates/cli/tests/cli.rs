use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fcheck(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fcheck"))
        .args(args)
        .env_remove("FCHECK_CONFIG")
        .env_remove("FCHECK_BACKEND_URL")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn mini_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mini")
}

/// The bundled mini config rewritten to write into `dir`.
fn temp_config(dir: &Path, mode: &str) -> PathBuf {
    let text = std::fs::read_to_string(mini_dir().join("tbe3.toml")).unwrap();
    let corpus = mini_dir().join("corpus.jsonl");
    let text = text
        .replace("mode = \"TBE-3\"", &format!("mode = \"{mode}\""))
        .replace("output_dir = \"../../runs\"", "output_dir = \"runs\"")
        .replace("path = \"corpus.jsonl\"", &format!("path = {:?}", corpus.to_str().unwrap()));
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn run_id_from(out: &str) -> String {
    out.lines()
        .find_map(|l| l.strip_prefix("run "))
        .expect("run id line")
        .trim()
        .to_string()
}

#[test]
fn ingest_reports_split_sizes() {
    let o = fcheck(&["ingest", mini_dir().join("corpus.jsonl").to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("records 30  train 18  val 6  test 6"));

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("copy.jsonl");
    let o = fcheck(&[
        "ingest",
        mini_dir().join("corpus.jsonl").to_str().unwrap(),
        "--scheme",
        "raw-fc",
        "--json",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["test"], 6);
    assert_eq!(std::fs::read_to_string(dir.path().join("copy.jsonl.scheme")).unwrap().trim(), "raw-fc");
}

#[test]
fn run_report_segment_and_explain() {
    let dir = tempfile::tempdir().unwrap();
    let config = temp_config(dir.path(), "IBE-4");
    let cfg = config.to_str().unwrap();
    let o = fcheck(&["--config", cfg, "run"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run_id = run_id_from(&stdout(&o));
    assert!(run_id.starts_with("ibe-4-full-"));

    let o = fcheck(&["--config", cfg, "report", &run_id]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("MF1"));

    let runs = dir.path().join("runs");
    let o = fcheck(&["--runs-dir", runs.to_str().unwrap(), "segment", &run_id]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("0–3"));

    let gold = dir.path().join("gold.jsonl");
    let lines: String = ["mini-04", "mini-09", "mini-14", "mini-19", "mini-24", "mini-29"]
        .iter()
        .map(|id| format!("{{\"claim_id\":\"{id}\",\"explanation\":\"the figures were accurate\"}}\n"))
        .collect();
    std::fs::write(&gold, lines).unwrap();
    let o = fcheck(&[
        "--runs-dir",
        runs.to_str().unwrap(),
        "explain-eval",
        &run_id,
        "--gold",
        gold.to_str().unwrap(),
        "--mock-embed",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("6 explanations"));
}

#[test]
fn stage_verbs_chain() {
    let dir = tempfile::tempdir().unwrap();
    let config = temp_config(dir.path(), "TBE-3");
    let cfg = config.to_str().unwrap();
    let parts = dir.path().join("p.jsonl");
    let pairs = dir.path().join("j.jsonl");
    let o = fcheck(&["--config", cfg, "stage1", "--split", "val", "--out", parts.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("6 partitions"));
    let o = fcheck(&[
        "--config",
        cfg,
        "stage2",
        "--partitions",
        parts.to_str().unwrap(),
        "--out",
        pairs.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(&pairs).unwrap().lines().count(), 6);
}

#[test]
fn ablate_prints_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let config = temp_config(dir.path(), "TBE-3");
    let o = fcheck(&["--config", config.to_str().unwrap(), "ablate"]);
    assert!(o.status.success());
    let out = stdout(&o);
    for a in ["full", "wo-supporting", "wo-refuting", "wo-both"] {
        assert!(out.lines().any(|l| l.starts_with(a)), "{a}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    // config errors
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "mode = \"TBE-9\"\n").unwrap();
    assert_eq!(fcheck(&["--config", bad.to_str().unwrap(), "run"]).status.code(), Some(2));
    assert_eq!(fcheck(&["run"]).status.code(), Some(2));
    let config = temp_config(dir.path(), "IBE-1");
    let text = std::fs::read_to_string(&config).unwrap();
    let ablated = dir.path().join("ablated.toml");
    std::fs::write(&ablated, text.replacen("seeds", "ablation = \"wo-both\"\nseeds", 1)).unwrap();
    assert_eq!(fcheck(&["--config", ablated.to_str().unwrap(), "run"]).status.code(), Some(2));

    // data errors
    assert_eq!(fcheck(&["ingest", dir.path().join("nope.jsonl").to_str().unwrap()]).status.code(), Some(4));
    assert_eq!(
        fcheck(&["--runs-dir", dir.path().to_str().unwrap(), "report", "missing"]).status.code(),
        Some(4)
    );

    // backend errors: an http backend pointed at a closed port
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let http = dir.path().join("http.toml");
    std::fs::write(
        &http,
        format!(
            "mode = \"IBE-1\"\nseeds = [1]\noutput_dir = \"runs\"\n[corpus]\npath = {:?}\n[backend]\nkind = \"http\"\nmodel_name = \"m\"\nurl = \"http://127.0.0.1:{port}/v1/chat/completions\"\n",
            mini_dir().join("corpus.jsonl").to_str().unwrap()
        ),
    )
    .unwrap();
    let o = fcheck(&["--config", http.to_str().unwrap(), "run"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
