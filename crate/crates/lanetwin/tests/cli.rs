use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lanetwin::manifest::RunManifest;
use lanetwin::report::MetricsFile;

fn lanetwin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lanetwin"))
        .args(args)
        .env_remove("LANETWIN_DETERMINISTIC")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = lanetwin(args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], code: i32) -> String {
    let out = lanetwin(args);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("sim{seed}"));
    ok(&[
        "simulate",
        "--scenarios",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        s(&out),
    ]);
    out
}

#[test]
fn simulate_is_reproducible_and_jobs_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["simulate", "--scenarios", "6", "--seed", "5", "--out", s(&a)]);
    ok(&["--jobs", "3", "simulate", "--scenarios", "6", "--seed", "5", "--out", s(&b)]);
    for f in ["records.jsonl", "topologies.json", "corpus.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let m = RunManifest::read(&a).unwrap();
    assert_eq!(m.command, "simulate");
    assert_eq!(m.seed, 5);
    assert!(m.artifacts.contains(&"records.jsonl".to_string()));
    assert_eq!(RunManifest::read(&b).unwrap().jobs, 3);
}

#[test]
fn graphs_reports_template_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), 4, 1);
    let rec = sim.join("records.jsonl");
    let exit = ok(&["graphs", "--in", s(&rec), "--kind", "exit", "--out", s(&dir.path().join("ge"))]);
    assert!(exit.contains("4 graphs: 33 nodes, 22 edges (0 pillar), edge features 29"), "{exit}");
    let inflow = ok(&["graphs", "--in", s(&rec), "--kind", "inflow", "--out", s(&dir.path().join("gi"))]);
    assert!(inflow.contains("4 graphs: 36 nodes, 180 edges (108 pillar), edge features 29"), "{inflow}");
}

#[test]
fn bad_inputs_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.json");
    let err = fails(
        &["simulate", "--scenarios", "2", "--topology", s(&missing), "--out", s(&dir.path().join("o"))],
        2,
    );
    assert!(err.contains("nowhere.json"), "{err}");

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let topo = dir.path().join("t.json");
    let sim = simulate(dir.path(), 1, 2);
    std::fs::copy(sim.join("topologies.json"), &topo).unwrap();
    fails(
        &["graphs", "--in", s(&empty), "--kind", "exit", "--topology", s(&topo), "--out", s(&dir.path().join("g"))],
        2,
    );

    fails(&["train", "--data", s(&dir.path().join("none.jsonl")), "--out", s(&dir.path().join("t"))], 2);
    fails(&["train", "--variant", "gatconv-huge", "--data", "x", "--out", "y"], 2);
    fails(&["simulate", "--out", s(&dir.path().join("o"))], 2);
}

#[test]
fn training_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), 12, 3);
    let data = dir.path().join("graphs");
    ok(&["graphs", "--in", s(&sim.join("records.jsonl")), "--kind", "exit", "--out", s(&data)]);
    let data = data.join("graphs.jsonl");

    let run = dir.path().join("run");
    let msg = ok(&[
        "train",
        "--data",
        s(&data),
        "--variant",
        "gatconv-ablated",
        "--hidden",
        "8",
        "--epochs",
        "2",
        "--batch-size",
        "4",
        "--out",
        s(&run),
    ]);
    assert!(msg.starts_with("gatconv-ablated"), "{msg}");
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["self_attention_parameters"], 0);
    assert!(!summary["arrays"].as_array().unwrap().iter().any(|a| a[0].as_str().unwrap().starts_with("attn")));
    let ckpt = run.join("model.ckpt");

    let eval = dir.path().join("eval");
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--split", "all", "--out", s(&eval)]);
    let m: MetricsFile = serde_json::from_str(&std::fs::read_to_string(eval.join("metrics.json")).unwrap()).unwrap();
    let secs: Vec<u32> = m.metrics.aggregations.iter().map(|a| a.seconds).collect();
    assert_eq!(secs, [5, 10, 15, 20]);
    assert_eq!(m.metrics.ci95, 1.96 * m.metrics.aggregations[0].rmse);
    assert!(m.baselines.is_some());

    let truth = dir.path().join("truth");
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--predictor", "truth", "--split", "all", "--out", s(&truth)]);
    let t: MetricsFile = serde_json::from_str(&std::fs::read_to_string(truth.join("metrics.json")).unwrap()).unwrap();
    assert!(t.metrics.aggregations.iter().all(|a| a.mae == 0.0 && a.rmse == 0.0));

    let ex = dir.path().join("explain");
    ok(&["explain", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&ex)]);
    let latents = std::fs::read_to_string(ex.join("latents.csv")).unwrap();
    assert!(latents.starts_with("graph,intersection,node,group,pc1,pc2,z0"));
    let ranking = std::fs::read_to_string(ex.join("attribution.csv")).unwrap();
    assert!(ranking.starts_with("rank,feature,coefficient,mean_abs_shap"));
    for d in [&run, &eval, &truth, &ex] {
        assert!(d.join("manifest.json").exists());
    }

    let inflow = dir.path().join("gi");
    ok(&["graphs", "--in", s(&sim.join("records.jsonl")), "--kind", "inflow", "--out", s(&inflow)]);
    let err = fails(&["eval", "--checkpoint", s(&ckpt), "--data", s(&inflow.join("graphs.jsonl")), "--out", s(&eval)], 2);
    assert!(err.contains("Inflow"), "{err}");
}

#[test]
fn training_is_jobs_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), 6, 4);
    let data = dir.path().join("graphs");
    ok(&["graphs", "--in", s(&sim.join("records.jsonl")), "--kind", "exit", "--out", s(&data)]);
    let data = data.join("graphs.jsonl");
    let args = |out: &Path, jobs: &'static str| {
        let out = out.to_str().unwrap().to_string();
        let data = s(&data).to_string();
        vec![
            "--jobs".to_string(),
            jobs.into(),
            "train".into(),
            "--data".into(),
            data,
            "--hidden".into(),
            "6".into(),
            "--max-steps".into(),
            "3".into(),
            "--batch-size".into(),
            "3".into(),
            "--out".into(),
            out,
        ]
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&args(&a, "1").iter().map(String::as_str).collect::<Vec<_>>());
    ok(&args(&b, "3").iter().map(String::as_str).collect::<Vec<_>>());
    for f in ["model.ckpt", "steps.csv", "history.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn deterministic_env_forces_one_worker() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let run = Command::new(env!("CARGO_BIN_EXE_lanetwin"))
        .args(["--jobs", "4", "simulate", "--scenarios", "1", "--out", s(&out)])
        .env("LANETWIN_DETERMINISTIC", "1")
        .output()
        .unwrap();
    assert!(run.status.success());
    let m = RunManifest::read(&out).unwrap();
    assert!(m.deterministic);
    assert_eq!(m.jobs, 1);
}

#[test]
fn gradcheck_command_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--out", s(dir.path())]);
    assert!(!out.contains("FAIL"), "{out}");
    assert!(out.lines().any(|l| l.starts_with("ok") && l.contains("gat")), "{out}");
    assert!(dir.path().join("gradcheck.json").exists());
}
