use std::path::Path;
use std::process::Command;

fn dsrl(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_dsrl")).args(args).output().expect("spawn dsrl");
    assert!(
        out.status.success(),
        "dsrl {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn metrics(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("epoch,agent_id,avg_score,pct_positive,encountered"));
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn render_sample_writes_pgm_frames() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    dsrl(&["render-sample", "--variant", "grid-mixed", "--frames", "3", "--out", out]);
    for i in 0..3 {
        let bytes = std::fs::read(dir.path().join(format!("grid-mixed_{i:03}.pgm"))).unwrap();
        assert!(bytes.starts_with(b"P5\n50 50\n255\n"));
        assert_eq!(bytes.len(), b"P5\n50 50\n255\n".len() + 2500);
    }
}

#[test]
fn random_agents_train_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let args = ["--variant", "random-mixed", "--agents", "2", "--epochs", "20", "--seed", "7", "--out", out];
    dsrl(&[&["train", "--agent", "random"][..], &args].concat());
    let rows = metrics(&dir.path().join("metrics.csv"));
    // Evaluations at epochs 0, 10 and 20 for each agent.
    assert_eq!(rows.len(), 6);
    for r in &rows {
        let pct: f64 = r[3].parse().unwrap();
        assert!((0.0..=100.0).contains(&pct));
        assert!(r[4].parse::<usize>().unwrap() > 0);
    }
    assert!(dir.path().join("config.toml").exists());

    dsrl(&["eval", "--out", out]);
    assert_eq!(metrics(&dir.path().join("eval.csv")).len(), 2);
}

#[test]
fn runs_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        dsrl(&[
            "train", "--agent", "random", "--variant", "random-neg", "--agents", "1", "--epochs", "10", "--seed", "3",
            "--out", d.path().to_str().unwrap(),
        ]);
    }
    let read = |d: &tempfile::TempDir| std::fs::read_to_string(d.path().join("metrics.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn baseline_saves_a_network() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "test_games = 2\ntest_steps = 20\n\n[dqn]\nlearning_starts = 50\nreplay_capacity = 500\n").unwrap();
    let out = dir.path().join("run");
    dsrl(&[
        "baseline", "--variant", "grid-mixed", "--agents", "1", "--epochs", "3", "--config",
        cfg.to_str().unwrap(), "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(metrics(&out.join("metrics.csv")).len(), 1);
    assert!(out.join("agents/agent_00/qnet.bin").exists());
}

#[test]
fn config_file_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "epoch = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dsrl"))
        .args(["train", "--agent", "random", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn unknown_variant_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_dsrl"))
        .args(["render-sample", "--variant", "hex-mixed"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
