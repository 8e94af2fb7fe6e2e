use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use felo::cli::{parse_config, METRICS_HEADER};

const SMALL: &str = "[experiment]\nrounds = 3\n[data]\nn_per_class = 30\ntest_per_class = 10\n";

fn felo(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_felo"))
        .args(args)
        .current_dir(dir)
        .env_remove("FELO_SEED")
        .output()
        .expect("spawn felo")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_config_exits_one_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = felo(&["run", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
}

#[test]
fn unreadable_config_and_bad_keys_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = felo(&["run", "--config", "nope.toml", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    fs::write(
        dir.path().join("c.toml"),
        "[experiment]\nlearning_rate = 0.1\n",
    )
    .unwrap();
    let out = felo(&["run", "--config", "c.toml", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains("experiment.learning_rate"),
        "{}",
        stderr(&out)
    );
    fs::write(
        dir.path().join("c.toml"),
        "[experiment]\nstrategy = \"fedavg\"\n",
    )
    .unwrap();
    let out = felo(&["run", "--config", "c.toml", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let msg = stderr(&out);
    assert!(
        msg.contains("experiment.strategy") && msg.contains("model.homogeneous"),
        "{msg}"
    );
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "").unwrap();
    let out = felo(&["inspect", "--checkpoint", "missing.ckpt"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    fs::write(dir.path().join("bad.ckpt"), b"NOPE0000").unwrap();
    let out = felo(&["inspect", "--checkpoint", "bad.ckpt"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("offset 0"), "{}", stderr(&out));
}

#[test]
fn run_is_deterministic_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    for out_dir in ["a", "b"] {
        let out = felo(
            &[
                "run",
                "--config",
                "c.toml",
                "--out",
                out_dir,
                "--set",
                "experiment.strategy=velo",
            ],
            dir.path(),
        );
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    let a = fs::read(dir.path().join("a/metrics.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/metrics.csv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 1 + 3 * 11);
    assert!(lines.iter().all(|l| l.split(',').count() == 10));
    assert!(lines[11].starts_with("0,-1,-1,"));
    assert!(dir.path().join("a/cvae_losses.csv").exists());
    assert!(dir.path().join("a/checkpoints/round-0003.ckpt").exists());

    let resolved = parse_config(dir.path().join("a/config.resolved"), &[]).unwrap();
    assert_eq!(resolved.experiment.rounds, 3);
    assert_eq!(resolved.experiment.strategy, felo::Strategy::Velo);

    let out = felo(
        &["inspect", "--checkpoint", "a/checkpoints/round-0003.ckpt"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let shown = String::from_utf8_lossy(&out.stdout);
    assert!(shown.starts_with("round 3\nseed 0\n"), "{shown}");
    assert!(
        shown.contains("client.0.extractor.0.weight [32, 32]"),
        "{shown}"
    );
    assert!(shown.contains("cvae.encoder.0.weight"), "{shown}");
}

#[test]
fn resume_continues_the_run() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.toml"),
        SMALL.replace("rounds = 3", "rounds = 4"),
    )
    .unwrap();
    let out = felo(
        &[
            "run",
            "--config",
            "c.toml",
            "--out",
            "full",
            "--checkpoint-every",
            "2",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let out = felo(
        &[
            "run",
            "--config",
            "c.toml",
            "--out",
            "rest",
            "--resume",
            "full/checkpoints/round-0002.ckpt",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let full = fs::read_to_string(dir.path().join("full/metrics.csv")).unwrap();
    let rest = fs::read_to_string(dir.path().join("rest/metrics.csv")).unwrap();
    let tail: Vec<&str> = full
        .lines()
        .filter(|l| l.starts_with("2,") || l.starts_with("3,"))
        .collect();
    assert_eq!(rest.lines().skip(1).collect::<Vec<_>>(), tail);
}

#[test]
fn seed_precedence_cli_then_file_then_env() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    fs::write(
        dir.path().join("s.toml"),
        SMALL.replace("rounds = 3", "rounds = 3\nseed = 4"),
    )
    .unwrap();
    let run = |cfg: &str, extra: &[&str], env: Option<&str>, out: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_felo"));
        cmd.args(["run", "--config", cfg, "--out", out])
            .args(extra)
            .current_dir(dir.path());
        match env {
            Some(v) => cmd.env("FELO_SEED", v),
            None => cmd.env_remove("FELO_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
        parse_config(dir.path().join(out).join("config.resolved"), &[])
            .unwrap()
            .experiment
            .seed
    };
    assert_eq!(run("c.toml", &[], Some("9"), "e"), 9);
    assert_eq!(run("s.toml", &[], Some("9"), "f"), 4);
    assert_eq!(
        run("s.toml", &["--set", "experiment.seed=2"], Some("9"), "g"),
        2
    );
}

#[test]
fn gen_data_then_run_on_idx_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = felo(
        &[
            "gen-data",
            "--out",
            "data",
            "--set",
            "data.n_per_class=30",
            "--set",
            "data.test_per_class=10",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let cfg = "[experiment]\nrounds = 2\n[data]\nsource = \"idx\"\n\
        train_images = \"data/train-images.idx\"\ntrain_labels = \"data/train-labels.idx\"\n\
        test_images = \"data/test-images.idx\"\ntest_labels = \"data/test-labels.idx\"\n";
    fs::write(dir.path().join("idx.toml"), cfg).unwrap();
    let out = felo(&["run", "--config", "idx.toml", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let metrics = fs::read_to_string(dir.path().join("o/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2 * 11);
    let ds = felo::data::load_idx(
        dir.path().join("data/train-images.idx"),
        dir.path().join("data/train-labels.idx"),
    )
    .unwrap();
    assert_eq!((ds.len(), ds.d_in(), ds.n_classes()), (300, 32, 10));
}
