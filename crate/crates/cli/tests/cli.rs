use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use sphere_distill::data::{gen_blobs, gen_shapes, ingest_csv, CsvSchema};

const SMALL: &[&str] = &[
    "--n_per_class",
    "64",
    "--blob_dim",
    "8",
    "--enc_units",
    "16",
    "--repr_dim",
    "8",
    "--h_units",
    "16",
    "--o_units",
    "4",
    "--batch_size",
    "32",
    "--ft_epochs",
    "5",
    "--epochs",
    "2",
];

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sphere-distill"))
        .current_dir(dir)
        .env_remove("SPHERE_DISTILL_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok_json(dir: &Path, args: &[&str]) -> Value {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn train_small(dir: &Path, out: &str, extra: &[&str]) -> Value {
    let mut args = vec!["train", "--out", out];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok_json(dir, &args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn oracle_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let r = ok_json(
        tmp.path(),
        &["oracle", "thomson", "--n", "2", "--d", "2", "--s", "2"],
    );
    assert!(r["values"]["min_dot"].as_f64().unwrap() <= -1.0 + 1e-4);
    assert_eq!(r["method"], "thomson/euclidean");
    let r = ok_json(
        tmp.path(),
        &["oracle", "thomson", "--n", "4", "--d", "2", "--s", "a2"],
    );
    assert!((r["values"]["max_dot"].as_f64().unwrap() + 1.0 / 3.0).abs() < 1e-2);

    let r = ok_json(
        tmp.path(),
        &["oracle", "mc-uniformity", "--d", "2", "--t", "2"],
    );
    assert!((r["values"]["uniformity"].as_f64().unwrap() + 1.575).abs() < 0.01);
    assert_eq!(r["seed"], 0);

    let r = ok_json(tmp.path(), &["oracle", "finite-diff", "--target", "byol"]);
    assert!(r["values"]["max_rel_err"].as_f64().unwrap() < 1e-4);

    let r = ok_json(
        tmp.path(),
        &[
            "oracle",
            "bruteforce",
            "--kind",
            "energy_angular",
            "--n",
            "64",
            "--d",
            "3",
        ],
    );
    assert!(r["values"]["abs_diff"].as_f64().unwrap() < 1e-9);

    let out = run(tmp.path(), &["oracle", "nope"]);
    assert_eq!(out.status.code(), Some(1));
    let msg = stderr(&out);
    for name in ["thomson", "mc-uniformity", "finite-diff", "bruteforce"] {
        assert!(msg.contains(name), "{msg}");
    }
}

#[test]
fn gen_data_reingests_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    let r = ok_json(
        p,
        &[
            "gen-data",
            "blobs",
            "--out",
            "a.csv",
            "--n",
            "60",
            "--classes",
            "3",
            "--dim",
            "5",
        ],
    );
    assert_eq!(r["rows"], 60);
    ok_json(
        p,
        &[
            "gen-data",
            "blobs",
            "--out",
            "b.csv",
            "--n",
            "60",
            "--classes",
            "3",
            "--dim",
            "5",
        ],
    );
    let a = std::fs::read(p.join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read(p.join("b.csv")).unwrap());
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 61);

    let back = ingest_csv(&p.join("a.csv"), &CsvSchema::vector(5)).unwrap();
    assert_eq!(back.samples.len(), 60);
    let orig = gen_blobs(3, 5, 20, 0.05, 0).unwrap();
    for (x, y) in orig.samples.iter().zip(&back.samples) {
        assert_eq!(x.payload, y.payload);
        assert_eq!(x.label, y.label);
    }
    let stats: Value =
        serde_json::from_slice(&std::fs::read(p.join("a.stats.json")).unwrap()).unwrap();
    assert_eq!(stats["config"]["csv_layout"], "vector");
    assert_eq!(stats["class_counts"], serde_json::json!([20, 20, 20]));

    ok_json(
        p,
        &[
            "gen-data", "shapes", "--out", "s.csv", "--n", "12", "--size", "12",
        ],
    );
    let back = ingest_csv(&p.join("s.csv"), &CsvSchema::image(12, 12, 1)).unwrap();
    let orig = gen_shapes(12, 12, 0).unwrap();
    assert_eq!(back.samples.len(), 12);
    for (x, y) in orig.samples.iter().zip(&back.samples) {
        assert_eq!(x.payload, y.payload);
    }
    assert_eq!(
        run(p, &["gen-data", "moons", "--out", "m.csv"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn train_writes_run_dir_and_replays() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    let report = train_small(p, "run", &[]);
    assert_eq!(report["status"], "completed");
    for f in [
        "config.resolved.json",
        "metrics.jsonl",
        "report.json",
        "checkpoints/final.ckpt",
    ] {
        assert!(p.join("run").join(f).is_file(), "{f}");
    }
    assert!(p.join("run/checkpoints/epoch_0001.ckpt").is_file());

    // the resolved config alone reproduces the run
    let out = run(
        p,
        &[
            "train",
            "--out",
            "replay",
            "--config",
            "run/config.resolved.json",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let a = std::fs::read(p.join("run/metrics.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(p.join("replay/metrics.jsonl")).unwrap());
    assert_eq!(
        std::fs::read(p.join("run/checkpoints/final.ckpt")).unwrap(),
        std::fs::read(p.join("replay/checkpoints/final.ckpt")).unwrap()
    );
}

#[test]
fn resume_reproduces_metrics_tail() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    train_small(p, "full", &["--epochs", "3"]);
    let mut args = vec!["train", "--out", "half", "--stop-after-epoch", "1"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--epochs", "3"]);
    assert_eq!(ok_json(p, &args)["status"], "interrupted");
    let mut args = vec!["train", "--out", "half", "--resume", "latest"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--epochs", "3"]);
    ok_json(p, &args);
    let read = |f: &str| std::fs::read(p.join(f)).unwrap();
    assert_eq!(read("full/metrics.jsonl"), read("half/metrics.jsonl"));
    assert_eq!(
        read("full/checkpoints/final.ckpt"),
        read("half/checkpoints/final.ckpt")
    );
}

#[test]
fn zero_reg_weight_logs_zero_mhe() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    train_small(
        p,
        "run",
        &[
            "--objective",
            "byol_mhe",
            "--proj_reg",
            "mhe",
            "--reg_weight",
            "0",
        ],
    );
    let text = std::fs::read_to_string(p.join("run/metrics.jsonl")).unwrap();
    assert!(text.lines().count() > 0);
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["loss_mhe"].as_f64(), Some(0.0), "{line}");
    }
}

#[test]
fn eval_and_diagnose() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    train_small(p, "run", &[]);
    let ckpt = "run/checkpoints/final.ckpt";
    for mode in ["linear", "knn"] {
        let r = ok_json(p, &["eval", "--checkpoint", ckpt, "--mode", mode]);
        assert_eq!(r["top1"].as_f64(), Some(100.0), "{mode}: {r}");
        assert_eq!(
            r,
            ok_json(p, &["eval", "--checkpoint", ckpt, "--mode", mode])
        );
    }

    let r = ok_json(p, &["diagnose", "--checkpoint", ckpt, "--svg"]);
    assert_eq!(r["collapsed"], false);
    let d = p.join("run/diagnose");
    let report: Value =
        serde_json::from_slice(&std::fs::read(d.join("report.json")).unwrap()).unwrap();
    for k in ["feature_std", "g2", "uniformity", "repr_energy"] {
        assert!(report[k].as_f64().unwrap().is_finite(), "{k}");
    }
    let layers = std::fs::read_to_string(d.join("layer_energy.csv")).unwrap();
    let tracked = report["neuron_energy"].as_array().unwrap().len()
        + report["layer_repr_energy"].as_array().unwrap().len();
    assert_eq!(layers.lines().count(), tracked + 1);
    assert_eq!(
        std::fs::read_to_string(d.join("kde_circle.csv"))
            .unwrap()
            .lines()
            .count(),
        361
    );
    assert!(std::fs::read_to_string(d.join("kde_plane.csv"))
        .unwrap()
        .starts_with("x,y,density"));
    for f in ["kde_circle.svg", "kde_plane.svg", "layer_energy.svg"] {
        assert!(
            std::fs::read_to_string(d.join(f))
                .unwrap()
                .starts_with("<svg"),
            "{f}"
        );
    }

    std::fs::write(p.join("bad.ckpt"), b"SDCKPT01garbage").unwrap();
    let out = run(
        p,
        &[
            "eval",
            "--checkpoint",
            "bad.ckpt",
            "--config",
            "run/config.resolved.json",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("header field"), "{}", stderr(&out));
    let out = run(p, &["eval", "--checkpoint", "missing.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn collapsed_debug_checkpoint_is_flagged() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    let args = [
        "train",
        "--out",
        "dbg",
        "--stop-after-epoch",
        "42",
        "--lars_trust",
        "0.085",
        "--batch_size",
        "64",
        "--warmup_epochs",
        "1",
        "--epochs",
        "167",
        "--disable_predictor",
        "true",
        "--disable_stop_gradient",
        "true",
    ];
    assert_eq!(ok_json(p, &args)["status"], "interrupted");
    let r = ok_json(
        p,
        &[
            "diagnose",
            "--checkpoint",
            "dbg/checkpoints/epoch_0042.ckpt",
        ],
    );
    assert_eq!(r["collapsed"], true, "{r}");
}

#[test]
fn sweep_presets_and_grids() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    for (preset, rows) in [("paper-lambda", 5), ("paper-power", 6)] {
        let mut args = vec!["sweep", "--out", preset, "--preset", preset];
        args.extend_from_slice(SMALL);
        args.extend_from_slice(&["--epochs", "1"]);
        let out = run(p, &args);
        assert!(out.status.success(), "{}", stderr(&out));
        let csv = std::fs::read_to_string(p.join(preset).join("summary.csv")).unwrap();
        assert_eq!(csv.lines().count(), rows + 1, "{csv}");
        assert!(csv.lines().skip(1).all(|l| l.contains(",completed,")));
    }
    let mut args = vec![
        "sweep",
        "--out",
        "g",
        "--grid",
        "seed=0,1",
        "--grid",
        "tau=0.9,0.99",
    ];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--epochs", "1"]);
    assert!(run(p, &args).status.success());
    let csv = std::fs::read_to_string(p.join("g/summary.csv")).unwrap();
    assert!(csv.starts_with("seed,tau,status"));
    assert_eq!(csv.lines().count(), 5);

    assert_eq!(run(p, &["sweep", "--out", "e"]).status.code(), Some(1));
    assert_eq!(
        run(p, &["sweep", "--out", "e", "--grid", "seed="])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        run(p, &["sweep", "--out", "e", "--grid", "nokey=1"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn config_errors_and_seed_env() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    let out = run(p, &["train", "--out", "x", "--bogus", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("bogus"));
    let out = run(p, &["train", "--out", "x", "--proj_pow", "a7"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("proj_pow"));
    let out = run(
        p,
        &[
            "train",
            "--out",
            "x",
            "--epochs",
            "1",
            "--stop-after-epoch",
            "1",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("before the overrides"));
    assert_eq!(run(p, &["frobnicate"]).status.code(), Some(1));

    let out = Command::new(env!("CARGO_BIN_EXE_sphere-distill"))
        .current_dir(p)
        .env("SPHERE_DISTILL_SEED", "7")
        .args(["train", "--print-config", "--seed", "3"])
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&out.stdout)
        .lines()
        .any(|l| l == "seed=7"));
}

#[test]
fn divergence_exits_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    let mut args = vec!["train", "--out", "div"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--learning_rate", "1e300"]);
    let out = run(p, &args);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let report: Value =
        serde_json::from_slice(&std::fs::read(p.join("div/report.json")).unwrap()).unwrap();
    assert_eq!(report["status"], "diverged");
}
