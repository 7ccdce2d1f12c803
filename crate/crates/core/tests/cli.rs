use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_pdsr");

fn pdsr(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("PDSR_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{
  "model": {"go_blocks": 1, "gp_blocks": 1, "channels": 4, "scale": 2, "disc_channels": 2, "seed": 3},
  "admm": {"batch_size": 2, "pretrain_epochs": 1, "admm_rounds": 1, "seed": 3,
           "pretrain_lr": [[0, 0.001]], "lr": [[0, 0.001]]},
  "cx": {"patch_size": 3, "patch_stride": 3, "feature_dim": 8},
  "data": {"patches": 4, "patch_seed": 3}
}"#;

/// A prepared x2 corpus plus a config pointing at it.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    ok(&pdsr(&["synth", "--out-dir", s(&root.join("hr")), "--count", "3", "--size", "32", "--seed", "5"]));
    let data = root.join("data");
    ok(&pdsr(&[
        "prepare",
        "--hr-dir",
        s(&root.join("hr")),
        "--out-dir",
        s(&data),
        "--scale",
        "2",
        "--patch-size-lr",
        "8",
    ]));
    let mut cfg: serde_json::Value = serde_json::from_str(TINY).unwrap();
    cfg["data"]["train"] = s(&data).into();
    cfg["data"]["val"] = s(&data).into();
    let config = root.join("tiny.json");
    fs::write(&config, cfg.to_string()).unwrap();
    Fixture {
        _dir: dir,
        root,
        data,
        config,
    }
}

fn train(f: &Fixture, name: &str, extra: &[&str]) -> (PathBuf, Output) {
    let out = f.root.join(name);
    let mut args = vec!["train", "--config", s(&f.config), "--out", s(&out)];
    args.extend_from_slice(extra);
    let o = pdsr(&args);
    (out, o)
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().into(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn prepare_is_idempotent_and_reports_missing_dirs() {
    let f = fixture();
    let before = files(&f.data);
    ok(&pdsr(&["prepare", "--hr-dir", s(&f.root.join("hr")), "--out-dir", s(&f.data), "--scale", "2", "--patch-size-lr", "8"]));
    assert_eq!(files(&f.data), before);

    let missing = f.root.join("nope");
    let o = pdsr(&["prepare", "--hr-dir", s(&missing), "--out-dir", s(&f.data)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains(s(&missing)));
}

#[test]
fn config_errors_exit_with_two() {
    let f = fixture();
    let (_, o) = train(&f, "bad", &["--set", "admm.rh0=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("rh0"));
    let bad = f.root.join("bad.json");
    fs::write(&bad, r#"{"admm": {"unknown": 1}}"#).unwrap();
    let o = pdsr(&["train", "--config", s(&bad), "--out", s(&f.root.join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = pdsr(&["train", "--bogus-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let f = fixture();
    let o = pdsr(&["eval", "--checkpoint", s(&f.root.join("none.ckpt")), "--manifest", s(&f.data), "--out", s(&f.root.join("e"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn divergence_exits_with_one_and_names_the_snapshot() {
    let f = fixture();
    let (_, o) = train(&f, "div", &["--set", "admm.divergence_limit=1e-12"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("diverged") && err.contains("snapshot"), "{err}");
}

#[test]
fn train_writes_resolved_config_checkpoint_and_report() {
    let f = fixture();
    let (out, o) = train(&f, "run", &["--set", "admm.admm_rounds=0"]);
    let stdout = ok(&o);
    assert!(stdout.contains("\"rho\": 0.0001"));
    let resolved = fs::read_to_string(out.join("config.resolved.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&resolved).unwrap();
    assert_eq!(parsed["admm"]["admm_rounds"], 0);
    assert_eq!(parsed["weights"]["lambda_cx"], 0.1);
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 2);
    assert!(out.join("checkpoint.ckpt").is_file());
}

#[test]
fn seed_environment_variable_overrides_the_config() {
    let f = fixture();
    let out = f.root.join("seeded");
    let o = Command::new(BIN)
        .args(["train", "--config", s(&f.config), "--out", s(&out), "--set", "admm.admm_rounds=0"])
        .env("PDSR_SEED", "77")
        .output()
        .unwrap();
    ok(&o);
    let parsed: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(parsed["model"]["seed"], 77);
    assert_eq!(parsed["admm"]["seed"], 77);
}

#[test]
fn modes_and_ablations_complete() {
    let f = fixture();
    let (base, o) = train(&f, "base", &["--mode", "baseline", "--set", "weights.lambda_r=1"]);
    ok(&o);
    let (_, o) = train(&f, "swap", &["--mode", "po-swap"]);
    ok(&o);

    let (plain, o) = train(&f, "plain", &[]);
    ok(&o);
    let dwt = f.root.join("dwt");
    ok(&pdsr(&["ablate-lf", "--config", s(&f.config), "--out", s(&dwt), "--extractor", "dwt"]));
    assert_eq!(fs::read(plain.join("report.csv")).unwrap(), fs::read(dwt.join("report.csv")).unwrap());
    assert_eq!(fs::read(plain.join("checkpoint.ckpt")).unwrap(), fs::read(dwt.join("checkpoint.ckpt")).unwrap());

    let gauss = f.root.join("gauss");
    let stdout = ok(&pdsr(&["ablate-lf", "--config", s(&f.config), "--out", s(&gauss), "--extractor", "gaussian"]));
    assert!(stdout.contains("extractor: gaussian"));
    let report = fs::read_to_string(gauss.join("report.csv")).unwrap();
    assert!(report.lines().next().unwrap().ends_with("lf_mae_gaussian_val"));
    assert!(!report.contains("NaN") && !report.contains("inf"));
    assert_ne!(fs::read(base.join("checkpoint.ckpt")).unwrap(), fs::read(plain.join("checkpoint.ckpt")).unwrap());
}

#[test]
fn resume_continues_to_the_same_result() {
    let f = fixture();
    let (full, o) = train(&f, "full", &["--set", "admm.admm_rounds=2"]);
    ok(&o);
    let (part, o) = train(&f, "part", &["--set", "admm.admm_rounds=0"]);
    ok(&o);
    let o = pdsr(&["train", "--config", s(&f.config), "--out", s(&part), "--set", "admm.admm_rounds=2", "--resume"]);
    ok(&o);
    assert_eq!(fs::read(full.join("checkpoint.ckpt")).unwrap(), fs::read(part.join("checkpoint.ckpt")).unwrap());
    assert_eq!(fs::read(full.join("report.csv")).unwrap(), fs::read(part.join("report.csv")).unwrap());
}

#[test]
fn eval_and_curve_formats() {
    let f = fixture();
    let (run, o) = train(&f, "run", &[]);
    ok(&o);
    let ckpt = run.join("checkpoint.ckpt");
    let e1 = f.root.join("e1");
    ok(&pdsr(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&f.data), "--out", s(&e1), "--save-images"]));
    let csv = fs::read_to_string(e1.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 + 1);
    assert_eq!(csv.lines().next().unwrap(), "image,psnr_y,ssim_y,perceptual_proxy,psnr_y_first,ssim_y_first,lf_mae");
    assert!(csv.lines().last().unwrap().starts_with("mean,"));
    for kind in ["first", "final", "lfdiff"] {
        assert!(e1.join("images").join(format!("0000_{kind}.png")).is_file());
    }
    let e2 = f.root.join("e2");
    ok(&pdsr(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&f.data), "--out", s(&e2)]));
    assert_eq!(fs::read(e1.join("metrics.csv")).unwrap(), fs::read(e2.join("metrics.csv")).unwrap());

    let e3 = f.root.join("e3");
    ok(&pdsr(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&f.data), "--out", s(&e3), "--crop-border", "2"]));
    let mean = |dir: &Path| -> Vec<String> {
        let csv = fs::read_to_string(dir.join("metrics.csv")).unwrap();
        csv.lines().last().unwrap().split(',').map(str::to_string).collect()
    };
    let (full, cropped) = (mean(&e1), mean(&e3));
    assert_ne!(full[1], cropped[1]);
    assert_eq!(full[6], cropped[6]);

    let c1 = f.root.join("c1.csv");
    let c2 = f.root.join("c2.csv");
    for c in [&c1, &c2] {
        ok(&pdsr(&[
            "curve",
            "--checkpoint-o",
            s(&ckpt),
            "--checkpoint-p",
            s(&ckpt),
            "--manifest",
            s(&f.data),
            "--alphas",
            "0,0.1,0.5,1",
            "--out",
            s(c),
        ]));
    }
    let curve = fs::read_to_string(&c1).unwrap();
    assert_eq!(curve.lines().count(), 1 + 4);
    assert_eq!(fs::read(&c1).unwrap(), fs::read(&c2).unwrap());
}

#[test]
fn scale_mismatch_is_rejected() {
    let f = fixture();
    let (run, o) = train(&f, "run", &["--set", "admm.admm_rounds=0"]);
    ok(&o);
    ok(&pdsr(&["prepare", "--hr-dir", s(&f.root.join("hr")), "--out-dir", s(&f.root.join("x4")), "--scale", "4", "--patch-size-lr", "4"]));
    let o = pdsr(&["eval", "--checkpoint", s(&run.join("checkpoint.ckpt")), "--manifest", s(&f.root.join("x4")), "--out", s(&f.root.join("e"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("contract"));
}
