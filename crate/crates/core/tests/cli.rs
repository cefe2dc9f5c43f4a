//! End-to-end runs of the `partseg` binary.

use std::path::Path;
use std::process::{Command, Output};

fn partseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_partseg"))
        .args(args)
        .output()
        .expect("spawn partseg")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("synth.json");
    std::fs::write(&cfg, r#"{"n_train": 8, "n_val": 2, "n_test": 3}"#).unwrap();
    let out = dir.join("data");
    let o = partseg(&["synth", "--out", p(&out), "--seed", "9", "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("manifest.json")
}

fn tiny_preset(dir: &Path) -> std::path::PathBuf {
    let mut cfg = partseg::strategies::StrategyConfig::desk(0);
    cfg.preset = "tiny".into();
    cfg.trainer.epochs = 1;
    cfg.trainer.steps_per_epoch = 2;
    cfg.trainer.val_interval = 1;
    cfg.trainer.sampler.patch_size = [12; 3];
    cfg.ensemble_size = 1;
    let path = dir.join("tiny.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn synth_writes_manifest_and_is_seed_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ma, mb) = (synth(a.path()), synth(b.path()));
    let read = |m: &Path| std::fs::read(m.parent().unwrap().join("images/train_000.nii.gz")).unwrap();
    assert_eq!(read(&ma), read(&mb));
    let m = partseg::volume::Manifest::load(&ma).unwrap();
    assert_eq!(m.samples.len(), 13);
}

#[test]
fn unknown_strategy_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let o = partseg(&["train", "--manifest", p(&manifest), "--strategy", "unet", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("marginal"));
}

#[test]
fn pseudolabels_without_teacher_ask_for_marginal() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let preset = tiny_preset(dir.path());
    let out = dir.path().join("train");
    let o = partseg(&[
        "train", "--manifest", p(&manifest), "--strategy", "pseudolabels", "--preset", p(&preset), "--out", p(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train the marginal strategy first"));
}

#[test]
fn train_predict_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let preset = tiny_preset(dir.path());
    let train = dir.path().join("train");
    let run = |args: &[&str]| {
        let o = partseg(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    run(&["train", "--manifest", p(&manifest), "--strategy", "marginal", "--preset", p(&preset), "--out", p(&train)]);
    let ckpt = train.join("marginal");
    let preds = dir.path().join("preds");
    run(&[
        "predict", "--manifest", p(&manifest), "--strategy", "marginal", "--checkpoints", p(&ckpt), "--out", p(&preds),
    ]);
    assert_eq!(std::fs::read_dir(&preds).unwrap().count(), 3);

    let from_ckpt = dir.path().join("eval_ckpt");
    let from_files = dir.path().join("eval_files");
    run(&[
        "evaluate", "--manifest", p(&manifest), "--strategy", "marginal", "--checkpoints", p(&ckpt), "--name", "m",
        "--preset", p(&preset), "--out", p(&from_ckpt),
    ]);
    run(&[
        "evaluate", "--manifest", p(&manifest), "--predictions", p(&preds), "--name", "m", "--preset", p(&preset),
        "--out", p(&from_files),
    ]);
    // Probability files are stored in single precision, so scores agree to rounding.
    let body = |d: &Path| -> Vec<Vec<String>> {
        let s = std::fs::read_to_string(d.join("rows.csv")).unwrap();
        s.lines()
            .filter(|l| !l.starts_with('#'))
            .map(|l| l.split(',').map(str::to_owned).collect())
            .collect()
    };
    let (a, b) = (body(&from_ckpt), body(&from_files));
    assert_eq!(a.len(), b.len());
    for (ra, rb) in a.iter().zip(&b) {
        for (x, y) in ra.iter().zip(rb) {
            match (x.parse::<f64>(), y.parse::<f64>()) {
                (Ok(x), Ok(y)) => assert!((x - y).abs() < 1e-2, "{x} vs {y}"),
                _ => assert_eq!(x, y),
            }
        }
    }
}

#[test]
fn screen_writes_filtered_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let out = dir.path().join("screened");
    let o = partseg(&["screen", "--manifest", p(&manifest), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("screening.csv").exists());
    let kept = partseg::volume::Manifest::load(out.join("manifest.json")).unwrap();
    assert!(!kept.samples.is_empty() && kept.samples.len() <= 13);
}
