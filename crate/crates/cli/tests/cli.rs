use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sqr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sqr")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sqr(args);
    assert!(
        out.status.success(),
        "sqr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn sample_bytes(dir: &Path) -> Vec<Vec<u8>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir.join("samples")).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files.iter().map(|f| fs::read(f).unwrap()).collect()
}

#[test]
fn synth_is_reproducible_and_never_overwrites() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let stdout = ok(&["synth", "--n", "10", "--seed", "42", "--out", p(&a)]);
    assert!(stdout.contains("wrote 10 samples"));
    ok(&["--reproducible", "synth", "--n", "10", "--seed", "42", "--out", p(&b)]);
    let manifest = fs::read_to_string(a.join("manifest.toml")).unwrap();
    assert!(manifest.contains("master_seed = 42"));
    assert_eq!(sample_bytes(&a), sample_bytes(&b));

    ok(&["synth", "--n", "10", "--seed", "43", "--out", p(&a)]);
    assert!(tmp.path().join("a-2").join("manifest.toml").exists());
    assert!(fs::read_to_string(a.join("manifest.toml")).unwrap().contains("master_seed = 42"));
}

#[test]
fn class_count_sets_label_width() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    ok(&["synth", "--n", "4", "--classes", "5", "--out", p(&d)]);
    let manifest = fs::read_to_string(d.join("manifest.toml")).unwrap();
    assert!(manifest.contains("n_classes = 5"), "{manifest}");
}

#[test]
fn train_then_eval_writes_documented_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, model, eval) = (tmp.path().join("data"), tmp.path().join("model"), tmp.path().join("eval"));
    ok(&["synth", "--n", "20", "--seed", "3", "--out", p(&data)]);
    ok(&["train", "--data", p(&data), "--head", "multi", "--epochs", "2", "--out", p(&model)]);
    let history = fs::read_to_string(model.join("history.csv")).unwrap();
    assert!(history.contains("learning_rate: 0.001"));
    assert!(history.contains("config_hash: "));
    assert!(history.lines().any(|l| l == "epoch,train_loss,val_loss,val_f1"));
    assert!(model.join("config.toml").exists());

    let stdout = ok(&[
        "eval",
        "--model",
        p(&model.join("model.sqrm")),
        "--data",
        p(&data),
        "--sweep",
        "--out",
        p(&eval),
    ]);
    assert!(stdout.contains("micro_f1"));
    let metrics = fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("# config_hash: "));
    assert!(metrics.contains("threshold,n_samples,micro_f1,macro_f1,jaccard"));
    assert!(fs::read_to_string(eval.join("confusion.csv")).unwrap().contains("class,tp,fp,fn,tn"));
    let sweep = fs::read_to_string(eval.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().filter(|l| !l.starts_with('#')).count(), 1 + 101);
}

#[test]
fn mismatched_head_and_class_count_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let (multi, five, model) = (tmp.path().join("m"), tmp.path().join("five"), tmp.path().join("model"));
    ok(&["synth", "--n", "12", "--out", p(&multi)]);
    let out = sqr(&["train", "--data", p(&multi), "--head", "single", "--out", p(&model)]);
    assert_eq!(out.status.code(), Some(2));

    ok(&["train", "--data", p(&multi), "--epochs", "1", "--out", p(&model)]);
    ok(&["synth", "--n", "6", "--classes", "5", "--out", p(&five)]);
    let out = sqr(&["eval", "--model", p(&model.join("model.sqrm")), "--data", p(&five)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("classes"));
}

#[test]
fn beampattern_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bp");
    ok(&["beampattern", "--out", p(&out)]);
    let text = fs::read_to_string(out.join("beampattern.csv")).unwrap();
    let mut rows = text.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(rows.next(), Some("azimuth_deg,elevation_deg,response_db"));
    let at = |az: f64| -> f64 {
        text.lines()
            .filter(|l| !l.starts_with('#'))
            .skip(1)
            .map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>())
            .find(|r| r[0] == az)
            .unwrap()[2]
    };
    assert!(at(0.0).abs() < 1e-9);
    assert!(at(20.0) < -100.0 && at(-35.0) < -100.0);
    assert!(rows.count() > 300);
    let plain = fs::read_to_string(out.join("beampattern_no_nulls.csv")).unwrap();
    assert!(plain.lines().any(|l| l == "azimuth_deg,elevation_deg,response_db"));
}

#[test]
fn unknown_config_key_reports_its_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\n\n[train]\nlearning_rat = 0.1\n").unwrap();
    let out = sqr(&["--config", p(&cfg), "beampattern", "--out", p(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 4"), "{err}");
}
