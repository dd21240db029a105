use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn trajcast(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trajcast"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = trajcast(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: [&str; 8] = ["--n", "100", "--m", "5", "--t", "10", "--seed", "1"];

#[test]
fn synth_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for name in ["a", "b"] {
        let (ds, gt) = (format!("{name}.ds"), format!("{name}.gt"));
        let mut args = vec!["synth", "--out", &ds, "--gt-out", &gt];
        args.extend(SMALL);
        ok(d, &args);
    }
    assert_eq!(
        fs::read(d.join("a.ds")).unwrap(),
        fs::read(d.join("b.ds")).unwrap()
    );
    assert_eq!(
        fs::read(d.join("a.gt")).unwrap(),
        fs::read(d.join("b.gt")).unwrap()
    );
}

#[test]
fn sparse_synth_reports_its_fill_rate() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["synth", "--p-obs", "0.059"]);
    let rate: f64 = out
        .split_whitespace()
        .find_map(|w| w.strip_prefix("fill_rate="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((rate - 0.059).abs() < 0.01, "{out}");
}

#[test]
fn invalid_probability_names_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = trajcast(dir.path(), &["synth", "--p-obs", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--p-obs"));
}

#[test]
fn wrong_container_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut args = vec!["synth"];
    args.extend(SMALL);
    ok(d, &args);
    // A dataset is not a model.
    let out = trajcast(
        d,
        &["eval", "--data", "dataset.txt", "--model", "dataset.txt"],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = trajcast(d, &["train", "--data", "ground_truth.txt"]);
    assert_eq!(out.status.code(), Some(2));
    let out = trajcast(d, &["train", "--data", "missing.txt"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergent_training_exits_with_numerical_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut args = vec!["synth"];
    args.extend(SMALL);
    ok(d, &args);
    let out = trajcast(
        d,
        &[
            "train",
            "--data",
            "dataset.txt",
            "--lr",
            "1e200",
            "--grad-clip",
            "0",
            "--epochs",
            "3",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let out = trajcast(
        d,
        &[
            "ensemble",
            "--data",
            "dataset.txt",
            "--n-models",
            "3",
            "--top-k",
            "1",
            "--lr",
            "1e200",
            "--grad-clip",
            "0",
            "--epochs",
            "3",
            "--d",
            "4",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_and_eval_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut args = vec!["synth"];
    args.extend(SMALL);
    ok(d, &args);
    fs::write(d.join("fast.cfg"), "epochs=2\nd=4\nbatch_size=16\n").unwrap();
    let line = ok(
        d,
        &[
            "train",
            "--config",
            "fast.cfg",
            "--data",
            "dataset.txt",
            "--arch",
            "baseline",
        ],
    );
    assert!(line.starts_with("arch=baseline val_auc="), "{line}");
    ok(
        d,
        &["eval", "--data", "dataset.txt", "--model", "model.txt"],
    );
    let metrics = fs::read_to_string(d.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("name,value\ntest_auc,"));
    for key in [
        "val_auc",
        "n_train",
        "n_val",
        "n_test",
        "positive_rate_test",
    ] {
        assert!(metrics.contains(key), "{key}");
    }
    let roc = fs::read_to_string(d.join("roc.csv")).unwrap();
    assert!(roc.starts_with("threshold,fpr,tpr\ninf,0,0\n"));
    assert!(roc.trim_end().ends_with(",1,1"));
}

#[test]
fn tensorize_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut records = String::from("patient_id,feature_id,time_hours,value\n");
    let mut covariates = String::from("patient_id,age\n");
    let mut labels = String::from("patient_id,label\n");
    for i in 0..20 {
        records.push_str(&format!("q{i},glucose,{}.5,{}\n", i % 5, 90 + i));
        records.push_str(&format!("q{i},urine_out,1.2,{}\n", 10 * i));
        records.push_str(&format!("q{i},urine_out,1.8,5\n"));
        covariates.push_str(&format!("q{i},{}\n", 40 + i));
        labels.push_str(&format!("q{i},{}\n", i % 2));
    }
    fs::write(d.join("r.csv"), records).unwrap();
    fs::write(d.join("c.csv"), covariates).unwrap();
    fs::write(d.join("l.csv"), labels).unwrap();
    let out = ok(
        d,
        &[
            "tensorize",
            "--records",
            "r.csv",
            "--covariates",
            "c.csv",
            "--labels",
            "l.csv",
            "--horizon",
            "4",
            "--sum-features",
            "urine_out",
        ],
    );
    assert!(out.contains("patients=20 features=2 bins=4"), "{out}");
    assert!(out.contains("dropped_beyond_horizon=4 merged=20"), "{out}");
    let ds = trajcast::data::TensorDataset::read(&d.join("dataset.txt")).unwrap();
    let urine = ds
        .feature_ids
        .iter()
        .position(|f| f == "urine_out")
        .unwrap();
    let cell = ds
        .entries
        .iter()
        .find(|e| e.i == 3 && e.j == urine)
        .unwrap();
    assert_eq!((cell.t, cell.value), (1, 35.0));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gradcheck"]);
    assert_eq!(out.lines().filter(|l| l.starts_with("arch=")).count(), 6);
}
