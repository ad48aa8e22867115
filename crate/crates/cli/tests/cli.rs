use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set",
    "synthetic.sessions=3",
    "--set",
    "synthetic.session_length=720",
    "--set",
    "model.d_model=8",
    "--set",
    "model.heads=2",
    "--set",
    "model.experts=2",
    "--set",
    "model.conv_blocks=1",
    "--set",
    "train.epochs=2",
    "--set",
    "train.batch_size=16",
];

fn frameattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_frameattn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    frameattn(&args)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn line_value(text: &str, prefix: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(prefix))
        .unwrap_or_else(|| panic!("no `{prefix}` line in {text}"))
        .trim()
        .to_string()
}

#[test]
fn datagen_writes_sessions_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = frameattn(&["datagen", "--seed", "5", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let mut csvs: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    csvs.sort();
    assert_eq!(csvs.len(), 6);
    assert!(a.join("manifest.json").exists());
    assert!(a.join("run_config.json").exists());
    for name in &csvs {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn datagen_rejects_one_class() {
    let dir = tempfile::tempdir().unwrap();
    let o = frameattn(&["datagen", "--out", dir.path().to_str().unwrap(), "--set", "synthetic.classes=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("classes"));
}

#[test]
fn bad_override_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = frameattn(&["train", "--out", dir.path().to_str().unwrap(), "--set", "model.width=3"]);
    assert_eq!(o.status.code(), Some(1));
    let o = frameattn(&["train", "--out", dir.path().to_str().unwrap(), "--disable", "attention"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_data_dir_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny("train", dir.path(), &["--set", "data.dir=/nonexistent/frames"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn both_strategies_train_and_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    for strategy in ["shuffled", "time-sequential"] {
        let out = dir.path().join(strategy);
        let o = tiny("train", &out, &["--strategy", strategy]);
        assert!(o.status.success(), "{}", stderr(&o));
        let metrics = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
        for line in metrics.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["strategy"], strategy);
        }
        assert!(out.join("model.ckpt").exists());
    }
}

#[test]
fn baseline_flags_reach_the_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny("train", dir.path(), &["--disable", "intra,moe,gate,pe", "--heads", "8", "--dump-plan"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run_config.json")).unwrap()).unwrap();
    assert_eq!(cfg["model"]["heads"], 8);
    let disabled: Vec<&str> = cfg["model"]["disable"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert_eq!(disabled, ["intra", "pe", "moe", "gate"]);
    assert_eq!(cfg["model"]["channels"], 3);

    let plans: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("batch_plans.json")).unwrap()).unwrap();
    assert_eq!(plans.as_array().unwrap().len(), 2);
}

#[test]
fn eval_reproduces_the_training_test_score() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny("train", dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let trained = line_value(&stdout(&o), "test mean F1");

    let eval = || frameattn(&["eval", "--out", dir.path().to_str().unwrap()]);
    let first = eval();
    assert!(first.status.success(), "{}", stderr(&first));
    assert_eq!(line_value(&stdout(&first), "test mean F1"), trained);
    let record = fs::read(dir.path().join("eval_test.json")).unwrap();

    let second = eval();
    assert_eq!(stdout(&first), stdout(&second));
    assert_eq!(record, fs::read(dir.path().join("eval_test.json")).unwrap());
}

#[test]
fn eval_class_mismatch_names_both_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert!(tiny("train", &out, &[]).status.success());

    let cfg_path = dir.path().join("eval.toml");
    fs::write(&cfg_path, "[data]\nclasses = 8\n\n[synthetic]\nsessions = 3\nsession_length = 720\n").unwrap();

    let o = frameattn(&[
        "eval",
        "--config",
        cfg_path.to_str().unwrap(),
        "--checkpoint",
        out.join("model.ckpt").to_str().unwrap(),
        "--out",
        dir.path().join("eval").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains('6') && err.contains('8'), "{err}");
}

#[test]
fn gradcheck_passes_and_names_a_corrupted_block() {
    let dir = tempfile::tempdir().unwrap();
    let o = frameattn(&["gradcheck", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.ends_with("pass")).count(), 9, "{text}");

    let o = frameattn(&["gradcheck", "--out", dir.path().to_str().unwrap(), "--inject-fault", "conv1d"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("conv backbone"));
    assert!(stdout(&o).lines().any(|l| l.starts_with("conv backbone") && l.ends_with("FAIL")));
}

#[test]
fn ablate_batch_grid_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny(
        "ablate",
        dir.path(),
        &["--batch-sizes", "4,16,64,256", "--seeds", "0,1", "--set", "train.epochs=1"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let mut reader = csv::Reader::from_path(dir.path().join("ablation.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let sizes: Vec<&str> = rows.iter().map(|r| &r[col("batch_size")]).collect();
    assert_eq!(sizes, ["4", "16", "64", "256"]);
    for r in &rows {
        assert_eq!(&r[col("status")], "ok");
        assert!(r[col("mean_f1_mean")].parse::<f64>().unwrap().is_finite());
        assert!(r[col("mean_f1_std")].parse::<f64>().unwrap() >= 0.0);
    }
}
