use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set", "n_classes=4", "--set", "n_train=80", "--set", "n_test=40", "--set", "epochs=2", "--set", "batch_size=16",
];

fn mmcosine(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmcosine")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn files(dir: &Path) -> BTreeSet<String> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(SMALL);
    v
}

#[test]
fn bound_prints_value() {
    let o = mmcosine(&["bound", "--classes", "6", "--posterior", "0.9"]);
    assert!(o.status.success());
    let v: f64 = stdout(&o).trim().parse().unwrap();
    assert!((v - 1.359_522_317_775_114_2).abs() < 1e-12);
    assert!(stdout(&o).starts_with("1.3595"));
}

#[test]
fn usage_errors_exit_two() {
    for args in [
        vec!["bound", "--classes", "six"],
        vec!["bound", "--classes", "1"],
        vec!["bound", "--classes", "6", "--posterior", "1.5"],
        vec!["train", "--out-dir", "/nonexistent/x", "--set", "epochs=0"],
        vec!["train", "--out-dir", "/nonexistent/x", "--set", "bogus=1"],
        vec!["train", "--out-dir", "/nonexistent/x", "--fusion", "late"],
        vec!["frobnicate"],
        vec!["gen-data"],
    ] {
        let o = mmcosine(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.mmcdat");
    let o = mmcosine(&["train", "--data", missing.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let garbage = dir.path().join("garbage.mmcdat");
    std::fs::write(&garbage, b"not a dataset").unwrap();
    let o = mmcosine(&["train", "--data", garbage.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gen_data_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.mmcdat");
    let b = dir.path().join("b.mmcdat");
    for p in [&a, &b] {
        let o = mmcosine(&with_small(&["gen-data", "--seed", "7", "--out", p.to_str().unwrap()]));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(std::fs::read(dir.path().join("a.mmcdat.cfg")).unwrap(), std::fs::read(dir.path().join("b.mmcdat.cfg")).unwrap());
    let o = mmcosine(&with_small(&["gen-data", "--seed", "8", "--out", b.to_str().unwrap()]));
    assert!(o.status.success());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn train_evaluate_probe_diagnose() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.mmcdat");
    let run = dir.path().join("run");
    let (data_s, run_s) = (data.to_str().unwrap(), run.to_str().unwrap());
    assert!(mmcosine(&with_small(&["gen-data", "--seed", "3", "--out", data_s])).status.success());
    let o = mmcosine(&["train", "--data", data_s, "--loss", "vanilla", "--set", "epochs=2", "--set", "batch_size=16", "--out-dir", run_s]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("joint accuracy: "));
    let expected: BTreeSet<String> = ["angles.csv", "config.cfg", "diagnostics.jsonl", "metrics.json", "model.ckpt"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    assert_eq!(files(&run), expected);
    let jsonl = std::fs::read_to_string(run.join("diagnostics.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 2);
    let angles = std::fs::read_to_string(run.join("angles.csv")).unwrap();
    assert_eq!(angles.lines().count(), 1 + 2 * 40);

    let before = std::fs::read(run.join("model.ckpt")).unwrap();
    let o = mmcosine(&["train", "--data", data_s, "--loss", "vanilla", "--set", "epochs=2", "--set", "batch_size=16", "--out-dir", run_s]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(run.join("model.ckpt")).unwrap(), before);

    let o = mmcosine(&["evaluate", "--run", run_s, "--data", data_s]);
    assert!(o.status.success());
    let text = stdout(&o);
    let line = text.lines().find(|l| l.starts_with("joint accuracy: ")).unwrap();
    let pct = line.trim_start_matches("joint accuracy: ").trim_end_matches('%');
    assert_eq!(pct.split('.').nth(1).unwrap().len(), 2, "{line}");

    let scores = dir.path().join("scores.csv");
    let o = mmcosine(&[
        "evaluate", "--run", run_s, "--data", data_s, "--task", "verification", "--pairs", "200",
        "--scores-out", scores.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let direct = stdout(&o);
    assert_eq!(std::fs::read_to_string(&scores).unwrap().lines().count(), 201);
    let o = mmcosine(&["evaluate", "--scores", scores.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), direct);

    let o = mmcosine(&["probe", "--run", run_s, "--data", data_s, "--max-iters", "200"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("probe gap: "));

    let diag = dir.path().join("diag");
    let o = mmcosine(&["diagnose", "--run", run_s, "--data", data_s, "--out-dir", diag.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(files(&diag).len(), 3);
    let hist = std::fs::read_to_string(diag.join("angle_histogram.csv")).unwrap();
    assert_eq!(hist.lines().count(), 1 + 2 * 60);
}

#[test]
fn evaluate_rejects_incompatible_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    assert!(mmcosine(&with_small(&["train", "--out-dir", run_s])).status.success());
    let cfg = std::fs::read_to_string(run.join("config.cfg")).unwrap();
    std::fs::write(run.join("config.cfg"), cfg.replace("feature_dim = 16", "feature_dim = 8")).unwrap();
    let data = dir.path().join("d.mmcdat");
    assert!(mmcosine(&with_small(&["gen-data", "--out", data.to_str().unwrap()])).status.success());
    let o = mmcosine(&["evaluate", "--run", run_s, "--data", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("enc_a."), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn compare_writes_rows_and_medians() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cmp");
    let o = mmcosine(&with_small(&[
        "compare", "--arms", "vanilla,mmcosine", "--seeds", "5", "--set", "probe=true", "--out-dir",
        out.to_str().unwrap(),
    ]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 10 + 2);
    assert!(lines[0].starts_with("arm,seed,joint_acc,probe_a,probe_v,probe_gap"));
    assert_eq!(lines.iter().filter(|l| l.contains(",median,")).count(), 2);
    for row in &lines[1..11] {
        let traj = row.rsplit(',').next().unwrap();
        assert!(out.join(traj).exists(), "{traj}");
    }
    assert!(stdout(&o).contains("mmcosine"));
}
