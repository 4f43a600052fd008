use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pose6d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pose6d"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, scenes: &str) -> std::path::PathBuf {
    let out = dir.join("syn");
    let o = pose6d(&["synth", "--out", s(&out), "--scenes", scenes, "--seed", "7"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("manifest.tsv")
}

#[test]
fn synth_estimate_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path(), "2");
    let est = tmp.path().join("est");
    let o = pose6d(&[
        "estimate",
        "--mode",
        "rgbd",
        "--dataset",
        s(&manifest),
        "--out",
        s(&est),
    ]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("estimated\tframes=2"));
    assert!(est.join("run_record.txt").is_file());

    let rep = tmp.path().join("rep");
    let o = pose6d(&[
        "evaluate",
        "--mode",
        "rgbd",
        "--dataset",
        s(&manifest),
        "--estimates",
        s(&est),
        "--out",
        s(&rep),
    ]);
    assert!(o.status.success());
    let summary = fs::read_to_string(rep.join("summary.tsv")).unwrap();
    assert!(!summary.is_empty());
    assert!(rep.join("curve.tsv").is_file());
    assert!(rep.join("report.txt").is_file());
}

#[test]
fn evaluate_counts_only_estimated_objects() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path(), "3");
    let est = tmp.path().join("est");
    assert!(
        pose6d(&["estimate", "--dataset", s(&manifest), "--out", s(&est)])
            .status
            .success()
    );
    let mut ids: Vec<_> = fs::read_dir(&est)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "est"))
        .collect();
    ids.sort();
    fs::remove_file(&ids[0]).unwrap();
    let per_frame = fs::read_to_string(&manifest)
        .unwrap()
        .lines()
        .filter(|l| l.starts_with("frame\t"))
        .map(|l| l.split('\t').skip(6).count())
        .collect::<Vec<_>>();
    let total: usize = per_frame.iter().sum();
    let missing = per_frame[0];

    let rep = tmp.path().join("rep");
    let o = pose6d(&[
        "evaluate",
        "--dataset",
        s(&manifest),
        "--estimates",
        s(&est),
        "--out",
        s(&rep),
    ]);
    assert!(o.status.success());
    let line = String::from_utf8_lossy(&o.stdout).into_owned();
    let rate: f64 = line.trim().rsplit('=').next().unwrap().parse().unwrap();
    assert!(line.contains(&format!("objects={total}")), "{line}");
    let expected = (total - missing) as f64 / total as f64;
    assert!((rate - expected).abs() < 1e-4, "{rate} vs {expected}");
}

#[test]
fn run_record_reproduces_configuration() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path(), "1");
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "mode = rgb\nseed = 19\nrgb.tau_in = 2.5\n").unwrap();
    let a = tmp.path().join("a");
    assert!(pose6d(&[
        "estimate",
        "--config",
        s(&cfg),
        "--dataset",
        s(&manifest),
        "--out",
        s(&a)
    ])
    .status
    .success());
    let record = fs::read_to_string(a.join("run_record.txt")).unwrap();
    assert!(record.contains("rgb.tau_in = 2.5"));

    let replay = tmp.path().join("replay.cfg");
    fs::write(&replay, &record).unwrap();
    let b = tmp.path().join("b");
    assert!(pose6d(&[
        "estimate",
        "--config",
        s(&replay),
        "--dataset",
        s(&manifest),
        "--out",
        s(&b)
    ])
    .status
    .success());
    for e in fs::read_dir(&a).unwrap() {
        let name = e.unwrap().file_name();
        assert_eq!(
            fs::read(a.join(&name)).unwrap(),
            fs::read(b.join(&name)).unwrap(),
            "{name:?}"
        );
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(pose6d(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        pose6d(&["estimate", "--dataset", "x"]).status.code(),
        Some(2)
    );

    let missing = tmp.path().join("nope.tsv");
    let o = pose6d(&["estimate", "--dataset", s(&missing), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error\tIo\t"));

    let bad = tmp.path().join("bad.tsv");
    fs::write(&bad, "frame\tonly-two-fields\n").unwrap();
    let o = pose6d(&["estimate", "--dataset", s(&bad), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error\tManifestParse\t"));

    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "no.such.key = 1\n").unwrap();
    let o = pose6d(&["synth", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));

    let o = Command::new(env!("CARGO_BIN_EXE_pose6d"))
        .args(["synth", "--out", s(&tmp.path().join("w")), "--scenes", "1"])
        .env("POSE6D_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
