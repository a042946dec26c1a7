use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = "\
num_series: 10
min_slices: 3
max_slices: 4
frame: 32
iterations: 30
warmup: 3
peak_lr: 0.1
augment: none
";

fn ihd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ihd")).args(args).output().expect("running ihd")
}

fn ok(args: &[&str]) -> String {
    let out = ihd(args);
    assert!(
        out.status.success(),
        "ihd {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every subcommand once. Returns the primary outputs, relative to `root`.
fn pipeline(root: &Path) -> Vec<PathBuf> {
    let cfg = root.join("run.cfg");
    fs::write(&cfg, CONFIG).unwrap();
    let j = |p: &str| root.join(p);
    let c = ["--config", s(&cfg)];

    ok(&[&["synth"], &c[..], &["--seed", "3", "--out", s(&j("data"))]].concat());
    ok(&[&["preprocess"], &c[..], &["--data", s(&j("data")), "--out", s(&j("pre"))]].concat());
    for (m, seed) in [("m1", "1"), ("m2", "2")] {
        ok(&[&["train"], &c[..], &["--seed", seed, "--data", s(&j("pre")), "--out", s(&j(m))]].concat());
        let ckpt = j(&format!("{m}/model.ckpt"));
        let preds = j(&format!("{m}.csv"));
        ok(&["predict", "--checkpoint", s(&ckpt), "--data", s(&j("pre")), "--split", "all", "--out", s(&preds)]);
    }
    ok(&["predict", "--checkpoint", s(&j("m1/model.ckpt")), "--data", s(&j("pre")), "--out", s(&j("val.csv"))]);
    fs::write(j("tables.txt"), "1 m1.csv\n2 m2.csv\n").unwrap();
    ok(&["ensemble", "--zoo", s(&j("tables.txt")), "--out", s(&j("ens.csv"))]);
    ok(&["snap", "--preds", s(&j("ens.csv")), "--tau-h", "0.9", "--tau-l", "0.1", "--out", s(&j("snap.csv"))]);
    fs::write(j("zoo.txt"), "1 m1/model.ckpt\n2 m2/model.ckpt\n").unwrap();
    ok(&[
        &["ssl-round"],
        &c[..],
        &["--zoo", s(&j("zoo.txt")), "--data", s(&j("pre")), "--tau-s", "0.6", "--tau-p", "0.5"],
        &["--out", s(&j("r0"))],
    ]
    .concat());

    let mut files = vec![
        "data/manifest.csv",
        "data/answers.csv",
        "data/synth.cfg",
        "pre/manifest.csv",
        "pre/preprocess.cfg",
        "m1/model.ckpt",
        "m1/history.csv",
        "m1/config.cfg",
        "m1.csv",
        "m2.csv",
        "val.csv",
        "ens.csv",
        "snap.csv",
        "r0/model.ckpt",
        "r0/ensemble.csv",
        "r0/selection.csv",
        "r0/pseudo.csv",
        "r0/history.csv",
        "r0/zoo.txt",
        "r0/report.txt",
    ]
    .into_iter()
    .map(PathBuf::from)
    .collect::<Vec<_>>();
    for dir in ["data/volumes", "pre"] {
        for e in fs::read_dir(j(dir)).unwrap() {
            let name = e.unwrap().file_name();
            if name != "run.txt" {
                files.push(Path::new(dir).join(name));
            }
        }
    }
    files.sort();
    files.dedup();
    files
}

#[test]
fn every_subcommand_is_byte_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let files = pipeline(a.path());
    assert_eq!(pipeline(b.path()), files);
    for f in &files {
        let x = fs::read(a.path().join(f)).unwrap();
        let y = fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{} differs between runs", f.display());
    }
    // Same inputs through stdout-only commands.
    let eval = |root: &Path| {
        let (preds, truth) = (root.join("val.csv"), root.join("data/manifest.csv"));
        ok(&["evaluate", "--preds", s(&preds), "--truth", s(&truth), "--split", "validation"])
    };
    assert_eq!(eval(a.path()), eval(b.path()));
    let inspect = |root: &Path| ok(&["inspect", "--checkpoint", s(&root.join("r0/model.ckpt"))]);
    assert_eq!(inspect(a.path()), inspect(b.path()));

    // Run manifests carry the timestamp and do exist.
    for m in ["data/run.txt", "pre/run.txt", "m1/run.txt", "m1.csv.run", "ens.csv.run", "r0/run.txt"] {
        let text = fs::read_to_string(a.path().join(m)).unwrap();
        assert!(text.contains("timestamp_unix: "), "{m}");
        assert!(text.contains("command: "), "{m}");
    }

    let zoo = fs::read_to_string(a.path().join("r0/zoo.txt")).unwrap();
    assert_eq!(zoo.lines().count(), 2);
    assert!(zoo.lines().all(|l| !l.contains(s(a.path()))), "zoo paths must be relative: {zoo}");
}

#[test]
fn evaluate_prints_one_scalar_matching_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let preds = root.join("p.csv");
    let truth = root.join("t.csv");
    let mut table = ihd_core::ensemble::PredictionTable::new();
    table.insert("A", 0, [0.5; 6]).unwrap();
    table.write(&preds).unwrap();
    let m = ihd_core::dataset::Manifest::parse(
        "series_id,slice_index,split,epidural,intraparenchymal,intraventricular,subarachnoid,subdural,any\nA,0,validation,1,0,0,0,0,1\n",
        &truth,
    )
    .unwrap();
    m.write(&truth).unwrap();
    let out = ok(&["evaluate", "--preds", s(&preds), "--truth", s(&truth)]);
    let value: f64 = out.trim().parse().unwrap();
    assert_eq!(out.lines().count(), 1);
    assert!((value - std::f64::consts::LN_2).abs() < 5e-7);
    let lib = ihd_core::ensemble::weighted_logloss(
        &table,
        &ihd_core::ensemble::truth_from_manifest(&m),
        &ihd_core::ensemble::MetricConfig::default(),
    )
    .unwrap();
    assert_eq!(out.trim(), format!("{lib:.6}"));
}

#[test]
fn gradcheck_passes_on_the_tiny_model() {
    let out = ok(&["gradcheck", "--coords", "220", "--seed", "5"]);
    assert!(out.lines().last() == Some("PASS"), "{out}");
    let checked: usize = out.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(checked >= 200);
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let cases: Vec<Vec<&str>> = vec![
        vec!["evaluate", "--preds", s(&missing), "--truth", s(&missing)],
        vec!["inspect", "--checkpoint", s(&missing)],
        vec!["synth", "--out", s(dir.path()), "--set", "frame=8"],
        vec!["synth", "--out", s(dir.path()), "--set", "noequals"],
        vec!["gradcheck", "--coords", "10", "--tol", "0"],
    ];
    for args in cases {
        let out = ihd(&args);
        assert!(!out.status.success(), "{args:?} should fail");
        assert!(!out.stderr.is_empty() || !out.stdout.is_empty(), "{args:?} is silent");
    }
    let out = ihd(&["inspect", "--checkpoint", s(&missing)]);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

#[test]
fn synth_smoke_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, CONFIG).unwrap();
    ok(&["synth", "--config", s(&cfg), "--set", "num_series=4", "--out", s(&out)]);
    let m = ihd_core::dataset::Manifest::read(&out.join("manifest.csv")).unwrap();
    assert_eq!(m.series_ids().len(), 4);
    let run = fs::read_to_string(out.join("run.txt")).unwrap();
    assert!(run.contains("overrides: num_series=4"));
    assert_eq!(fs::read_dir(out.join("volumes")).unwrap().count(), 8, "header and raw file per series");
}
