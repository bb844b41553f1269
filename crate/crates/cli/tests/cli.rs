use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn swg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = swg(args);
    assert!(o.status.success(), "swg {args:?} failed: {}", stderr(&o));
    stdout(&o)
}

/// Table rows: every non-empty line that is not a config echo.
fn rows(out: &str) -> Vec<&str> {
    out.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()).collect()
}

const FAST: &[&str] = &[
    "--set",
    "episodes=2",
    "--set",
    "hidden=8",
    "--set",
    "disc_hidden=8",
    "--set",
    "batch_size=16",
];

fn gen_small(dir: &Path) {
    let d = dir.to_str().unwrap();
    ok(&[
        "gen",
        "--out",
        d,
        "--seed",
        "3",
        "--source-per-class",
        "8",
        "--target-per-class",
        "6",
    ]);
}

fn with_fast<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(FAST);
    v
}

#[test]
fn gen_writes_both_domains() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["gen", "--out", dir.path().to_str().unwrap(), "--seed", "1"]);
    assert!(out.starts_with("# out="));
    assert!(out.contains("# seed=1"));
    let r = rows(&out);
    assert_eq!(r[0], "file samples zeroshot_accuracy");
    assert!(r[1].starts_with("source.csv "));
    assert!(r[2].starts_with("target.csv "));
    assert!(dir.path().join("source.csv").exists());
    assert!(dir.path().join("target.csv").exists());
}

#[test]
fn calibrate_fixture_gives_unit_temperature() {
    let dir = tempfile::tempdir().unwrap();
    let ln9 = 9f64.ln();
    let s = dir.path().join("s.csv");
    let t = dir.path().join("t.csv");
    fs::write(&s, format!("id,domain,label,f:1,z:2\n0,source,0,0.5,{ln9},0\n")).unwrap();
    fs::write(&t, format!("id,domain,label,f:1,z:2\n1,target,-1,0.5,{ln9},0\n")).unwrap();
    let out = ok(&[
        "calibrate",
        "--source",
        s.to_str().unwrap(),
        "--target",
        t.to_str().unwrap(),
        "--tau",
        "0.9",
    ]);
    assert!(out.contains("# tau=0.9"));
    assert!(out.contains("T=1.000000"), "{out}");
}

#[test]
fn train_writes_the_artifact_layout() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    let run = dir.path().join("run");
    let src = dir.path().join("source.csv");
    let tgt = dir.path().join("target.csv");
    let out = ok(&with_fast(&[
        "train",
        "--source",
        src.to_str().unwrap(),
        "--target",
        tgt.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]));
    assert!(out.contains("# scheme=v1") && out.contains("# episodes=2"));
    assert!(rows(&out).last().unwrap().starts_with("scheme=v1 seed=0 accuracy="));
    for f in ["config.txt", "metrics.txt", "checkpoint.txt", "predictions.csv", "summary.txt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert_eq!(fs::read_to_string(run.join("metrics.txt")).unwrap().lines().count(), 2);

    let eval = ok(&[
        "eval",
        "--checkpoint",
        run.join("checkpoint.txt").to_str().unwrap(),
        "--dataset",
        tgt.to_str().unwrap(),
    ]);
    let r = rows(&eval);
    assert_eq!(r[0], "samples accuracy");
    let summary = fs::read_to_string(run.join("summary.txt")).unwrap();
    let acc = r[1].split_whitespace().nth(1).unwrap();
    assert!(summary.contains(&format!("accuracy={acc} ")), "{summary} vs {acc}");
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# comment\nscheme=cdan_only\nseed=4\n").unwrap();
    let src = dir.path().join("source.csv");
    let tgt = dir.path().join("target.csv");
    let out = ok(&with_fast(&[
        "train",
        "--source",
        src.to_str().unwrap(),
        "--target",
        tgt.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "seed=5",
    ]));
    assert!(out.contains("# scheme=cdan_only"));
    assert!(out.contains("# seed=5"));
    assert!(out.contains("# kd_weight=0"));
    assert!(out.contains("# fraction=0"));
}

#[test]
fn unknown_config_key_fails_with_its_name() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    let src = dir.path().join("source.csv");
    let o = swg(&[
        "train",
        "--source",
        src.to_str().unwrap(),
        "--target",
        src.to_str().unwrap(),
        "--set",
        "epochs=3",
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("epochs"), "{}", stderr(&o));
}

#[test]
fn bad_flag_is_named() {
    let o = swg(&["calibrate", "--sauce", "x"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--sauce"));
}

#[test]
fn file_errors_name_path_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("broken.csv");
    fs::write(&bad, "id,domain,label,f:1,z:2\n0,source,0,1,0,0\n1,source,0,1,0\n").unwrap();
    let o = swg(&["calibrate", "--source", bad.to_str().unwrap(), "--target", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("broken.csv") && err.contains("line 3"), "{err}");
}

#[test]
fn sweep_expansion_emits_one_row_per_fraction() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    let src = dir.path().join("source.csv");
    let tgt = dir.path().join("target.csv");
    let out = ok(&with_fast(&[
        "sweep-expansion",
        "--source",
        src.to_str().unwrap(),
        "--target",
        tgt.to_str().unwrap(),
        "--fractions",
        "0,0.5",
        "--jobs",
        "2",
    ]));
    let r = rows(&out);
    assert_eq!(r.len(), 3);
    assert_eq!(r[0], "fraction accuracy temperature pseudo_source");
    assert!(r[1].starts_with("0 "));
    assert!(r[2].starts_with("0.5 "));
}

#[test]
fn sweep_tau_accepts_none() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    let src = dir.path().join("source.csv");
    let tgt = dir.path().join("target.csv");
    let out = ok(&with_fast(&[
        "sweep-tau",
        "--source",
        src.to_str().unwrap(),
        "--target",
        tgt.to_str().unwrap(),
        "--taus",
        "0.9,none",
    ]));
    let r = rows(&out);
    assert_eq!(r.len(), 3);
    assert!(r[1].starts_with("0.9 "));
    let none: Vec<&str> = r[2].split_whitespace().collect();
    assert_eq!(none[0], "none");
    assert_eq!(none[2], "1");
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    let src = dir.path().join("source.csv");
    let tgt = dir.path().join("target.csv");
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        let stdout = ok(&with_fast(&[
            "train",
            "--source",
            src.to_str().unwrap(),
            "--target",
            tgt.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
            "--set",
            "scheme=v2",
        ]));
        let stdout: String = stdout.lines().filter(|l| !l.starts_with("# out=")).collect();
        outputs.push((run, stdout));
    }
    for f in ["metrics.txt", "predictions.csv", "run1_predictions.csv", "checkpoint.txt"] {
        let a = fs::read(outputs[0].0.join(f)).unwrap();
        let b = fs::read(outputs[1].0.join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    assert_eq!(outputs[0].1, outputs[1].1);
}
