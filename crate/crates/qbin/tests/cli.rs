use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "grid": {"n_lat": 4, "n_lon": 8},
  "climatology_period": {"first": 2016, "last": 2020},
  "training_period": {"first": 2019, "last": 2020},
  "test_period": {"first": 2021, "last": 2021},
  "members": 2,
  "model": {"width": 4, "cond_hidden": 4},
  "schedule": {"phase1": [1, 2], "phase2": [3, 4], "iters_per_step": 2, "batch_size": 2, "group_size": 2},
  "optimizer": {"lr": 0.001},
  "eval": {"lead_weeks": [1], "n_resamples": 50}
}"#;

fn qbin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qbin"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = qbin(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir` with its bytes, sorted by path.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn full_pipeline_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("run.json");
    fs::write(&cfg, TINY).unwrap();
    let (data, clim, run, fc, fc2, ev, cal, rep) = (
        root.join("data"),
        root.join("clim"),
        root.join("run"),
        root.join("fc"),
        root.join("fc2"),
        root.join("eval"),
        root.join("cal"),
        root.join("report"),
    );
    let c = s(&cfg);

    ok(&["--config", c, "gen-data", "--seed", "4", "--out", s(&data)]);
    let first = tree(&data);
    ok(&["--config", c, "gen-data", "--seed", "4", "--out", s(&data)]);
    assert_eq!(tree(&data), first, "gen-data must rewrite identical bytes");

    ok(&[
        "--config",
        c,
        "climatology",
        "--seed",
        "4",
        "--data",
        s(&data),
        "--out",
        s(&clim),
    ]);
    assert!(clim.join("clim_q4/lead000/m00/2001-07-01.qwf").exists());

    ok(&[
        "--config",
        c,
        "train",
        "--seed",
        "4",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--phase",
        "1",
    ]);
    assert!(run.join("phase1.qwck").exists());
    ok(&[
        "--config",
        c,
        "train",
        "--seed",
        "4",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--phase",
        "2",
        "--resume",
        s(&run.join("phase1.qwck")),
    ]);
    let resumed = fs::read(run.join("final.qwck")).unwrap();
    let straight = root.join("straight");
    ok(&[
        "--config",
        c,
        "train",
        "--seed",
        "4",
        "--data",
        s(&data),
        "--out",
        s(&straight),
    ]);
    assert_eq!(
        fs::read(straight.join("final.qwck")).unwrap(),
        resumed,
        "resumed run differs from uninterrupted run"
    );
    let log = fs::read_to_string(straight.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 8);

    let ck = run.join("final.qwck");
    ok(&[
        "--config",
        c,
        "infer",
        "--seed",
        "4",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ck),
        "--out",
        s(&fc),
    ]);
    ok(&[
        "--config",
        c,
        "infer",
        "--seed",
        "4",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ck),
        "--out",
        s(&fc2),
    ]);
    assert_eq!(tree(&fc), tree(&fc2), "inference archives differ");

    let csv = ok(&[
        "--config",
        c,
        "evaluate",
        "--seed",
        "4",
        "--data",
        s(&data),
        "--forecasts",
        s(&fc),
        "--out",
        s(&ev),
    ]);
    assert!(csv.starts_with("metric,lead_week,region"));
    assert!(csv.contains("rpss,1,global"));
    let again = ok(&[
        "--config",
        c,
        "evaluate",
        "--seed",
        "4",
        "--data",
        s(&data),
        "--forecasts",
        s(&fc),
        "--baseline",
        s(&fc2),
        "--mask",
        "land",
        "--out",
        s(&root.join("eval2")),
    ]);
    assert!(again.lines().skip(1).all(|l| l.contains(",land,")));
    assert!(
        again.contains("rpss_vs_baseline,1,land,0,"),
        "identical archives must tie:\n{again}"
    );

    ok(&[
        "--config",
        c,
        "calibrate",
        "--seed",
        "4",
        "--data",
        s(&data),
        "--out",
        s(&cal),
        "--week",
        "1",
    ]);
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(cal.join("calibration.json")).unwrap()).unwrap();
    assert!(summary["below_fraction"].as_f64().unwrap() > 0.5);

    ok(&[
        "report",
        "--metrics",
        s(&ev.join("metrics.csv")),
        "--out",
        s(&rep),
    ]);
    assert!(rep.join("metrics.json").exists() && rep.join("rpss.svg").exists());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"n_bins": 1}"#).unwrap();
    let out = qbin(&[
        "--config",
        s(&bad),
        "gen-data",
        "--seed",
        "1",
        "--out",
        s(&tmp.path().join("d")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("K must be at least 2"));

    // The seed is mandatory.
    assert_eq!(
        qbin(&["gen-data", "--out", s(&tmp.path().join("d"))])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        qbin(&["--grid", "4by8", "gen-data", "--seed", "1", "--out", "x"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(qbin(&["--help"]).status.code(), Some(0));

    let out = qbin(&["gradcheck", "--seed", "0", "--seeds", "1"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("end_to_end"));
}
