use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fmqkd::io::{self, RunManifest};
use serde_json::Value;

fn fmqkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fmqkd"))
        .args(args)
        .output()
        .expect("spawn fmqkd")
}

fn ok(args: &[&str]) -> Output {
    let out = fmqkd(args);
    assert!(
        out.status.success(),
        "fmqkd {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: &str = "n_rounds=4e6";

fn simulate(dir: &Path, extra: &[&str]) {
    let mut args = vec!["simulate", "--set", SMALL, "--out", s(dir)];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn simulate_is_byte_identical_across_runs_and_workers() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs: Vec<PathBuf> = ["a", "b", "c"].iter().map(|d| tmp.path().join(d)).collect();
    simulate(&dirs[0], &["--workers", "1"]);
    simulate(&dirs[1], &["--workers", "1"]);
    simulate(&dirs[2], &["--workers", "3"]);
    for name in ["events.bin", "choices.csv", "edges.bin", "manifest.json"] {
        let first = fs::read(dirs[0].join(name)).unwrap();
        for d in &dirs[1..] {
            assert_eq!(first, fs::read(d.join(name)).unwrap(), "{name} differs");
        }
    }
}

#[test]
fn manifest_digests_match_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    simulate(tmp.path(), &["--truth", "--format", "csv"]);
    let manifest: RunManifest =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("manifest.json")).unwrap()).unwrap();
    let names: Vec<&str> = manifest.outputs.iter().map(|d| d.name.as_str()).collect();
    assert_eq!(
        names,
        ["events.bin", "choices.csv", "edges.bin", "edges.csv", "truth.csv"]
    );
    for d in &manifest.outputs {
        assert_eq!(d, &io::digest_file(&tmp.path().join(&d.name), &d.schema).unwrap());
    }
    assert_eq!(manifest.params.n_rounds, 4_000_000);
}

#[test]
fn truth_is_written_only_on_request() {
    let tmp = tempfile::tempdir().unwrap();
    simulate(tmp.path(), &[]);
    assert!(!tmp.path().join("truth.csv").exists());
}

#[test]
fn zero_rounds_give_empty_files_and_zero_report() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    ok(&["simulate", "--set", "n_rounds=0", "--out", s(&sim)]);
    assert_eq!(fs::metadata(sim.join("events.bin")).unwrap().len(), 0);
    assert_eq!(fs::metadata(sim.join("edges.bin")).unwrap().len(), 0);
    let manifest = json(sim.join("manifest.json"));
    assert_eq!(manifest["trace"]["n_events"], 0);

    let kr = tmp.path().join("kr");
    ok(&["keyrate", "--set", "n_rounds=0", "--input", s(&sim), "--out", s(&kr)]);
    let report = json(kr.join("report.json"));
    assert_eq!(report["k"], 0.0);
    assert_eq!(report["r"], 0.0);
    assert_eq!(report["pairs_formed"], 0);
}

#[test]
fn keyrate_report_is_self_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim, &[]);
    let kr = tmp.path().join("kr");
    let out = fmqkd(&["keyrate", "--set", SMALL, "--input", s(&sim), "--out", s(&kr)]);
    let report = json(kr.join("report.json"));
    let feasible = report["bounds"]["feasible"].as_bool().unwrap();
    assert_eq!(out.status.code(), Some(if feasible { 0 } else { 3 }));
    let (k, n_pair, r) = (
        report["k"].as_f64().unwrap(),
        report["n_pair"].as_f64().unwrap(),
        report["r"].as_f64().unwrap(),
    );
    assert_eq!(n_pair, 2e6);
    assert_eq!(r, k / n_pair);
    for f in ["tally.json", "drift.csv", "manifest.json"] {
        assert!(kr.join(f).exists(), "{f} missing");
    }
    let manifest = json(kr.join("manifest.json"));
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 3);
}

#[test]
fn infeasible_analysis_exits_3_with_report() {
    // Exact-count constraints on a small noisy sample are typically
    // inconsistent; each run must flag it through the exit code.
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim, &[]);
    let mut infeasible = 0;
    for (i, l) in ["2us", "10us", "50us"].iter().enumerate() {
        let kr = tmp.path().join(format!("kr{i}"));
        let out = fmqkd(&[
            "keyrate",
            "--set",
            SMALL,
            "--set",
            "decoy_band_sigma=0",
            "--l-max",
            l,
            "--input",
            s(&sim),
            "--out",
            s(&kr),
        ]);
        let report = json(kr.join("report.json"));
        let feasible = report["bounds"]["feasible"].as_bool().unwrap();
        assert_eq!(out.status.code(), Some(if feasible { 0 } else { 3 }));
        infeasible += usize::from(!feasible);
    }
    assert!(infeasible > 0);
}

#[test]
fn single_value_sweep_matches_keyrate() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim, &[]);
    let kr = tmp.path().join("kr");
    let sw = tmp.path().join("sw");
    fmqkd(&[
        "keyrate",
        "--set",
        SMALL,
        "--l-max",
        "5us",
        "--input",
        s(&sim),
        "--out",
        s(&kr),
    ]);
    fmqkd(&[
        "sweep",
        "--set",
        SMALL,
        "--l-max",
        "5us",
        "--input",
        s(&sim),
        "--out",
        s(&sw),
    ]);
    let report = json(kr.join("report.json"));
    let sweep = json(sw.join("sweep.json"));
    let rows = sweep["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    let row = &rows[0];
    assert_eq!(row["l_max_s"], 5e-6);
    assert_eq!(row["pairs"], report["pairs_formed"]);
    assert_eq!(row["k"], report["k"]);
    assert_eq!(row["r"], report["r"]);
    assert_eq!(row["e_x"], report["e_x"]);
    assert_eq!(row["y11_lower"], report["bounds"]["y11_lower"]);
}

#[test]
fn sweep_csv_has_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let sw = tmp.path().join("sw");
    fmqkd(&[
        "sweep",
        "--set",
        SMALL,
        "--l-max",
        "1us,10us,50us",
        "--format",
        "csv",
        "--out",
        s(&sw),
    ]);
    let text = fs::read_to_string(sw.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# fmqkd-sweep/1");
    assert_eq!(lines.len(), 2 + 3);
    let pairs: Vec<u64> = lines[2..]
        .iter()
        .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
        .collect();
    assert!(pairs.windows(2).all(|w| w[0] <= w[1]), "{pairs:?}");
}

#[test]
fn click_csv_input_matches_event_files() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim, &[]);
    let p = fmqkd::params::ProtocolParams {
        n_rounds: 4_000_000,
        ..Default::default()
    };
    let records = io::read_records(&sim.join("events.bin"), &sim.join("choices.csv"), &p).unwrap();
    let clicks = tmp.path().join("clicks.csv");
    io::write_click_csv(&clicks, &records).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    fmqkd(&["keyrate", "--set", SMALL, "--input", s(&sim), "--out", s(&a)]);
    fmqkd(&[
        "keyrate",
        "--set",
        SMALL,
        "--clicks",
        s(&clicks),
        "--edges",
        s(&sim.join("edges.bin")),
        "--out",
        s(&b),
    ]);
    assert_eq!(
        fs::read(a.join("tally.json")).unwrap(),
        fs::read(b.join("tally.json")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("report.json")).unwrap(),
        fs::read(b.join("report.json")).unwrap()
    );
}

#[test]
fn beat_test_recovers_offset() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["beat-test", "--set", "laser_linewidth_hz=0", "--out", s(tmp.path())]);
    let summary = json(tmp.path().join("beat_test.json"));
    assert!(summary["max_abs_freq_error_hz"].as_f64().unwrap() <= 1e3);
    assert!(summary["rms_compensation_error_rad"].as_f64().unwrap() < 1e-3);
    assert!(tmp.path().join("estimates.csv").exists());

    let again = tmp.path().join("again");
    ok(&[
        "beat-test",
        "--input",
        s(&tmp.path().join("edges.csv")),
        "--out",
        s(&again),
    ]);
    // Edge files carry no trace span, so replayed windows start at the first edge.
    let replay = json(again.join("beat_test.json"));
    let n = summary["n_estimates"].as_u64().unwrap();
    assert!((n - 1..=n).contains(&replay["n_estimates"].as_u64().unwrap()));
    assert!((replay["mean_delta_f_hz"].as_f64().unwrap() - 2e8).abs() <= 1e3);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(fmqkd(&["bogus"]).status.code(), Some(1));
    assert_eq!(fmqkd(&["keyrate"]).status.code(), Some(1));
    assert_eq!(fmqkd(&["--help"]).status.code(), Some(0));
    let missing = fmqkd(&[
        "keyrate",
        "--input",
        s(&tmp.path().join("none")),
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("events.bin"));
    let bad = fmqkd(&["simulate", "--set", "p_mu=0.9", "--out", s(tmp.path())]);
    assert_eq!(bad.status.code(), Some(2));
    let unknown = fmqkd(&["simulate", "--set", "no_such_key=1", "--out", s(tmp.path())]);
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn corrupt_events_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim, &[]);
    let events = sim.join("events.bin");
    let mut bytes = fs::read(&events).unwrap();
    bytes.pop();
    fs::write(&events, bytes).unwrap();
    let out = fmqkd(&[
        "keyrate",
        "--set",
        SMALL,
        "--input",
        s(&sim),
        "--out",
        s(&tmp.path().join("kr")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_files_load() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let schema = io::load_config(&root.join("schema.conf")).unwrap();
    assert_eq!(schema, fmqkd::params::ProtocolParams::default());
    let far = io::load_config(&root.join("table_297km.conf")).unwrap();
    let expect = fmqkd::params::ProtocolParams {
        n_rounds: far.n_rounds,
        drift_block_rounds: far.drift_block_rounds,
        ..fmqkd::params::ProtocolParams::table_297km()
    };
    assert_eq!(far, expect);
}
