use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fmqkd::beatnote::{compensation_from, sliding_estimates, synth_edges, wrap_to_pi, EdgeStream};
use fmqkd::exec::Executor;
use fmqkd::io::{self, RunManifest, SummaryRow, TallyFile, TraceBounds};
use fmqkd::optics_sim::{DeterministicPhase, PhasePath, RoundRecord};
use fmqkd::params::{validate, ProtocolParams};
use fmqkd::pipeline::{self, Analysis};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "fmqkd",
    version,
    about = "Frequency-matching mode-pairing QKD simulator and key-rate analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate rounds and write click events, beat-note edges and a manifest.
    Simulate(SimulateArgs),
    /// Pair, sift and tally recorded events, then evaluate the key rate.
    Keyrate(KeyrateArgs),
    /// Re-analyze one event stream for several maximum pairing times.
    Sweep(SweepArgs),
    /// Synthesize or read a beat note and report frequency-estimation accuracy.
    BeatTest(BeatArgs),
}

#[derive(Args)]
struct Common {
    /// Configuration file (key = value); built-in defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set n_rounds=1e8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Also write the ground-truth sidecar (for oracle tests only).
    #[arg(long)]
    truth: bool,
    /// `csv` additionally writes the edge stream as text.
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args)]
struct InputArgs {
    /// Directory holding events.bin, choices.csv and edges.bin (or edges.csv).
    #[arg(long)]
    input: Option<PathBuf>,
    /// External single-click CSV instead of events.bin + choices.csv.
    #[arg(long)]
    clicks: Option<PathBuf>,
    /// Edge file (binary, or text with a .csv extension).
    #[arg(long)]
    edges: Option<PathBuf>,
    /// Rounds per error-drift row.
    #[arg(long)]
    blocks: Option<u64>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args)]
struct KeyrateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    input: InputArgs,
    /// Maximum pairing time, e.g. `10us` or `1e-5`.
    #[arg(long, value_parser = parse_duration)]
    l_max: Option<f64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    input: InputArgs,
    /// Comma-separated pairing times; simulates from the configuration when
    /// no input is given.
    #[arg(long, value_delimiter = ',', value_parser = parse_duration,
          default_value = "1us,5us,10us,20us,50us")]
    l_max: Vec<f64>,
}

#[derive(Args)]
struct BeatArgs {
    #[command(flatten)]
    common: Common,
    /// Estimate from this edge file instead of synthesizing a beat note.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Length of the synthesized trace.
    #[arg(long, value_parser = parse_duration, default_value = "20us")]
    duration: f64,
}

fn parse_duration(s: &str) -> Result<f64, String> {
    let s = s.trim();
    let (num, scale) = [("ns", 1e-9), ("us", 1e-6), ("ms", 1e-3), ("s", 1.0)]
        .iter()
        .find_map(|(suffix, scale)| s.strip_suffix(suffix).map(|n| (n, *scale)))
        .unwrap_or((s, 1.0));
    let num = num.trim();
    let bad = || format!("invalid duration `{s}`");
    let m: f64 = num.parse().map_err(|_| bad())?;
    // Shift the decimal exponent textually so `5us` parses to exactly 5e-6.
    let v = if num.contains(['e', 'E']) || scale == 1.0 {
        m * scale
    } else {
        format!("{num}e{}", scale.log10().round() as i32)
            .parse()
            .map_err(|_| bad())?
    };
    if !(v >= 0.0 && v.is_finite()) {
        return Err(bad());
    }
    Ok(v)
}

fn load_params(c: &Common) -> Result<ProtocolParams> {
    let mut p = match &c.config {
        Some(path) => io::load_config(path)?,
        None => ProtocolParams::default(),
    };
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("override `{kv}` is not KEY=VALUE"))?;
        p.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = c.seed {
        p.seed = seed;
    }
    Ok(validate(p)?)
}

fn executor(c: &Common) -> Executor {
    match c.workers {
        0 => Executor::default(),
        n => Executor::with_workers(n),
    }
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn trace_of(n_rounds: u64, records: &[RoundRecord], edges: &EdgeStream) -> TraceBounds {
    TraceBounds {
        n_rounds,
        n_events: records.len() as u64,
        n_edges: edges.len() as u64,
        first_event_round: records.first().map(|r| r.round_index),
        last_event_round: records.last().map(|r| r.round_index),
        t_end_ps: edges.t_end_ps,
    }
}

fn simulate(args: &SimulateArgs) -> Result<bool> {
    let p = load_params(&args.common)?;
    let out = &args.common.out;
    prepare_out(out)?;
    let run = pipeline::simulate(&p, executor(&args.common), args.truth);
    let mut written = Vec::new();
    let events = out.join("events.bin");
    io::write_events(&events, &run.clicks)?;
    written.push((events, io::EVENTS_SCHEMA));
    let choices = out.join("choices.csv");
    io::write_choices(&choices, &run.clicks)?;
    written.push((choices, io::CHOICES_SCHEMA));
    let edges = out.join("edges.bin");
    io::write_edges_bin(&edges, &run.edges)?;
    written.push((edges, io::EDGES_SCHEMA));
    if args.format == Format::Csv {
        let edges = out.join("edges.csv");
        io::write_edges_csv(&edges, &run.edges)?;
        written.push((edges, io::EDGES_SCHEMA));
    }
    if args.truth {
        let truth = out.join("truth.csv");
        io::write_truth(&truth, &run.truth)?;
        written.push((truth, io::TRUTH_SCHEMA));
    }
    let mut manifest = RunManifest::new("simulate", &p, trace_of(p.n_rounds, &run.clicks, &run.edges));
    for (path, schema) in &written {
        manifest.outputs.push(io::digest_file(path, schema)?);
    }
    io::write_json(&out.join("manifest.json"), &manifest)?;
    eprintln!(
        "simulated {} rounds: {} click events, {} edges -> {}",
        p.n_rounds,
        run.clicks.len(),
        run.edges.len(),
        out.display()
    );
    Ok(true)
}

/// Loaded inputs plus the files they came from.
struct Inputs {
    records: Vec<RoundRecord>,
    edges: EdgeStream,
    files: Vec<(PathBuf, &'static str)>,
}

fn load_inputs(args: &InputArgs, p: &ProtocolParams) -> Result<Inputs> {
    let mut files = Vec::new();
    let records = if let Some(clicks) = &args.clicks {
        files.push((clicks.clone(), io::CHOICES_SCHEMA));
        io::read_click_csv(clicks, p)?
    } else {
        let Some(dir) = &args.input else {
            bail!("one of --input or --clicks is required");
        };
        let (ev, ch) = (dir.join("events.bin"), dir.join("choices.csv"));
        files.push((ev.clone(), io::EVENTS_SCHEMA));
        files.push((ch.clone(), io::CHOICES_SCHEMA));
        io::read_records(&ev, &ch, p)?
    };
    let edge_path = match (&args.edges, &args.input) {
        (Some(e), _) => e.clone(),
        (None, Some(dir)) if dir.join("edges.bin").exists() => dir.join("edges.bin"),
        (None, Some(dir)) => dir.join("edges.csv"),
        (None, None) => bail!("--edges is required with --clicks"),
    };
    files.push((edge_path.clone(), io::EDGES_SCHEMA));
    let edges = io::read_edges(&edge_path)?;
    Ok(Inputs { records, edges, files })
}

fn apply_input_overrides(p: &mut ProtocolParams, args: &InputArgs) -> Result<()> {
    if let Some(b) = args.blocks {
        p.drift_block_rounds = b;
    }
    *p = validate(p.clone())?;
    Ok(())
}

fn write_manifest(
    out: &Path,
    command: &str,
    p: &ProtocolParams,
    inputs: &Inputs,
    outputs: &[(PathBuf, &str)],
) -> Result<()> {
    let mut manifest = RunManifest::new(command, p, trace_of(p.n_rounds, &inputs.records, &inputs.edges));
    for (path, schema) in &inputs.files {
        manifest.inputs.push(io::digest_file(path, schema)?);
    }
    for (path, schema) in outputs {
        manifest.outputs.push(io::digest_file(path, schema)?);
    }
    io::write_json(&out.join("manifest.json"), &manifest)?;
    Ok(())
}

fn keyrate(args: &KeyrateArgs) -> Result<bool> {
    let mut p = load_params(&args.common)?;
    if let Some(l) = args.l_max {
        p.l_max_s = l;
    }
    apply_input_overrides(&mut p, &args.input)?;
    let inputs = load_inputs(&args.input, &p)?;
    let out = &args.common.out;
    prepare_out(out)?;
    let a = pipeline::analyze(&inputs.records, &inputs.edges, &p, p.n_rounds, executor(&args.common))?;
    let mut outputs = Vec::new();
    match args.input.format {
        Format::Json => {
            let path = out.join("report.json");
            io::write_json(&path, &a.report)?;
            outputs.push((path, a.report.schema.as_str()));
        }
        Format::Csv => {
            let path = out.join("report.csv");
            io::write_summary_csv(&path, io::SWEEP_SCHEMA, &[SummaryRow::of(&a)])?;
            outputs.push((path, io::SWEEP_SCHEMA));
        }
    }
    let tally = out.join("tally.json");
    io::write_json(&tally, &TallyFile::of(&a))?;
    outputs.push((tally, io::TALLY_SCHEMA));
    let drift = out.join("drift.csv");
    io::write_drift(&drift, &a.drift)?;
    outputs.push((drift, io::DRIFT_SCHEMA));
    write_manifest(out, "keyrate", &p, &inputs, &outputs)?;
    print_summary(&a);
    Ok(a.report.bounds.feasible)
}

fn print_summary(a: &Analysis) {
    let r = &a.report;
    let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{:.4}%", 100.0 * v));
    eprintln!(
        "l_max={:.3e}s pairs={} E_Z={} E_X={} Y11>={:.4e} e11<={:.4} K={:.4e} R={:.4e}{}",
        a.l_max_s,
        r.pairs_formed,
        fmt(r.e_z),
        fmt(r.e_x),
        r.bounds.y11_lower,
        r.e11_ph,
        r.k,
        r.r,
        if r.bounds.feasible {
            ""
        } else {
            " (decoy program infeasible)"
        }
    );
}

fn sweep(args: &SweepArgs) -> Result<bool> {
    let mut p = load_params(&args.common)?;
    apply_input_overrides(&mut p, &args.input)?;
    if args.l_max.is_empty() {
        bail!("empty --l-max list");
    }
    let exec = executor(&args.common);
    let inputs = if args.input.input.is_some() || args.input.clicks.is_some() {
        load_inputs(&args.input, &p)?
    } else {
        let run = pipeline::simulate(&p, exec, false);
        Inputs {
            records: run.clicks,
            edges: run.edges,
            files: Vec::new(),
        }
    };
    let out = &args.common.out;
    prepare_out(out)?;
    let results = pipeline::sweep(&inputs.records, &inputs.edges, &p, p.n_rounds, &args.l_max, exec)?;
    let rows: Vec<SummaryRow> = results.iter().map(SummaryRow::of).collect();
    let path = match args.input.format {
        Format::Csv => {
            let path = out.join("sweep.csv");
            io::write_summary_csv(&path, io::SWEEP_SCHEMA, &rows)?;
            path
        }
        Format::Json => {
            let path = out.join("sweep.json");
            io::write_json(&path, &serde_json::json!({ "schema": io::SWEEP_SCHEMA, "rows": rows }))?;
            path
        }
    };
    write_manifest(out, "sweep", &p, &inputs, &[(path, io::SWEEP_SCHEMA)])?;
    for a in &results {
        print_summary(a);
    }
    Ok(results.iter().all(|a| a.report.bounds.feasible))
}

#[derive(serde::Serialize)]
struct BeatSummary {
    schema: &'static str,
    synthesized: bool,
    n_edges: usize,
    n_estimates: usize,
    mean_delta_f_hz: Option<f64>,
    rms_freq_error_hz: Option<f64>,
    max_abs_freq_error_hz: Option<f64>,
    /// RMS error of the compensation phase between windows `l_max` apart.
    rms_compensation_error_rad: Option<f64>,
}

fn beat_test(args: &BeatArgs) -> Result<bool> {
    let p = load_params(&args.common)?;
    let out = &args.common.out;
    prepare_out(out)?;
    let window = p.beat_window_s;
    let (edges, path) = match &args.input {
        Some(input) => (io::read_edges(input)?, None),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
            let det = DeterministicPhase {
                theta0: 0.0,
                delta_f0_hz: p.delta_f0_hz,
                drift_hz_per_s: p.delta_f_drift_hz_per_s,
            };
            let n = (args.duration * p.rep_rate_hz).ceil() as usize;
            let times: Vec<f64> = (0..=n).map(|i| i as f64 * p.period_s()).collect();
            let path = PhasePath::sample(det, TAU * 2.0 * p.laser_linewidth_hz, &times, &mut rng);
            let edges = synth_edges(&path, 0.0, args.duration);
            io::write_edges_csv(&out.join("edges.csv"), &edges)?;
            (edges, Some(path))
        }
    };
    let estimates = sliding_estimates(&edges, window, 0.5 * window);
    io::write_estimates(&out.join("estimates.csv"), &estimates)?;
    let n = estimates.len();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let rms = |v: &[f64]| mean(&v.iter().map(|x| x * x).collect::<Vec<_>>()).map(f64::sqrt);
    let freqs: Vec<f64> = estimates.iter().map(|e| e.delta_f_hat).collect();
    let mut summary = BeatSummary {
        schema: "fmqkd-beat-test/1",
        synthesized: path.is_some(),
        n_edges: edges.len(),
        n_estimates: n,
        mean_delta_f_hz: mean(&freqs),
        rms_freq_error_hz: None,
        max_abs_freq_error_hz: None,
        rms_compensation_error_rad: None,
    };
    if let Some(path) = &path {
        let errs: Vec<f64> = estimates
            .iter()
            .map(|e| e.delta_f_hat - path.delta_f(e.midpoint()))
            .collect();
        summary.rms_freq_error_hz = rms(&errs);
        summary.max_abs_freq_error_hz = errs.iter().map(|e| e.abs()).reduce(f64::max);
        let lag = ((p.l_max_s / window).round() as usize).max(1);
        let comp: Vec<f64> = (0..n.saturating_sub(lag))
            .map(|i| {
                let (ei, ej) = (&estimates[i], &estimates[i + lag]);
                let (ti, tj) = (ei.midpoint(), ej.midpoint());
                wrap_to_pi(compensation_from(ei, ti, ej, tj) - (path.theta(tj) - path.theta(ti)))
            })
            .collect();
        summary.rms_compensation_error_rad = rms(&comp);
    }
    io::write_json(&out.join("beat_test.json"), &summary)?;
    eprintln!(
        "{} edges, {} windows, mean delta_f {:?} Hz, rms error {:?} Hz, rms compensation error {:?} rad",
        summary.n_edges,
        summary.n_estimates,
        summary.mean_delta_f_hz,
        summary.rms_freq_error_hz,
        summary.rms_compensation_error_rad
    );
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Keyrate(a) => keyrate(a),
        Command::Sweep(a) => sweep(a),
        Command::BeatTest(a) => beat_test(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_INFEASIBLE),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_DATA)
        }
    }
}
