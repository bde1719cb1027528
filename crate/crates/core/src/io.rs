//! Configuration files and on-disk artifacts.
//!
//! Text artifacts start with a `# <schema>` comment line; binary artifacts
//! carry their schema in the run manifest.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::beatnote::{EdgeStream, FreqEstimate};
use crate::optics_sim::{IntensityClass, RoundChoice, RoundRecord, TruthSample};
use crate::pairing::{Detector, TallyTable};
use crate::params::{validate, ParamError, ProtocolParams};
use crate::pipeline::{Analysis, DriftRow};

pub const EVENTS_SCHEMA: &str = "fmqkd-events/1";
pub const CHOICES_SCHEMA: &str = "fmqkd-choices/1";
pub const EDGES_SCHEMA: &str = "fmqkd-edges/1";
pub const ESTIMATES_SCHEMA: &str = "fmqkd-estimates/1";
pub const TRUTH_SCHEMA: &str = "fmqkd-truth/1";
pub const DRIFT_SCHEMA: &str = "fmqkd-drift/1";
pub const SWEEP_SCHEMA: &str = "fmqkd-sweep/1";
pub const TALLY_SCHEMA: &str = "fmqkd-tally/1";
pub const MANIFEST_SCHEMA: &str = "fmqkd-manifest/1";

/// Bytes per binary event record.
pub const EVENT_RECORD_LEN: usize = 9;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {err}", path.display())]
    Io { path: PathBuf, err: std::io::Error },
    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{}: {msg}", path.display())]
    Corrupt { path: PathBuf, msg: String },
    #[error("{}: {err}", path.display())]
    Params { path: PathBuf, err: ParamError },
}

impl IoError {
    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
        move |err| IoError::Io {
            path: path.to_path_buf(),
            err,
        }
    }

    fn corrupt(path: &Path, msg: impl Into<String>) -> IoError {
        IoError::Corrupt {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    fn csv(path: &Path, e: csv::Error) -> IoError {
        let line = e.position().map_or(0, |p| p.line() as usize);
        IoError::Parse {
            path: path.to_path_buf(),
            line,
            msg: e.to_string(),
        }
    }
}

/// Applies `key = value` lines on top of `base`. `#` starts a comment.
pub fn parse_config(text: &str, base: ProtocolParams) -> Result<ProtocolParams, (usize, ParamError)> {
    let mut p = base;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err((
                n + 1,
                ParamError::BadValue {
                    key: line.to_string(),
                    value: String::new(),
                },
            ));
        };
        p.set(key.trim(), value.trim()).map_err(|e| (n + 1, e))?;
    }
    Ok(p)
}

/// Reads and validates a configuration file over the built-in defaults.
pub fn load_config(path: &Path) -> Result<ProtocolParams, IoError> {
    let text = fs::read_to_string(path).map_err(IoError::io(path))?;
    let p = parse_config(&text, ProtocolParams::default()).map_err(|(line, e)| IoError::Parse {
        path: path.to_path_buf(),
        line,
        msg: e.to_string(),
    })?;
    validate(p).map_err(|err| IoError::Params {
        path: path.to_path_buf(),
        err,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    File::create(path).map(BufWriter::new).map_err(IoError::io(path))
}

fn finish(path: &Path, mut w: impl Write) -> Result<(), IoError> {
    w.flush().map_err(IoError::io(path))
}

/// Writes the schema comment and returns a CSV writer over `path`.
fn csv_writer(path: &Path, schema: &str) -> Result<csv::Writer<BufWriter<File>>, IoError> {
    let mut w = create(path)?;
    writeln!(w, "# {schema}").map_err(IoError::io(path))?;
    Ok(csv::Writer::from_writer(w))
}

fn csv_finish(path: &Path, w: csv::Writer<BufWriter<File>>) -> Result<(), IoError> {
    let inner = w.into_inner().map_err(|e| IoError::Io {
        path: path.to_path_buf(),
        err: e.into_error(),
    })?;
    finish(path, inner)
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>, IoError> {
    let f = File::open(path).map_err(IoError::io(path))?;
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(f))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, IoError> {
    csv_reader(path)?
        .deserialize()
        .map(|r| r.map_err(|e| IoError::csv(path, e)))
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, schema: &str, rows: impl IntoIterator<Item = T>) -> Result<(), IoError> {
    let mut w = csv_writer(path, schema)?;
    for row in rows {
        w.serialize(row).map_err(|e| IoError::csv(path, e))?;
    }
    csv_finish(path, w)
}

/// Little-endian `(round_index: u64, flags: u8)` records; bit0 = L, bit1 = R.
pub fn write_events(path: &Path, records: &[RoundRecord]) -> Result<(), IoError> {
    let mut w = create(path)?;
    for r in records {
        let flags = u8::from(r.click_l) | (u8::from(r.click_r) << 1);
        w.write_all(&r.round_index.to_le_bytes()).map_err(IoError::io(path))?;
        w.write_all(&[flags]).map_err(IoError::io(path))?;
    }
    finish(path, w)
}

pub fn read_events(path: &Path) -> Result<Vec<(u64, u8)>, IoError> {
    let bytes = fs::read(path).map_err(IoError::io(path))?;
    if bytes.len() % EVENT_RECORD_LEN != 0 {
        return Err(IoError::corrupt(
            path,
            format!("length {} is not a multiple of {EVENT_RECORD_LEN}", bytes.len()),
        ));
    }
    let mut out = Vec::with_capacity(bytes.len() / EVENT_RECORD_LEN);
    let mut last = None;
    for rec in bytes.chunks_exact(EVENT_RECORD_LEN) {
        let idx = u64::from_le_bytes(rec[..8].try_into().expect("8 bytes"));
        let flags = rec[8];
        if flags == 0 || flags > 3 {
            return Err(IoError::corrupt(
                path,
                format!("round {idx}: invalid flags {flags:#04x}"),
            ));
        }
        if last.is_some_and(|l| idx <= l) {
            return Err(IoError::corrupt(path, format!("round {idx} out of order")));
        }
        last = Some(idx);
        out.push((idx, flags));
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct ChoiceRow {
    round_index: u64,
    alice_class: IntensityClass,
    alice_phase: u32,
    bob_class: IntensityClass,
    bob_phase: u32,
}

/// Source choices of every record, one row per event.
pub fn write_choices(path: &Path, records: &[RoundRecord]) -> Result<(), IoError> {
    write_csv(
        path,
        CHOICES_SCHEMA,
        records.iter().map(|r| ChoiceRow {
            round_index: r.round_index,
            alice_class: r.alice.class,
            alice_phase: r.alice.phase_index,
            bob_class: r.bob.class,
            bob_phase: r.bob.phase_index,
        }),
    )
}

fn check_choice(path: &Path, params: &ProtocolParams, idx: u64, phases: [u32; 2]) -> Result<(), IoError> {
    if idx >= params.n_rounds {
        return Err(IoError::corrupt(
            path,
            format!("round {idx} beyond n_rounds={}", params.n_rounds),
        ));
    }
    if phases.iter().any(|&ph| ph >= params.d) {
        return Err(IoError::corrupt(path, format!("round {idx}: phase slice out of range")));
    }
    Ok(())
}

/// Joins a binary event dump with its choices file into round records.
pub fn read_records(events: &Path, choices: &Path, params: &ProtocolParams) -> Result<Vec<RoundRecord>, IoError> {
    let ev = read_events(events)?;
    let rows: Vec<ChoiceRow> = read_csv(choices)?;
    if rows.len() != ev.len() {
        return Err(IoError::corrupt(
            choices,
            format!("{} rows for {} events", rows.len(), ev.len()),
        ));
    }
    let period = params.period_s();
    ev.iter()
        .zip(rows)
        .map(|(&(idx, flags), row)| {
            if row.round_index != idx {
                return Err(IoError::corrupt(
                    choices,
                    format!("row for round {} does not match event round {idx}", row.round_index),
                ));
            }
            check_choice(choices, params, idx, [row.alice_phase, row.bob_phase])?;
            Ok(RoundRecord {
                round_index: idx,
                t: idx as f64 * period,
                alice: RoundChoice {
                    class: row.alice_class,
                    phase_index: row.alice_phase,
                },
                bob: RoundChoice {
                    class: row.bob_class,
                    phase_index: row.bob_phase,
                },
                click_l: flags & 1 != 0,
                click_r: flags & 2 != 0,
            })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct ClickRow {
    round_index: u64,
    detector: Detector,
    alice_class: IntensityClass,
    alice_phase: u32,
    bob_class: IntensityClass,
    bob_phase: u32,
}

/// Reads externally recorded single clicks.
pub fn read_click_csv(path: &Path, params: &ProtocolParams) -> Result<Vec<RoundRecord>, IoError> {
    let rows: Vec<ClickRow> = read_csv(path)?;
    let period = params.period_s();
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        check_choice(path, params, row.round_index, [row.alice_phase, row.bob_phase])?;
        if out
            .last()
            .is_some_and(|r: &RoundRecord| r.round_index >= row.round_index)
        {
            return Err(IoError::corrupt(
                path,
                format!("round {} out of order", row.round_index),
            ));
        }
        out.push(RoundRecord {
            round_index: row.round_index,
            t: row.round_index as f64 * period,
            alice: RoundChoice {
                class: row.alice_class,
                phase_index: row.alice_phase,
            },
            bob: RoundChoice {
                class: row.bob_class,
                phase_index: row.bob_phase,
            },
            click_l: row.detector == Detector::L,
            click_r: row.detector == Detector::R,
        });
    }
    Ok(out)
}

pub fn write_click_csv(path: &Path, records: &[RoundRecord]) -> Result<(), IoError> {
    write_csv(
        path,
        CHOICES_SCHEMA,
        records.iter().filter(|r| r.single_click()).map(|r| ClickRow {
            round_index: r.round_index,
            detector: if r.click_l { Detector::L } else { Detector::R },
            alice_class: r.alice.class,
            alice_phase: r.alice.phase_index,
            bob_class: r.bob.class,
            bob_phase: r.bob.phase_index,
        }),
    )
}

/// Raw little-endian `u64` picosecond timestamps.
pub fn write_edges_bin(path: &Path, edges: &EdgeStream) -> Result<(), IoError> {
    let mut w = create(path)?;
    for t in &edges.timestamps_ps {
        w.write_all(&t.to_le_bytes()).map_err(IoError::io(path))?;
    }
    finish(path, w)
}

#[derive(Debug, Serialize, Deserialize)]
struct EdgeRow {
    timestamp_ps: u64,
}

pub fn write_edges_csv(path: &Path, edges: &EdgeStream) -> Result<(), IoError> {
    write_csv(
        path,
        EDGES_SCHEMA,
        edges.timestamps_ps.iter().map(|&t| EdgeRow { timestamp_ps: t }),
    )
}

/// Reads an edge file; `.csv` is text, anything else the binary form.
pub fn read_edges(path: &Path) -> Result<EdgeStream, IoError> {
    let ts = if path.extension().is_some_and(|e| e == "csv") {
        read_csv::<EdgeRow>(path)?.into_iter().map(|r| r.timestamp_ps).collect()
    } else {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(IoError::io(path))?;
        if bytes.len() % 8 != 0 {
            return Err(IoError::corrupt(
                path,
                format!("length {} is not a multiple of 8", bytes.len()),
            ));
        }
        bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    };
    Ok(EdgeStream::from_timestamps(ts))
}

#[derive(Debug, Serialize, Deserialize)]
struct EstimateRow {
    t0_ps: u64,
    t1_ps: u64,
    delta_f_hz: f64,
}

pub fn write_estimates(path: &Path, estimates: &[FreqEstimate]) -> Result<(), IoError> {
    write_csv(
        path,
        ESTIMATES_SCHEMA,
        estimates.iter().map(|e| EstimateRow {
            t0_ps: (e.t0 * 1e12).round() as u64,
            t1_ps: (e.t1 * 1e12).round() as u64,
            delta_f_hz: e.delta_f_hat,
        }),
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthRow {
    round_index: u64,
    delta_f_hz: f64,
    theta_beat: f64,
    theta_quantum: f64,
}

/// Ground-truth sidecar for oracle tests.
pub fn write_truth(path: &Path, truth: &[TruthSample]) -> Result<(), IoError> {
    write_csv(
        path,
        TRUTH_SCHEMA,
        truth.iter().map(|t| TruthRow {
            round_index: t.round_index,
            delta_f_hz: t.delta_f_hz,
            theta_beat: t.theta_beat,
            theta_quantum: t.theta_quantum,
        }),
    )
}

#[derive(Debug, Serialize)]
struct DriftCsvRow {
    block: u64,
    start_round: u64,
    end_round: u64,
    z_pairs: u64,
    z_errors: u64,
    e_z: Option<f64>,
    x_pairs: u64,
    x_errors: u64,
    e_x: Option<f64>,
}

pub fn write_drift(path: &Path, rows: &[DriftRow]) -> Result<(), IoError> {
    write_csv(
        path,
        DRIFT_SCHEMA,
        rows.iter().map(|d| DriftCsvRow {
            block: d.block,
            start_round: d.start_round,
            end_round: d.end_round,
            z_pairs: d.z_pairs,
            z_errors: d.z_errors,
            e_z: d.e_z(),
            x_pairs: d.x_pairs,
            x_errors: d.x_errors,
            e_x: d.e_x(),
        }),
    )
}

/// Flat summary of one analysis, used for sweeps and CSV reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub l_max_s: f64,
    pub e_x: Option<f64>,
    pub x_pairs: u64,
    pub pairs: u64,
    pub e_z: Option<f64>,
    pub z_pairs: u64,
    pub y11_lower: f64,
    pub e11_upper: f64,
    pub k: f64,
    pub r: f64,
    pub r_clamped: f64,
    pub feasible: bool,
}

impl SummaryRow {
    pub fn of(a: &Analysis) -> Self {
        let r = &a.report;
        Self {
            l_max_s: a.l_max_s,
            e_x: r.e_x,
            x_pairs: r.m_x_matched,
            pairs: r.pairs_formed,
            e_z: r.e_z,
            z_pairs: r.m_z_signal,
            y11_lower: r.bounds.y11_lower,
            e11_upper: r.bounds.e11_upper,
            k: r.k,
            r: r.r,
            r_clamped: r.r_clamped,
            feasible: r.bounds.feasible,
        }
    }
}

pub fn write_summary_csv(path: &Path, schema: &str, rows: &[SummaryRow]) -> Result<(), IoError> {
    write_csv(path, schema, rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| IoError::Io {
        path: path.to_path_buf(),
        err: e.into(),
    })?;
    writeln!(w).map_err(IoError::io(path))?;
    finish(path, w)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(IoError::io(path))?;
    serde_json::from_str(&text).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Tally as written next to a report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TallyFile {
    pub schema: String,
    pub l_max_s: f64,
    pub x_uncompensated: u64,
    pub tally: TallyTable,
}

impl TallyFile {
    pub fn of(a: &Analysis) -> Self {
        Self {
            schema: TALLY_SCHEMA.to_string(),
            l_max_s: a.l_max_s,
            x_uncompensated: a.x_uncompensated,
            tally: a.tally,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub name: String,
    pub schema: String,
    pub bytes: u64,
    pub sha256: String,
}

pub fn digest_file(path: &Path, schema: &str) -> Result<FileDigest, IoError> {
    let bytes = fs::read(path).map_err(IoError::io(path))?;
    Ok(FileDigest {
        name: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        schema: schema.to_string(),
        bytes: bytes.len() as u64,
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

/// Simulated time span of a run, standing in for wall-clock timestamps so
/// manifests stay reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceBounds {
    pub n_rounds: u64,
    pub n_events: u64,
    pub n_edges: u64,
    pub first_event_round: Option<u64>,
    pub last_event_round: Option<u64>,
    pub t_end_ps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub params: ProtocolParams,
    pub trace: TraceBounds,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl RunManifest {
    pub fn new(command: &str, params: &ProtocolParams, trace: TraceBounds) -> Self {
        Self {
            schema: MANIFEST_SCHEMA.to_string(),
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed: params.seed,
            params: params.clone(),
            trace,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }
}
