//! End-to-end runs: simulation with beat-note synthesis, and analysis from
//! click records plus an edge stream to a key report.

use serde::{Deserialize, Serialize};

use crate::beatnote::{compensation_from, estimate_frequency, synth_edges, EdgeStream, FreqEstimate};
use crate::decoy::{self, DecoyError, KeyReport};
use crate::exec::Executor;
use crate::optics_sim::{RoundRecord, Simulator, TruthSample};
use crate::pairing::{assign_basis, make_pair, pair_clicks, postselect, Basis, SingleClick, TallyTable};
use crate::params::ProtocolParams;

/// Click records and photodiode edges of one simulated run.
#[derive(Debug, Clone, Default)]
pub struct SimRun {
    pub n_rounds: u64,
    pub clicks: Vec<RoundRecord>,
    pub edges: EdgeStream,
    /// Empty unless requested.
    pub truth: Vec<TruthSample>,
}

/// Simulates every block and synthesizes beat-note edges around each
/// single-click round. Output does not depend on the executor.
pub fn simulate(params: &ProtocolParams, exec: Executor, keep_truth: bool) -> SimRun {
    let sim = Simulator::new(params);
    let blocks = exec.map_blocks(sim.n_blocks(), |k| {
        let mut out = sim.run_block(k);
        let edges = EdgeStream::merge(out.windows.iter().map(|w| synth_edges(w, w.t_start(), w.t_end())));
        if !keep_truth {
            out.truth = Vec::new();
        }
        (out.clicks, out.truth, edges)
    });
    let mut run = SimRun {
        n_rounds: params.n_rounds,
        ..SimRun::default()
    };
    let mut edge_parts = Vec::with_capacity(blocks.len());
    for (clicks, truth, edges) in blocks {
        run.clicks.extend(clicks);
        run.truth.extend(truth);
        edge_parts.push(edges);
    }
    run.edges = EdgeStream::merge(edge_parts);
    run
}

/// Single clicks with the beat-note estimate of the window centered on each.
#[derive(Debug, Clone, Default)]
pub struct Prepared {
    pub clicks: Vec<SingleClick>,
    pub estimates: Vec<Option<FreqEstimate>>,
}

pub fn prepare(records: &[RoundRecord], edges: &EdgeStream, params: &ProtocolParams, exec: Executor) -> Prepared {
    let clicks: Vec<SingleClick> = postselect(records).collect();
    const CHUNK: usize = 1 << 14;
    let half = 0.5 * params.beat_window_s;
    let n_chunks = clicks.len().div_ceil(CHUNK) as u64;
    let estimates = exec
        .map_blocks(n_chunks, |c| {
            let lo = c as usize * CHUNK;
            let hi = (lo + CHUNK).min(clicks.len());
            clicks[lo..hi]
                .iter()
                .map(|s| estimate_frequency(edges, s.t - half, s.t + half).ok())
                .collect::<Vec<_>>()
        })
        .into_iter()
        .flatten()
        .collect();
    Prepared { clicks, estimates }
}

/// Pair and error counts of one fixed-size block of rounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftRow {
    pub block: u64,
    pub start_round: u64,
    pub end_round: u64,
    pub z_pairs: u64,
    pub z_errors: u64,
    pub x_pairs: u64,
    pub x_errors: u64,
}

impl DriftRow {
    pub fn e_z(&self) -> Option<f64> {
        (self.z_pairs > 0).then(|| self.z_errors as f64 / self.z_pairs as f64)
    }

    pub fn e_x(&self) -> Option<f64> {
        (self.x_pairs > 0).then(|| self.x_errors as f64 / self.x_pairs as f64)
    }
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub l_max_s: f64,
    pub tally: TallyTable,
    pub report: KeyReport,
    pub drift: Vec<DriftRow>,
    /// X pairs dropped because a click had no usable beat-note estimate.
    pub x_uncompensated: u64,
}

/// Pairs, sifts and tallies prepared clicks, then evaluates the key rate.
/// Drift rows count Z pairs of the (SIGNAL, SIGNAL) key cell and matched X
/// pairs, attributed to the block of the pair's first click.
pub fn analyze_prepared(
    prepared: &Prepared,
    params: &ProtocolParams,
    n_rounds: u64,
    l_max_s: f64,
) -> Result<Analysis, DecoyError> {
    use crate::optics_sim::IntensityClass::{Decoy, Signal};
    let clicks = &prepared.clicks;
    let index = pair_clicks(clicks, l_max_s, params.pairing);
    let drift_len = params.drift_block_rounds.max(1);
    let n_drift = n_rounds.div_ceil(drift_len);
    let mut drift: Vec<DriftRow> = (0..n_drift)
        .map(|b| DriftRow {
            block: b,
            start_round: b * drift_len,
            end_round: ((b + 1) * drift_len).min(n_rounds),
            z_pairs: 0,
            z_errors: 0,
            x_pairs: 0,
            x_errors: 0,
        })
        .collect();
    let mut tally = TallyTable::default();
    let mut x_uncompensated = 0;
    for &(i, j) in &index {
        let (first, second) = (clicks[i], clicks[j]);
        let comp = match assign_basis(&first, &second).0 {
            Basis::X => match (&prepared.estimates[i], &prepared.estimates[j]) {
                (Some(ei), Some(ej)) => Some(compensation_from(ei, first.t, ej, second.t)),
                _ => {
                    x_uncompensated += 1;
                    None
                }
            },
            _ => None,
        };
        let pair = make_pair(first, second, comp, params);
        tally.record(&pair);
        let Some(row) = drift.get_mut((first.round_index / drift_len) as usize) else {
            continue;
        };
        let err = u64::from(pair.is_error() == Some(true));
        match (pair.basis, pair.intensity_combo) {
            (Basis::Z, (Signal, Signal)) => {
                row.z_pairs += 1;
                row.z_errors += err;
            }
            (Basis::X, (Signal, Signal) | (Decoy, Decoy)) => {
                row.x_pairs += 1;
                row.x_errors += err;
            }
            _ => {}
        }
    }
    let report = decoy::evaluate(&tally, params, n_rounds)?;
    Ok(Analysis {
        l_max_s,
        tally,
        report,
        drift,
        x_uncompensated,
    })
}

pub fn analyze(
    records: &[RoundRecord],
    edges: &EdgeStream,
    params: &ProtocolParams,
    n_rounds: u64,
    exec: Executor,
) -> Result<Analysis, DecoyError> {
    let prepared = prepare(records, edges, params, exec);
    analyze_prepared(&prepared, params, n_rounds, params.l_max_s)
}

/// One analysis per pairing limit over the same records.
pub fn sweep(
    records: &[RoundRecord],
    edges: &EdgeStream,
    params: &ProtocolParams,
    n_rounds: u64,
    l_max_list: &[f64],
    exec: Executor,
) -> Result<Vec<Analysis>, DecoyError> {
    let prepared = prepare(records, edges, params, exec);
    l_max_list
        .iter()
        .map(|&l| analyze_prepared(&prepared, params, n_rounds, l))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ProtocolParams {
        let mut p = ProtocolParams::table_197km();
        p.channel_loss_db_a = 5.0;
        p.channel_loss_db_b = 5.0;
        p.n_rounds = 400_000;
        p.block_rounds = 50_000;
        p.drift_block_rounds = 100_000;
        p
    }

    #[test]
    fn executor_does_not_change_output() {
        let p = small();
        let a = simulate(&p, Executor::Sequential, true);
        let b = simulate(&p, Executor::Parallel { threads: 3 }, true);
        assert_eq!(a.clicks, b.clicks);
        assert_eq!(a.edges, b.edges);
        assert_eq!(a.truth, b.truth);
        assert!(!a.edges.is_empty());
    }

    #[test]
    fn zero_rounds_give_zero_report() {
        let mut p = small();
        p.n_rounds = 0;
        let run = simulate(&p, Executor::Sequential, false);
        assert!(run.clicks.is_empty() && run.edges.is_empty());
        let a = analyze(&run.clicks, &run.edges, &p, 0, Executor::Sequential).unwrap();
        assert_eq!(a.report.k, 0.0);
        assert_eq!(a.report.r, 0.0);
        assert!(a.drift.is_empty());
    }

    #[test]
    fn report_rate_is_key_over_pairs() {
        let p = small();
        let run = simulate(&p, Executor::default(), false);
        let a = analyze(&run.clicks, &run.edges, &p, p.n_rounds, Executor::default()).unwrap();
        assert_eq!(a.report.r, a.report.k / a.report.n_pair);
        assert!(a.report.k <= a.report.m11_z);
        assert_eq!(a.drift.len(), 4);
        let z: u64 = a.drift.iter().map(|d| d.z_pairs).sum();
        assert_eq!(z, a.tally.z[2][2].m);
        assert_eq!(a.x_uncompensated, 0);
    }

    #[test]
    fn single_entry_sweep_matches_analysis() {
        let p = small();
        let run = simulate(&p, Executor::Sequential, false);
        let a = analyze(&run.clicks, &run.edges, &p, p.n_rounds, Executor::Sequential).unwrap();
        let s = sweep(
            &run.clicks,
            &run.edges,
            &p,
            p.n_rounds,
            &[p.l_max_s],
            Executor::Sequential,
        )
        .unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].report, a.report);
    }
}
