//! Photodiode beat note between the two frequency-matching beams.
//!
//! The beat signal is `cos Θ(t)`. A zero-level comparator with rising-edge
//! polarity fires where `Θ ≡ 3π/2 (mod 2π)`, and a time-to-digital converter
//! stamps each edge with 1 ps resolution. Each edge therefore pins the
//! absolute beat phase modulo 2π; counting edges inside a short window gives
//! the frequency offset, and the two together reconstruct the phase at any
//! nearby time.

use std::f64::consts::{PI, TAU};

use thiserror::Error;

use crate::optics_sim::PhasePath;

/// Phase of the beat note at every comparator edge.
pub const EDGE_PHASE: f64 = 1.5 * PI;

const PS_PER_S: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BeatError {
    #[error("insufficient edges: {found} in window [{t0:e}, {t1:e}] s")]
    InsufficientEdges { found: usize, t0: f64, t1: f64 },
    #[error("no covering estimate for t = {0:e} s")]
    NoCoveringEstimate(f64),
}

/// Comparator rising edges, quantized to integer picoseconds.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EdgeStream {
    /// Strictly increasing timestamps in ps.
    pub timestamps_ps: Vec<u64>,
    pub t_start_ps: u64,
    pub t_end_ps: u64,
}

impl EdgeStream {
    pub fn from_timestamps(mut timestamps_ps: Vec<u64>) -> Self {
        timestamps_ps.sort_unstable();
        timestamps_ps.dedup();
        let t_start_ps = timestamps_ps.first().copied().unwrap_or(0);
        let t_end_ps = timestamps_ps.last().copied().unwrap_or(0);
        Self {
            timestamps_ps,
            t_start_ps,
            t_end_ps,
        }
    }

    /// Concatenates gated segments; edges seen by overlapping gates are kept once.
    pub fn merge<I: IntoIterator<Item = EdgeStream>>(streams: I) -> Self {
        let mut start = u64::MAX;
        let mut end = 0;
        let mut all = Vec::new();
        for s in streams {
            start = start.min(s.t_start_ps);
            end = end.max(s.t_end_ps);
            all.extend(s.timestamps_ps);
        }
        let mut merged = Self::from_timestamps(all);
        if start <= end {
            merged.t_start_ps = start;
            merged.t_end_ps = end;
        }
        merged
    }

    pub fn len(&self) -> usize {
        self.timestamps_ps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps_ps.is_empty()
    }

    pub fn times_s(&self) -> impl Iterator<Item = f64> + '_ {
        self.timestamps_ps.iter().map(|&ps| ps as f64 / PS_PER_S)
    }

    /// Edges inside `[t0_ps, t1_ps]`.
    pub fn in_window(&self, t0_ps: u64, t1_ps: u64) -> &[u64] {
        let lo = self.timestamps_ps.partition_point(|&t| t < t0_ps);
        let hi = self.timestamps_ps.partition_point(|&t| t <= t1_ps);
        &self.timestamps_ps[lo..hi.max(lo)]
    }
}

fn to_ps(t: f64) -> u64 {
    (t * PS_PER_S).round().max(0.0) as u64
}

/// Locates every rising zero crossing of `cos Θ(t)` in `[t_start, t_end]`.
pub fn synth_edges(path: &PhasePath, t_start: f64, t_end: f64) -> EdgeStream {
    let mut stamps = Vec::new();
    let knots: Vec<f64> = std::iter::once(t_start)
        .chain(path.samples.iter().map(|s| s.0).filter(|&t| t > t_start && t < t_end))
        .chain(std::iter::once(t_end))
        .collect();
    for seg in knots.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        if b <= a {
            continue;
        }
        let (ta, tb) = (path.theta(a), path.theta(b));
        // Levels EDGE_PHASE + 2πn with ta < level <= tb.
        let first = ((ta - EDGE_PHASE) / TAU).floor() as i64 + 1;
        let last = ((tb - EDGE_PHASE) / TAU).floor() as i64;
        for n in first..=last {
            let level = EDGE_PHASE + TAU * n as f64;
            stamps.push(to_ps(bisect(|t| path.theta(t) - level, a, b)));
        }
    }
    let mut stream = EdgeStream::from_timestamps(stamps);
    stream.t_start_ps = to_ps(t_start);
    stream.t_end_ps = to_ps(t_end);
    stream
}

/// Root of an increasing-through-zero function on `[lo, hi]`, to well below 1 ps.
fn bisect<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || hi - lo < 1e-16 {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Frequency offset measured by period counting in one window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreqEstimate {
    pub t0: f64,
    pub t1: f64,
    pub delta_f_hat: f64,
    pub n_periods: usize,
    /// First edge inside the window.
    pub anchor_time: f64,
    pub anchor_phase: f64,
}

impl FreqEstimate {
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.t0 + self.t1)
    }

    /// Distance from `t` to the window, zero inside it.
    pub fn distance(&self, t: f64) -> f64 {
        (self.t0 - t).max(t - self.t1).max(0.0)
    }
}

/// Counts inter-edge intervals inside `[t0, t1]` and divides by their span.
pub fn estimate_frequency(edges: &EdgeStream, t0: f64, t1: f64) -> Result<FreqEstimate, BeatError> {
    let inside = edges.in_window(to_ps(t0), to_ps(t1));
    if inside.len() < 2 {
        return Err(BeatError::InsufficientEdges {
            found: inside.len(),
            t0,
            t1,
        });
    }
    let first = inside[0];
    let last = inside[inside.len() - 1];
    let n_periods = inside.len() - 1;
    Ok(FreqEstimate {
        t0,
        t1,
        delta_f_hat: n_periods as f64 * PS_PER_S / (last - first) as f64,
        n_periods,
        anchor_time: first as f64 / PS_PER_S,
        anchor_phase: EDGE_PHASE,
    })
}

/// Beat phase reconstructed from one estimate, reduced to `[0, 2π)`.
pub fn phase_at(estimate: &FreqEstimate, t: f64) -> f64 {
    let cycles = estimate.delta_f_hat * (t - estimate.anchor_time);
    (estimate.anchor_phase + TAU * cycles.fract()).rem_euclid(TAU)
}

/// Phase accumulated by the frequency offset from `t_i` to `t_j`, using
/// `est_i` near `t_i` and `est_j` near `t_j`. With the same estimate on both
/// sides this is `2π Δf̂ (t_j − t_i)`; with different ones each side is
/// anchored to its own measured edges.
pub fn compensation_from(est_i: &FreqEstimate, t_i: f64, est_j: &FreqEstimate, t_j: f64) -> f64 {
    (phase_at(est_j, t_j) - phase_at(est_i, t_i)).rem_euclid(TAU)
}

/// Window estimates ordered by midpoint, for nearest-window lookups.
#[derive(Debug, Clone, Default)]
pub struct EstimateSet {
    estimates: Vec<FreqEstimate>,
}

impl EstimateSet {
    pub fn new(mut estimates: Vec<FreqEstimate>) -> Self {
        estimates.sort_by(|a, b| a.midpoint().total_cmp(&b.midpoint()));
        Self { estimates }
    }

    pub fn as_slice(&self) -> &[FreqEstimate] {
        &self.estimates
    }

    /// Estimate whose window midpoint is nearest to `t`.
    pub fn nearest(&self, t: f64) -> Option<&FreqEstimate> {
        let i = self.estimates.partition_point(|e| e.midpoint() < t);
        let below = i.checked_sub(1).map(|k| &self.estimates[k]);
        let above = self.estimates.get(i);
        match (below, above) {
            (Some(b), Some(a)) => {
                if t - b.midpoint() <= a.midpoint() - t {
                    Some(b)
                } else {
                    Some(a)
                }
            }
            (b, a) => b.or(a),
        }
    }
}

/// Compensation phase between `t_i` and `t_j` from the nearest windows. A
/// window farther than `max_distance` from its time point does not cover it.
pub fn compensation_between(estimates: &EstimateSet, t_i: f64, t_j: f64, max_distance: f64) -> Result<f64, BeatError> {
    let cover = |t: f64| {
        estimates
            .nearest(t)
            .filter(|e| e.distance(t) <= max_distance)
            .ok_or(BeatError::NoCoveringEstimate(t))
    };
    let est_i = cover(t_i)?;
    let est_j = cover(t_j)?;
    Ok(compensation_from(est_i, t_i, est_j, t_j))
}

/// Sliding windows of length `window_s` advanced by `step_s`; windows with
/// fewer than two edges are skipped.
pub fn sliding_estimates(edges: &EdgeStream, window_s: f64, step_s: f64) -> Vec<FreqEstimate> {
    let start = edges.t_start_ps as f64 / PS_PER_S;
    let end = edges.t_end_ps as f64 / PS_PER_S;
    let mut out = Vec::new();
    let mut k = 0u64;
    loop {
        let t0 = start + k as f64 * step_s;
        if t0 + window_s > end + 0.5 / PS_PER_S {
            break;
        }
        if let Ok(e) = estimate_frequency(edges, t0, t0 + window_s) {
            out.push(e);
        }
        k += 1;
    }
    out
}

/// One estimate per center time over `[c − w/2, c + w/2]`.
pub fn gated_estimates(edges: &EdgeStream, centers: &[f64], window_s: f64) -> Vec<Option<FreqEstimate>> {
    centers
        .iter()
        .map(|&c| estimate_frequency(edges, c - 0.5 * window_s, c + 0.5 * window_s).ok())
        .collect()
}

/// Signed difference reduced to `(−π, π]`.
pub fn wrap_to_pi(x: f64) -> f64 {
    let y = x.rem_euclid(TAU);
    if y > PI {
        y - TAU
    } else {
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics_sim::DeterministicPhase;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tone(f: f64, theta0: f64, t_end: f64) -> PhasePath {
        PhasePath {
            deterministic: DeterministicPhase {
                theta0,
                delta_f0_hz: f,
                drift_hz_per_s: 0.0,
            },
            samples: vec![(0.0, 0.0), (t_end, 0.0)],
        }
    }

    fn est(delta_f_hat: f64, anchor_time: f64) -> FreqEstimate {
        FreqEstimate {
            t0: anchor_time,
            t1: anchor_time + 50e-9,
            delta_f_hat,
            n_periods: 10,
            anchor_time,
            anchor_phase: EDGE_PHASE,
        }
    }

    #[test]
    fn pure_tone_edges_are_uniform() {
        let edges = synth_edges(&tone(2e8, 0.0, 1e-6), 0.0, 1e-6);
        assert_eq!(edges.len(), 200);
        assert_eq!(edges.timestamps_ps[0], 3750);
        for w in edges.timestamps_ps.windows(2) {
            assert_eq!(w[1] - w[0], 5000);
        }
    }

    #[test]
    fn constant_phase_has_no_edges() {
        assert!(synth_edges(&tone(0.0, 1.0, 1e-6), 0.0, 1e-6).is_empty());
    }

    #[test]
    fn period_counting_example() {
        let edges = EdgeStream::from_timestamps(vec![0, 5000, 10000, 15000]);
        let e = estimate_frequency(&edges, 0.0, 20e-9).unwrap();
        assert!((e.delta_f_hat - 2e8).abs() < 1e-3);
        assert_eq!(e.n_periods, 3);
        assert_eq!(e.anchor_phase, EDGE_PHASE);
        let single = EdgeStream::from_timestamps(vec![5000]);
        assert!(matches!(
            estimate_frequency(&single, 0.0, 20e-9),
            Err(BeatError::InsufficientEdges { found: 1, .. })
        ));
    }

    #[test]
    fn noiseless_window_estimate() {
        let edges = synth_edges(&tone(2e8, 0.7, 2e-6), 0.0, 2e-6);
        for k in 0..20 {
            let t0 = 13e-9 + k as f64 * 61e-9;
            let e = estimate_frequency(&edges, t0, t0 + 50e-9).unwrap();
            assert!((e.delta_f_hat - 2e8).abs() <= 1e3, "{}", e.delta_f_hat);
        }
    }

    #[test]
    fn phase_at_examples() {
        let e = est(2e8, 1e-6);
        assert!((phase_at(&e, 1e-6) - EDGE_PHASE).abs() < 1e-12);
        assert!((phase_at(&e, 1e-6 + 10e-9) - EDGE_PHASE).abs() < 1e-6);
        assert!((phase_at(&e, 1e-6 + 2.5e-9) - PI / 2.0).abs() < 1e-6);
    }

    #[test]
    fn compensation_examples() {
        let set = EstimateSet::new(vec![est(2e8, 0.0)]);
        let c = compensation_between(&set, 10e-9, 20e-9, 1e-5).unwrap();
        assert!(wrap_to_pi(c).abs() < 1e-6);
        let c = compensation_between(&set, 10e-9, 12.5e-9, 1e-5).unwrap();
        assert!((c - PI).abs() < 1e-6);
        assert!(matches!(
            compensation_between(&set, 1.0, 1.1, 1e-5),
            Err(BeatError::NoCoveringEstimate(_))
        ));
        let eps = 1234.0;
        let dt = 7.3e-6;
        let exact = compensation_from(&est(2e8, 0.0), 1e-8, &est(2e8, 0.0), 1e-8 + dt);
        let off = compensation_from(&est(2e8 + eps, 0.0), 1e-8, &est(2e8 + eps, 0.0), 1e-8 + dt);
        assert!((wrap_to_pi(off - exact) - wrap_to_pi(TAU * eps * dt)).abs() < 1e-6);
    }

    #[test]
    fn diffusive_tone_mean_spacing() {
        // 1 kHz per laser over 1 µs, many seeds.
        let diffusion = TAU * 2.0 * 1e3;
        let times: Vec<f64> = (0..=2000).map(|i| i as f64 * 0.5e-9).collect();
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let det = DeterministicPhase {
                theta0: 0.3,
                delta_f0_hz: 2e8,
                drift_hz_per_s: 0.0,
            };
            let path = PhasePath::sample(det, diffusion, &times, &mut rng);
            let edges = synth_edges(&path, 0.0, 1e-6);
            let ts = &edges.timestamps_ps;
            let spacing = (ts[ts.len() - 1] - ts[0]) as f64 / (ts.len() - 1) as f64;
            assert!((spacing / 5000.0 - 1.0).abs() < 1e-3, "{spacing}");
            // Each interval is one full turn of the true phase.
            for w in ts.windows(2) {
                let adv = path.theta(w[1] as f64 / PS_PER_S) - path.theta(w[0] as f64 / PS_PER_S);
                assert!((adv - TAU).abs() < 0.01, "{adv}");
            }
        }
    }

    #[test]
    fn edges_pin_the_true_phase() {
        let path = tone(1.37e8, 2.1, 3e-7);
        let edges = synth_edges(&path, 0.0, 3e-7);
        for t in edges.times_s() {
            let err = wrap_to_pi(path.theta(t) - EDGE_PHASE);
            assert!(err.abs() < TAU * 1.37e8 * 0.5e-12 + 1e-9);
        }
    }

    proptest! {
        #[test]
        fn compensation_is_additive(f in 1e6f64..1e9, a in 0.0f64..1e-6, b in 0.0f64..1e-6, c in 0.0f64..1e-6) {
            let e = est(f, 0.0);
            let ab = compensation_from(&e, a, &e, b);
            let bc = compensation_from(&e, b, &e, c);
            let ac = compensation_from(&e, a, &e, c);
            prop_assert!(wrap_to_pi(ab + bc - ac).abs() < 1e-6);
            prop_assert!(compensation_from(&e, a, &e, a).abs() < 1e-12);
        }

        #[test]
        fn integer_frequency_shift_is_invisible(f in 1e6f64..1e9, dt in 1e-8f64..2e-5, k in -50i32..50) {
            let t_i = 3e-7;
            let base = compensation_from(&est(f, 0.0), t_i, &est(f, 0.0), t_i + dt);
            let g = f + k as f64 / dt;
            prop_assume!(g > 0.0);
            let shifted = compensation_from(&est(g, 0.0), t_i, &est(g, 0.0), t_i + dt);
            prop_assert!(wrap_to_pi(shifted - base).abs() < 1e-5);
        }
    }
}
