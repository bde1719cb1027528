//! Monte Carlo engine for two phase-randomized coherent pulse trains
//! interfering on a balanced beam splitter with two threshold detectors.
//!
//! Interference is evaluated at the level of Poisson means: for coherent
//! inputs the detector photon numbers are independent Poisson variables with
//! the means returned by [`detector_means`], so no photon-by-photon sampling is
//! needed.
//!
//! The round stream is cut into fixed-size blocks. Each block owns its own
//! ChaCha substreams and starts from a checkpoint of the differential phase,
//! so blocks can run on any number of workers in any order. The Wiener parts
//! of the phase are only ever evaluated at a handful of rounds per block, so
//! they are sampled lazily as Brownian bridges between the block checkpoints.

use std::collections::VecDeque;
use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Executor;
use crate::params::ProtocolParams;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("negative intensity {0}")]
    NegativeIntensity(f64),
}

/// Intensity setting of one pulse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum IntensityClass {
    Vac = 0,
    Decoy = 1,
    Signal = 2,
}

impl IntensityClass {
    pub const ALL: [IntensityClass; 3] = [Self::Vac, Self::Decoy, Self::Signal];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: u8) -> Option<Self> {
        match i {
            0 => Some(Self::Vac),
            1 => Some(Self::Decoy),
            2 => Some(Self::Signal),
            _ => None,
        }
    }

    /// Mean photon number emitted by the source.
    pub fn intensity(self, params: &ProtocolParams) -> f64 {
        match self {
            Self::Vac => params.vacuum_intensity(),
            Self::Decoy => params.nu,
            Self::Signal => params.mu,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Vac => "VAC",
            Self::Decoy => "DECOY",
            Self::Signal => "SIGNAL",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "VAC" => Some(Self::Vac),
            "DECOY" => Some(Self::Decoy),
            "SIGNAL" => Some(Self::Signal),
            _ => None,
        }
    }
}

/// One user's source choice for one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundChoice {
    pub class: IntensityClass,
    /// Phase slice in `[0, D)`; drawn for vacuum rounds too.
    pub phase_index: u32,
}

/// Source choices of both users and the detector outcome of one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundRecord {
    pub round_index: u64,
    pub t: f64,
    pub alice: RoundChoice,
    pub bob: RoundChoice,
    pub click_l: bool,
    pub click_r: bool,
}

impl RoundRecord {
    pub fn single_click(&self) -> bool {
        self.click_l != self.click_r
    }
}

/// Deterministic part of the differential laser phase:
/// `theta0 + 2π (Δf0 t + drift t² / 2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeterministicPhase {
    pub theta0: f64,
    pub delta_f0_hz: f64,
    pub drift_hz_per_s: f64,
}

impl DeterministicPhase {
    pub fn at(&self, t: f64) -> f64 {
        self.theta0 + TAU * (self.delta_f0_hz * t + 0.5 * self.drift_hz_per_s * t * t)
    }

    pub fn delta_f(&self, t: f64) -> f64 {
        self.delta_f0_hz + self.drift_hz_per_s * t
    }
}

/// Sampled differential phase Θ(t) over one segment: the deterministic
/// offset/drift term plus Wiener diffusion known at the sample times and
/// linearly interpolated between them.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePath {
    pub deterministic: DeterministicPhase,
    /// `(t, diffusion)` samples, strictly increasing in `t`.
    pub samples: Vec<(f64, f64)>,
}

impl PhasePath {
    pub fn t_start(&self) -> f64 {
        self.samples.first().map_or(0.0, |s| s.0)
    }

    pub fn t_end(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.0)
    }

    pub fn diffusion(&self, t: f64) -> f64 {
        let s = &self.samples;
        match s.len() {
            0 => 0.0,
            1 => s[0].1,
            _ => {
                let i = s.partition_point(|p| p.0 <= t).clamp(1, s.len() - 1);
                let (t0, w0) = s[i - 1];
                let (t1, w1) = s[i];
                w0 + (w1 - w0) * (t - t0) / (t1 - t0)
            }
        }
    }

    pub fn theta(&self, t: f64) -> f64 {
        self.deterministic.at(t) + self.diffusion(t)
    }

    /// Ground-truth frequency offset at `t`.
    pub fn delta_f(&self, t: f64) -> f64 {
        self.deterministic.delta_f(t)
    }

    /// Samples a path on the given increasing times with independent Wiener
    /// increments of variance `diffusion_per_s · dt`, starting from zero.
    pub fn sample<R: Rng>(deterministic: DeterministicPhase, diffusion_per_s: f64, times: &[f64], rng: &mut R) -> Self {
        let mut w = 0.0;
        let mut last = times.first().copied().unwrap_or(0.0);
        let samples = times
            .iter()
            .map(|&t| {
                let dt = t - last;
                if diffusion_per_s > 0.0 && dt > 0.0 {
                    let z: f64 = rng.sample(StandardNormal);
                    w += (diffusion_per_s * dt).sqrt() * z;
                }
                last = t;
                (t, w)
            })
            .collect();
        Self { deterministic, samples }
    }
}

/// Ground truth at one click round; written only to oracle sidecars.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthSample {
    pub round_index: u64,
    pub delta_f_hz: f64,
    /// Beat-note phase (laser difference plus classical offset), unwrapped.
    pub theta_beat: f64,
    /// Differential phase seen by the quantum pulses, unwrapped.
    pub theta_quantum: f64,
}

/// Draws one user's intensity class with probabilities `(p_vac, p_nu, p_mu)`
/// and a uniform phase slice.
#[inline]
pub fn sample_round_choice<R: Rng + ?Sized>(params: &ProtocolParams, rng: &mut R) -> RoundChoice {
    let u: f64 = rng.random();
    let class = if u < params.p_vac() {
        IntensityClass::Vac
    } else if u < params.p_vac() + params.p_nu {
        IntensityClass::Decoy
    } else {
        IntensityClass::Signal
    };
    RoundChoice {
        class,
        phase_index: rng.random_range(0..params.d),
    }
}

/// Mean photon numbers at the two output ports of a balanced beam splitter.
pub fn detector_means(i_a: f64, i_b: f64, delta_phi: f64) -> Result<(f64, f64), SimError> {
    for i in [i_a, i_b] {
        if !(i >= 0.0) {
            return Err(SimError::NegativeIntensity(i));
        }
    }
    Ok(detector_means_unchecked(i_a, i_b, delta_phi))
}

#[inline]
fn detector_means_unchecked(i_a: f64, i_b: f64, delta_phi: f64) -> (f64, f64) {
    let mean = 0.5 * (i_a + i_b);
    let cross = (i_a * i_b).sqrt() * delta_phi.cos();
    // Clamp rounding residue at perfect destructive interference.
    ((mean + cross).max(0.0), (mean - cross).max(0.0))
}

/// Probability that a threshold detector with dark-count probability
/// `p_dark` fires on a Poisson input of mean `lambda`.
#[inline]
pub fn click_probability(lambda: f64, det_efficiency: f64, p_dark: f64) -> f64 {
    1.0 - (1.0 - p_dark) * (-det_efficiency * lambda).exp()
}

pub fn click_sample<R: Rng + ?Sized>(lambda: f64, det_efficiency: f64, p_dark: f64, rng: &mut R) -> bool {
    rng.random::<f64>() < click_probability(lambda, det_efficiency, p_dark)
}

/// Wiener process on the rounds of one block, pinned at both block ends and
/// refined on demand by conditional (bridge) sampling.
///
/// Requests arrive in nearly increasing order, so only points within `keep`
/// rounds of the newest one are retained, plus the latest point before that
/// horizon. By the Markov property a dropped point can never influence a new
/// sample that lies beyond a retained one.
struct BridgePath {
    var_per_round: f64,
    known: VecDeque<(u64, f64)>,
    end: (u64, f64),
    keep: u64,
    rng: ChaCha8Rng,
}

impl BridgePath {
    fn new(var_per_round: f64, start: (u64, f64), end: (u64, f64), keep: u64, rng: ChaCha8Rng) -> Self {
        Self {
            var_per_round,
            known: VecDeque::from([start]),
            end,
            keep,
            rng,
        }
    }

    /// Value at round `r`, which must not precede the retained horizon.
    fn at(&mut self, r: u64) -> f64 {
        if r >= self.end.0 {
            return self.end.1;
        }
        let i = self.known.partition_point(|p| p.0 < r);
        if let Some(&(kr, w)) = self.known.get(i) {
            if kr == r {
                return w;
            }
        }
        let (l, wl) = self.known[i.checked_sub(1).expect("round before retained horizon")];
        let (h, wh) = self.known.get(i).copied().unwrap_or(self.end);
        let w = if self.var_per_round > 0.0 {
            let span = (h - l) as f64;
            let left = (r - l) as f64;
            let right = (h - r) as f64;
            let mean = wl + (wh - wl) * left / span;
            let sd = (self.var_per_round * left * right / span).sqrt();
            let z: f64 = self.rng.sample(StandardNormal);
            mean + sd * z
        } else {
            wl
        };
        self.known.insert(i, (r, w));
        let horizon = self.known.back().map_or(0, |p| p.0).saturating_sub(self.keep);
        while self.known.len() >= 2 && self.known[1].0 <= horizon {
            self.known.pop_front();
        }
        w
    }
}

const STREAM_CHECKPOINTS: u64 = 0;
const STREAMS_PER_BLOCK: u64 = 4;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Output of one simulated block.
#[derive(Debug, Clone, Default)]
pub struct BlockOutput {
    /// Rounds with at least one click, in round order.
    pub clicks: Vec<RoundRecord>,
    /// Ground truth for each entry of `clicks`.
    pub truth: Vec<TruthSample>,
    /// Beat-note phase paths gated around every single-click round.
    pub windows: Vec<PhasePath>,
}

/// Precomputed state shared by all blocks of one run.
#[derive(Debug, Clone)]
pub struct Simulator {
    params: ProtocolParams,
    n_blocks: u64,
    laser_checkpoints: Vec<f64>,
    fiber_checkpoints: Vec<f64>,
    deterministic: DeterministicPhase,
    arriving_a: [f64; 3],
    arriving_b: [f64; 3],
    /// Upper bound of either detector's click probability over all class
    /// pairs and phases.
    p_bound: f64,
    laser_var_per_round: f64,
    fiber_var_per_round: f64,
    half_window_rounds: u64,
}

impl Simulator {
    /// Builds the block checkpoints. `params` must already be validated.
    pub fn new(params: &ProtocolParams) -> Self {
        let p = params.clone();
        let period = p.period_s();
        let n_blocks = p.n_rounds.div_ceil(p.block_rounds);
        let laser_var_per_round = TAU * 2.0 * p.laser_linewidth_hz * period;
        let fiber_var_per_round = TAU * p.fiber_linewidth_hz * period;

        let mut rng = stream_rng(p.seed, STREAM_CHECKPOINTS);
        let theta0 = rng.random::<f64>() * TAU;
        let walk = |var_per_round: f64, rng: &mut ChaCha8Rng| {
            let mut w = 0.0;
            let mut out = Vec::with_capacity(n_blocks as usize + 1);
            out.push(0.0);
            for k in 0..n_blocks {
                let len = block_len(&p, k) as f64;
                let z: f64 = rng.sample(StandardNormal);
                w += (var_per_round * len).sqrt() * z;
                out.push(w);
            }
            out
        };
        let laser_checkpoints = walk(laser_var_per_round, &mut rng);
        let fiber_checkpoints = walk(fiber_var_per_round, &mut rng);

        let ta = p.arm_transmittance_a();
        let tb = p.arm_transmittance_b();
        let arriving_a = IntensityClass::ALL.map(|c| c.intensity(&p) * ta);
        let arriving_b = IntensityClass::ALL.map(|c| c.intensity(&p) * tb);
        let mut p_bound: f64 = 0.0;
        for ia in arriving_a {
            for ib in arriving_b {
                let peak = 0.5 * (ia.sqrt() + ib.sqrt()).powi(2);
                p_bound = p_bound.max(click_probability(peak, p.det_efficiency, p.p_dark()));
            }
        }
        let half_window_rounds = (0.5 * p.beat_window_s * p.rep_rate_hz).ceil() as u64;

        Self {
            deterministic: DeterministicPhase {
                theta0,
                delta_f0_hz: p.delta_f0_hz,
                drift_hz_per_s: p.delta_f_drift_hz_per_s,
            },
            params: p,
            n_blocks,
            laser_checkpoints,
            fiber_checkpoints,
            arriving_a,
            arriving_b,
            p_bound,
            laser_var_per_round,
            fiber_var_per_round,
            half_window_rounds,
        }
    }

    pub fn n_blocks(&self) -> u64 {
        self.n_blocks
    }

    pub fn params(&self) -> &ProtocolParams {
        &self.params
    }

    /// Deterministic laser phase including the classical offset, as seen by
    /// the photodiode.
    pub fn beat_phase(&self) -> DeterministicPhase {
        DeterministicPhase {
            theta0: self.deterministic.theta0 + self.params.classical_phase_offset_rad,
            ..self.deterministic
        }
    }

    /// Simulates block `k`.
    pub fn run_block(&self, k: u64) -> BlockOutput {
        let p = &self.params;
        let start = k * p.block_rounds;
        let len = block_len(p, k);
        let end = start + len;
        let base = 1 + STREAMS_PER_BLOCK * k;
        let mut rng = stream_rng(p.seed, base);
        let keep = 2 * self.half_window_rounds + 2;
        let mut laser = BridgePath::new(
            self.laser_var_per_round,
            (start, self.laser_checkpoints[k as usize]),
            (end, self.laser_checkpoints[k as usize + 1]),
            keep,
            stream_rng(p.seed, base + 1),
        );
        let mut fiber = BridgePath::new(
            self.fiber_var_per_round,
            (start, self.fiber_checkpoints[k as usize]),
            (end, self.fiber_checkpoints[k as usize + 1]),
            keep,
            stream_rng(p.seed, base + 2),
        );
        let mut jitter_rng = stream_rng(p.seed, base + 3);

        let period = p.period_s();
        let slice = TAU / p.d as f64;
        let p_dark = p.p_dark();
        let mut out = BlockOutput::default();
        let beat = self.beat_phase();

        // Each round draws u_L, u_R uniform and clicks detector X iff
        // u_X < p_X <= p_bound. Rounds with min(u_L, u_R) >= p_bound cannot
        // click, so candidates are reached by geometric skips and their
        // uniforms drawn conditionally on min(u_L, u_R) < p_bound.
        let b = self.p_bound;
        let q = 1.0 - (1.0 - b) * (1.0 - b);
        let skip = (q > 0.0).then(|| Geometric::new(q).expect("probability in (0, 1]"));
        let mut r = start;
        while let Some(skip) = &skip {
            r = r.saturating_add(skip.sample(&mut rng));
            if r >= end {
                break;
            }
            let alice = sample_round_choice(p, &mut rng);
            let bob = sample_round_choice(p, &mut rng);
            let (u_l, u_r): (f64, f64) = if rng.random::<f64>() * q < b {
                (b * rng.random::<f64>(), rng.random())
            } else {
                (b + (1.0 - b) * rng.random::<f64>(), b * rng.random::<f64>())
            };
            let (ca, cb) = (alice.class.index(), bob.class.index());
            let t = r as f64 * period;
            let w_laser = laser.at(r);
            let theta_quantum = self.deterministic.at(t) + w_laser + fiber.at(r);
            let mut delta_phi = slice * (alice.phase_index as f64 - bob.phase_index as f64) + theta_quantum;
            if p.phase_jitter_rad > 0.0 {
                let za: f64 = jitter_rng.sample(StandardNormal);
                let zb: f64 = jitter_rng.sample(StandardNormal);
                delta_phi += p.phase_jitter_rad * (za - zb);
            }
            let (lambda_l, lambda_r) = detector_means_unchecked(self.arriving_a[ca], self.arriving_b[cb], delta_phi);
            let click_l = u_l < click_probability(lambda_l, p.det_efficiency, p_dark);
            let click_r = u_r < click_probability(lambda_r, p.det_efficiency, p_dark);
            if click_l || click_r {
                out.clicks.push(RoundRecord {
                    round_index: r,
                    t,
                    alice,
                    bob,
                    click_l,
                    click_r,
                });
                out.truth.push(TruthSample {
                    round_index: r,
                    delta_f_hz: self.deterministic.delta_f(t),
                    theta_beat: self.deterministic.at(t) + p.classical_phase_offset_rad + w_laser,
                    theta_quantum,
                });
                if click_l != click_r {
                    let lo = r.saturating_sub(self.half_window_rounds).max(start);
                    let hi = (r + self.half_window_rounds).min(end);
                    let samples = (lo..=hi).map(|j| (j as f64 * period, laser.at(j))).collect();
                    out.windows.push(PhasePath {
                        deterministic: beat,
                        samples,
                    });
                }
            }
            r += 1;
        }
        out
    }
}

fn block_len(p: &ProtocolParams, k: u64) -> u64 {
    let start = k * p.block_rounds;
    p.block_rounds.min(p.n_rounds - start)
}

/// Full simulation output with blocks merged in order.
#[derive(Debug, Clone, Default)]
pub struct SimOutput {
    pub n_rounds: u64,
    pub clicks: Vec<RoundRecord>,
    pub truth: Vec<TruthSample>,
    pub windows: Vec<PhasePath>,
}

/// Runs every block of `params` and concatenates the results.
pub fn simulate_rounds(params: &ProtocolParams, exec: Executor) -> SimOutput {
    let sim = Simulator::new(params);
    let blocks = exec.map_blocks(sim.n_blocks(), |k| sim.run_block(k));
    let mut out = SimOutput {
        n_rounds: params.n_rounds,
        ..SimOutput::default()
    };
    for b in blocks {
        out.clicks.extend(b.clicks);
        out.truth.extend(b.truth);
        out.windows.extend(b.windows);
    }
    out
}
