//! Protocol and physics parameters, unit conversions and validation.
//!
//! Every other module consumes a [`ProtocolParams`] that has passed
//! [`validate`]. The flat `key = value` configuration format maps one key to
//! one field; see `configs/schema.conf` for the documented defaults.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised while building or validating a parameter set.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamError {
    #[error("{rule} violated: {detail}")]
    Violated { rule: &'static str, detail: String },
    #[error("probabilities exceed 1: p_mu + p_nu = {0}")]
    ProbabilitiesExceedOne(f64),
    #[error("negative loss {0} dB")]
    NegativeLoss(f64),
    #[error("unknown parameter key `{0}`")]
    UnknownKey(String),
    #[error("cannot parse value `{value}` for `{key}`")]
    BadValue { key: String, value: String },
}

fn violated(rule: &'static str, detail: String) -> ParamError {
    ParamError::Violated { rule, detail }
}

/// How the pair-opportunity count `N_pair` relates to the simulated rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairNormalization {
    /// `N_pair = n_rounds / 2`.
    HalfRounds,
    /// `N_pair = n_rounds`, for sent-pulse counts that already combine both users.
    Rounds,
}

/// Strategy used to pair single-click rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingStrategy {
    /// Hold the earliest unpaired click, pair it with the next one inside
    /// `l_max`, otherwise drop it.
    Greedy,
    /// Maximum-cardinality matching with minimum total gap (dynamic program).
    MinGap,
}

/// All tunable constants of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolParams {
    /// Number of phase slices `D`.
    pub d: u32,
    pub mu: f64,
    pub nu: f64,
    pub p_mu: f64,
    pub p_nu: f64,
    pub rep_rate_hz: f64,
    pub channel_loss_db_a: f64,
    pub channel_loss_db_b: f64,
    pub charlie_loss_db: f64,
    pub det_efficiency: f64,
    pub dark_rate_hz: f64,
    pub f_ec: f64,
    pub l_max_s: f64,
    pub n_rounds: u64,
    pub laser_linewidth_hz: f64,
    pub delta_f0_hz: f64,
    pub delta_f_drift_hz_per_s: f64,
    pub seed: u64,

    /// Gaussian jitter (rad) on each user's modulated phase.
    pub phase_jitter_rad: f64,
    /// Extinction ratio of nominal vacuum pulses relative to the signal
    /// intensity; `None` means perfect extinction.
    pub extinction_db: Option<f64>,
    /// Differential phase diffusion on the quantum channel only (fiber
    /// perturbations), invisible to the beat note. Hz, same convention as
    /// the laser linewidth.
    pub fiber_linewidth_hz: f64,
    /// Constant phase between the classical beat note and the quantum channel.
    pub classical_phase_offset_rad: f64,
    /// Beat-note estimation window length.
    pub beat_window_s: f64,
    /// Rounds per simulation block (each block owns one RNG substream).
    pub block_rounds: u64,
    /// Rounds per row of the error-drift table.
    pub drift_block_rounds: u64,
    /// Photon-number truncation of the decoy linear programs.
    pub lp_cutoff: u32,
    /// Half-width of each decoy gain constraint, in Poisson standard
    /// deviations of the observed count.
    pub decoy_band_sigma: f64,
    /// Accept X pairs whose phase difference lands one slice away from 0 or π.
    pub x_adjacent_slices: bool,
    /// Charge error correction for X-basis cells as well as Z-basis cells.
    pub ec_all_bases: bool,
    pub pairing: PairingStrategy,
    pub pair_normalization: PairNormalization,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        Self::table_197km()
    }
}

impl ProtocolParams {
    /// Optimized operating point for the 197.91 km link.
    pub fn table_197km() -> Self {
        Self {
            d: 16,
            mu: 0.3958,
            nu: 0.0275,
            p_mu: 0.15,
            p_nu: 0.25,
            rep_rate_hz: 5.0e8,
            channel_loss_db_a: 38.83 / 2.0,
            channel_loss_db_b: 38.83 / 2.0,
            charlie_loss_db: 1.91,
            det_efficiency: 0.63,
            dark_rate_hz: 30.0,
            f_ec: 1.06,
            l_max_s: 10e-6,
            n_rounds: 100_000_000,
            laser_linewidth_hz: 1.0e3,
            delta_f0_hz: 2.0e8,
            delta_f_drift_hz_per_s: 0.0,
            seed: 0,
            phase_jitter_rad: 0.0,
            extinction_db: None,
            fiber_linewidth_hz: 0.0,
            classical_phase_offset_rad: 0.0,
            beat_window_s: 50e-9,
            block_rounds: 1 << 20,
            drift_block_rounds: 15_000_000_000,
            lp_cutoff: 10,
            decoy_band_sigma: 1.0,
            x_adjacent_slices: false,
            ec_all_bases: false,
            pairing: PairingStrategy::Greedy,
            pair_normalization: PairNormalization::HalfRounds,
        }
    }

    /// Optimized operating point for the 296.80 km link.
    pub fn table_297km() -> Self {
        Self {
            mu: 0.3591,
            nu: 0.0232,
            p_mu: 0.25,
            p_nu: 0.30,
            channel_loss_db_a: 57.36 / 2.0,
            channel_loss_db_b: 57.36 / 2.0,
            l_max_s: 20e-6,
            ..Self::table_197km()
        }
    }

    pub fn p_vac(&self) -> f64 {
        1.0 - self.p_mu - self.p_nu
    }

    /// Per-round dark-count probability of one detector.
    pub fn p_dark(&self) -> f64 {
        self.dark_rate_hz / self.rep_rate_hz
    }

    pub fn period_s(&self) -> f64 {
        1.0 / self.rep_rate_hz
    }

    pub fn total_channel_loss_db(&self) -> f64 {
        self.channel_loss_db_a + self.channel_loss_db_b
    }

    /// Transmittance from Alice's source to the beam splitter (fiber and
    /// middle-node insertion loss; detector efficiency is applied at the click).
    pub fn arm_transmittance_a(&self) -> f64 {
        db_to_linear(self.channel_loss_db_a + self.charlie_loss_db)
    }

    pub fn arm_transmittance_b(&self) -> f64 {
        db_to_linear(self.channel_loss_db_b + self.charlie_loss_db)
    }

    /// Intensity emitted by nominal vacuum pulses.
    pub fn vacuum_intensity(&self) -> f64 {
        match self.extinction_db {
            Some(db) => self.mu * db_to_linear(db),
            None => 0.0,
        }
    }

    /// Pair opportunities `N_pair` for `rounds` simulated rounds.
    pub fn pair_opportunities(&self, rounds: u64) -> f64 {
        match self.pair_normalization {
            PairNormalization::HalfRounds => rounds as f64 / 2.0,
            PairNormalization::Rounds => rounds as f64,
        }
    }

    /// Assigns one configuration key. Keys mirror the field names; `D` is the
    /// slice count and `channel_loss_db` splits a total loss evenly over both arms.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ParamError> {
        let bad = || ParamError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        };
        let f = || value.parse::<f64>().map_err(|_| bad());
        let u = || parse_count(value).ok_or_else(bad);
        let b = || value.parse::<bool>().map_err(|_| bad());
        match key {
            "D" => self.d = u()?.try_into().map_err(|_| bad())?,
            "mu" => self.mu = f()?,
            "nu" => self.nu = f()?,
            "p_mu" => self.p_mu = f()?,
            "p_nu" => self.p_nu = f()?,
            "rep_rate_hz" => self.rep_rate_hz = f()?,
            "channel_loss_db" => {
                let total = f()?;
                self.channel_loss_db_a = total / 2.0;
                self.channel_loss_db_b = total / 2.0;
            }
            "channel_loss_db_a" => self.channel_loss_db_a = f()?,
            "channel_loss_db_b" => self.channel_loss_db_b = f()?,
            "charlie_loss_db" => self.charlie_loss_db = f()?,
            "det_efficiency" => self.det_efficiency = f()?,
            "dark_rate_hz" => self.dark_rate_hz = f()?,
            "f_ec" => self.f_ec = f()?,
            "l_max_s" => self.l_max_s = f()?,
            "n_rounds" => self.n_rounds = u()?,
            "laser_linewidth_hz" => self.laser_linewidth_hz = f()?,
            "delta_f0_hz" => self.delta_f0_hz = f()?,
            "delta_f_drift_hz_per_s" => self.delta_f_drift_hz_per_s = f()?,
            "seed" => self.seed = u()?,
            "phase_jitter_rad" => self.phase_jitter_rad = f()?,
            "extinction_db" => {
                self.extinction_db = match value {
                    "inf" | "none" => None,
                    _ => Some(f()?),
                }
            }
            "fiber_linewidth_hz" => self.fiber_linewidth_hz = f()?,
            "classical_phase_offset_rad" => self.classical_phase_offset_rad = f()?,
            "beat_window_s" => self.beat_window_s = f()?,
            "block_rounds" => self.block_rounds = u()?,
            "drift_block_rounds" => self.drift_block_rounds = u()?,
            "lp_cutoff" => self.lp_cutoff = u()?.try_into().map_err(|_| bad())?,
            "decoy_band_sigma" => self.decoy_band_sigma = f()?,
            "x_adjacent_slices" => self.x_adjacent_slices = b()?,
            "ec_all_bases" => self.ec_all_bases = b()?,
            "pairing" => {
                self.pairing = match value {
                    "greedy" => PairingStrategy::Greedy,
                    "min_gap" => PairingStrategy::MinGap,
                    _ => return Err(bad()),
                }
            }
            "pair_normalization" => {
                self.pair_normalization = match value {
                    "half_rounds" => PairNormalization::HalfRounds,
                    "rounds" => PairNormalization::Rounds,
                    _ => return Err(bad()),
                }
            }
            _ => return Err(ParamError::UnknownKey(key.to_string())),
        }
        Ok(())
    }
}

/// Integer counts accept plain integers and exact float notation such as `1e9`.
fn parse_count(value: &str) -> Option<u64> {
    if let Ok(n) = value.parse::<u64>() {
        return Some(n);
    }
    let x = value.parse::<f64>().ok()?;
    (x >= 0.0 && x.fract() == 0.0 && x < u64::MAX as f64).then_some(x as u64)
}

fn db_to_linear(loss_db: f64) -> f64 {
    10f64.powf(-loss_db / 10.0)
}

/// Converts an attenuation in dB to a transmittance in (0, 1].
pub fn transmittance_from_db(loss_db: f64) -> Result<f64, ParamError> {
    if !(loss_db >= 0.0) {
        return Err(ParamError::NegativeLoss(loss_db));
    }
    Ok(db_to_linear(loss_db))
}

/// Checks every invariant and returns the parameters unchanged, or the first
/// violation.
pub fn validate(params: ProtocolParams) -> Result<ProtocolParams, ParamError> {
    let p = &params;
    if p.d < 2 {
        return Err(violated("D >= 2", format!("D={}", p.d)));
    }
    if !(p.nu > 0.0) {
        return Err(violated("0 < nu", format!("nu={}", p.nu)));
    }
    if !(p.nu < p.mu) {
        return Err(violated("nu < mu", format!("nu={}, mu={}", p.nu, p.mu)));
    }
    if !(p.mu < 1.0) {
        return Err(violated("mu < 1", format!("mu={}", p.mu)));
    }
    if !(p.p_mu >= 0.0) {
        return Err(violated("p_mu >= 0", format!("p_mu={}", p.p_mu)));
    }
    if !(p.p_nu >= 0.0) {
        return Err(violated("p_nu >= 0", format!("p_nu={}", p.p_nu)));
    }
    if p.p_mu + p.p_nu > 1.0 {
        return Err(ParamError::ProbabilitiesExceedOne(p.p_mu + p.p_nu));
    }
    if !(p.rep_rate_hz > 0.0) {
        return Err(violated("rep_rate_hz > 0", format!("rep_rate_hz={}", p.rep_rate_hz)));
    }
    let nonnegative = [
        ("channel_loss_db_a", p.channel_loss_db_a),
        ("channel_loss_db_b", p.channel_loss_db_b),
        ("charlie_loss_db", p.charlie_loss_db),
        ("dark_rate_hz", p.dark_rate_hz),
        ("f_ec", p.f_ec),
        ("l_max_s", p.l_max_s),
        ("laser_linewidth_hz", p.laser_linewidth_hz),
        ("delta_f0_hz", p.delta_f0_hz),
        ("phase_jitter_rad", p.phase_jitter_rad),
        ("fiber_linewidth_hz", p.fiber_linewidth_hz),
        ("extinction_db", p.extinction_db.unwrap_or(0.0)),
    ];
    for (name, value) in nonnegative {
        if !(value >= 0.0) || value.is_infinite() {
            return Err(violated("nonnegative finite value", format!("{name}={value}")));
        }
    }
    if !(0.0..=1.0).contains(&p.det_efficiency) {
        return Err(violated(
            "det_efficiency in [0, 1]",
            format!("det_efficiency={}", p.det_efficiency),
        ));
    }
    if !(p.p_dark() < 1.0) {
        return Err(violated(
            "dark_rate_hz < rep_rate_hz",
            format!("dark_rate_hz={}", p.dark_rate_hz),
        ));
    }
    if !p.classical_phase_offset_rad.is_finite() {
        return Err(violated(
            "finite value",
            format!("classical_phase_offset_rad={}", p.classical_phase_offset_rad),
        ));
    }
    if !(p.beat_window_s > 0.0) {
        return Err(violated(
            "beat_window_s > 0",
            format!("beat_window_s={}", p.beat_window_s),
        ));
    }
    if p.block_rounds == 0 || p.drift_block_rounds == 0 {
        return Err(violated(
            "block sizes > 0",
            format!(
                "block_rounds={}, drift_block_rounds={}",
                p.block_rounds, p.drift_block_rounds
            ),
        ));
    }
    if !(p.decoy_band_sigma >= 0.0) {
        return Err(violated(
            "decoy_band_sigma >= 0",
            format!("decoy_band_sigma={}", p.decoy_band_sigma),
        ));
    }
    if p.lp_cutoff < 4 {
        return Err(violated("lp_cutoff >= 4", format!("lp_cutoff={}", p.lp_cutoff)));
    }
    Ok(params)
}
