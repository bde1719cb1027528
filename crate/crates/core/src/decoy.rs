//! Decoy-state estimation and key-rate evaluation.
//!
//! Pair gains are modeled as Poisson mixtures of photon-number yields,
//! `Q(x_a, x_b) = Σ_{k,m} P_k(x_a) P_m(x_b) Y_km`, where `x` is the total
//! intensity a user put into the pair. The sum is truncated at `cutoff`
//! photons per user and the missing Poisson mass becomes slack, so the linear
//! programs below bound the true yields without any assumption on the
//! truncated tail beyond `Y_km ∈ [0, 1]`.
//!
//! The Z family (`x ∈ {0, ν, μ}`) bounds the single-photon yield `Y11` from
//! below. The X family (`x ∈ {0, 2ν, 2μ}`) bounds the single-photon error
//! `e11` from above; there a pair in which one user sent vacuum has error
//! exactly 1/2, because that user's phases are independent of the outcome.

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optics_sim::IntensityClass;
use crate::pairing::TallyTable;
use crate::params::{transmittance_from_db, ProtocolParams};

pub const REPORT_SCHEMA: &str = "fmqkd-keyreport/1";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecoyError {
    #[error("argument {name}={value} outside [{lo}, {hi}]")]
    Domain {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("malformed gain table: {0}")]
    MalformedGains(String),
}

/// `e^{-mu} mu^k / k!`.
pub fn poisson_pk(mu: f64, k: u32) -> f64 {
    let mut p = (-mu).exp();
    for i in 1..=k {
        p *= mu / i as f64;
    }
    p
}

/// Poisson mass strictly above `cutoff`, summed directly to avoid cancellation.
pub fn poisson_tail(mu: f64, cutoff: u32) -> f64 {
    if mu == 0.0 {
        return 0.0;
    }
    let mut term = poisson_pk(mu, cutoff + 1);
    let mut sum = 0.0;
    let mut k = cutoff + 1;
    while term > 0.0 && (term > sum * 1e-17 || (k as f64) < mu) {
        sum += term;
        k += 1;
        term *= mu / k as f64;
        if k > cutoff + 10_000 {
            break;
        }
    }
    sum
}

/// Binary entropy in bits.
pub fn binary_entropy(x: f64) -> Result<f64, DecoyError> {
    if !(0.0..=1.0).contains(&x) {
        return Err(DecoyError::Domain {
            name: "x",
            value: x,
            lo: 0.0,
            hi: 1.0,
        });
    }
    if x == 0.0 || x == 1.0 {
        return Ok(0.0);
    }
    Ok(-x * x.log2() - (1.0 - x) * (1.0 - x).log2())
}

/// Repeaterless bound `-log2(1 - eta)` in bits per channel use.
pub fn plob_bound(eta: f64) -> Result<f64, DecoyError> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(DecoyError::Domain {
            name: "eta",
            value: eta,
            lo: 0.0,
            hi: 1.0,
        });
    }
    Ok(-(-eta).ln_1p() / std::f64::consts::LN_2)
}

/// Gain of one intensity setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainEntry {
    /// Total intensity of Alice's pair.
    pub intensity_a: f64,
    pub intensity_b: f64,
    /// Pairs per pair opportunity of this setting.
    pub q: f64,
    /// Error-weighted gain.
    pub eq: f64,
    /// One standard deviation of `q`; bands are multiples of it.
    #[serde(default)]
    pub dq: f64,
    #[serde(default)]
    pub deq: f64,
}

impl GainEntry {
    /// Entry with exactly known gains.
    pub fn exact(intensity_a: f64, intensity_b: f64, q: f64, eq: f64) -> Self {
        Self {
            intensity_a,
            intensity_b,
            q,
            eq,
            dq: 0.0,
            deq: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GainTable {
    pub entries: Vec<GainEntry>,
}

impl GainTable {
    pub fn check(&self) -> Result<(), DecoyError> {
        for e in &self.entries {
            let ok = e.intensity_a >= 0.0
                && e.intensity_b >= 0.0
                && e.eq >= 0.0
                && e.eq <= e.q
                && e.q <= 1.0
                && e.q.is_finite()
                && e.dq >= 0.0
                && e.deq >= 0.0;
            if !ok {
                return Err(DecoyError::MalformedGains(format!("{e:?}")));
            }
        }
        Ok(())
    }

    /// Copy with every standard deviation multiplied by `sigma`.
    pub fn widened(&self, sigma: f64) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| GainEntry {
                    dq: e.dq * sigma,
                    deq: e.deq * sigma,
                    ..*e
                })
                .collect(),
        }
    }

    fn scale(&self) -> f64 {
        let s = self.entries.iter().map(|e| e.q).fold(0.0, f64::max);
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YieldBounds {
    pub y11_lower: f64,
    pub e11_upper: f64,
    pub cutoff: u32,
    pub feasible: bool,
}

impl YieldBounds {
    fn conservative(cutoff: u32) -> Self {
        Self {
            y11_lower: 0.0,
            e11_upper: 0.5,
            cutoff,
            feasible: false,
        }
    }
}

/// Columns or coefficients whose largest contribution (in units of the
/// largest gain) falls below this move into slack.
const DROP: f64 = 1e-11;

/// Relative widening of each band, absorbing round-off in exact gains.
/// Later entries are retried when the solver fails numerically; a wider band
/// only enlarges the feasible set, so bounds stay conservative.
const BAND_TOL: [f64; 4] = [1e-9, 1e-7, 1e-5, 1e-3];

/// The constraint system shared by both programs.
///
/// Yields are rescaled per column: `z_km = c_km Y_km / s`, where `s` is the
/// largest gain and `c_km` the largest Poisson weight of `(k, m)` over all
/// settings, so every retained coefficient is at most 1 and every right-hand
/// side at most 1.
struct System {
    side: usize,
    /// Largest Poisson weight per column; `None` for dropped columns.
    col: Vec<Option<f64>>,
    rows: Vec<Row>,
    scale: f64,
}

struct Row {
    /// `(column, normalized coefficient)`.
    coeffs: Vec<(usize, f64)>,
    /// Scaled mass not represented by `coeffs`.
    slack: f64,
    q: f64,
    eq: f64,
    dq: f64,
    deq: f64,
}

impl System {
    fn build(gains: &GainTable, cutoff: u32) -> Self {
        let side = cutoff as usize + 1;
        let s = gains.scale();
        let weights: Vec<(Vec<f64>, f64)> = gains
            .entries
            .iter()
            .map(|e| {
                let pa: Vec<f64> = (0..=cutoff).map(|k| poisson_pk(e.intensity_a, k)).collect();
                let pb: Vec<f64> = (0..=cutoff).map(|k| poisson_pk(e.intensity_b, k)).collect();
                let w = (0..side * side).map(|i| pa[i / side] * pb[i % side]).collect();
                let (ta, tb) = (poisson_tail(e.intensity_a, cutoff), poisson_tail(e.intensity_b, cutoff));
                (w, ta + tb - ta * tb)
            })
            .collect();
        let col: Vec<Option<f64>> = (0..side * side)
            .map(|i| {
                let c = weights.iter().map(|(w, _)| w[i]).fold(0.0, f64::max);
                (c / s >= DROP).then_some(c)
            })
            .collect();
        let rows = gains
            .entries
            .iter()
            .zip(&weights)
            .map(|(e, (w, tail))| {
                // Yields are at most 1, so a weight w contributes at most w/s.
                let mut slack = tail / s;
                let mut coeffs = Vec::new();
                for (i, &c) in w.iter().enumerate() {
                    if c == 0.0 {
                        continue;
                    }
                    match col[i] {
                        Some(cmax) if c / cmax >= DROP => coeffs.push((i, c / cmax)),
                        _ => slack += c / s,
                    }
                }
                Row {
                    coeffs,
                    slack,
                    q: e.q / s,
                    eq: e.eq / s,
                    dq: e.dq / s,
                    deq: e.deq / s,
                }
            })
            .collect();
        Self {
            side,
            col,
            rows,
            scale: s,
        }
    }

    fn target(&self) -> usize {
        self.side + 1
    }

    /// Adds one variable per retained column accepted by `include`; the
    /// objective is placed on the `Y11` column.
    fn add_vars<P: Fn(usize) -> bool>(
        &self,
        problem: &mut Problem,
        include: P,
        objective: bool,
    ) -> Vec<Option<microlp::Variable>> {
        let target = self.target();
        self.col
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let c = (*c)?;
                include(i).then(|| {
                    let obj = if objective && i == target { self.scale / c } else { 0.0 };
                    problem.add_var(obj, (0.0, c / self.scale))
                })
            })
            .collect()
    }

    /// Adds `value - slack <= row·z <= value` for every row. Each column
    /// maps to a list of `(variable, factor)` terms.
    fn add_bands<F>(&self, problem: &mut Problem, terms_of: F, errors: bool, tol: f64)
    where
        F: Fn(usize) -> Vec<(microlp::Variable, f64)>,
    {
        for row in &self.rows {
            let (value, band) = if errors { (row.eq, row.deq) } else { (row.q, row.dq) };
            let terms: Vec<_> = row
                .coeffs
                .iter()
                .flat_map(|&(i, c)| terms_of(i).into_iter().map(move |(v, f)| (v, f * c)))
                .collect();
            problem.add_constraint(terms.as_slice(), ComparisonOp::Le, (value + band) * (1.0 + tol) + 1e-15);
            let lower = (value - band - row.slack) * (1.0 - tol) - 1e-15;
            if lower > 0.0 {
                problem.add_constraint(terms.as_slice(), ComparisonOp::Ge, lower);
            }
        }
    }

    fn has_vacuum_user(&self, i: usize) -> bool {
        i / self.side == 0 || i.is_multiple_of(self.side)
    }
}

enum Outcome {
    Optimal(f64),
    Infeasible,
    Numerical,
}

fn solve(problem: &Problem) -> Outcome {
    match problem.solve() {
        Ok(outcome) => match outcome.into_solution() {
            Ok(solution) => Outcome::Optimal(solution.objective()),
            Err(_) => Outcome::Numerical,
        },
        Err(microlp::Error::InternalError(_)) => Outcome::Numerical,
        Err(_) => Outcome::Infeasible,
    }
}

/// Runs `build_and_solve` over the tolerance ladder until the solver returns
/// a definite answer.
fn solve_robust<F: Fn(f64) -> Outcome>(build_and_solve: F) -> Option<f64> {
    for tol in BAND_TOL {
        match build_and_solve(tol) {
            Outcome::Optimal(v) => return Some(v),
            Outcome::Infeasible => return None,
            Outcome::Numerical => continue,
        }
    }
    None
}

/// Smallest `Y11` consistent with the gains; `None` when the gains admit no
/// yields at all.
pub fn y11_lower_bound(gains: &GainTable, cutoff: u32) -> Result<Option<f64>, DecoyError> {
    gains.check()?;
    let sys = System::build(gains, cutoff);
    let Some(v) = solve_robust(|tol| {
        let mut problem = Problem::new(OptimizationDirection::Minimize);
        let vars = sys.add_vars(&mut problem, |_| true, true);
        sys.add_bands(
            &mut problem,
            |i| vars[i].map(|v| (v, 1.0)).into_iter().collect(),
            false,
            tol,
        );
        solve(&problem)
    }) else {
        return Ok(None);
    };
    // A dropped Y11 column carries no information.
    let v = if sys.col[sys.target()].is_some() { v } else { 0.0 };
    Ok(Some(v.clamp(0.0, 1.0)))
}

/// Largest `e11·Y11` consistent with the gains; `None` when infeasible.
pub fn error_yield11_upper_bound(gains: &GainTable, cutoff: u32) -> Result<Option<f64>, DecoyError> {
    gains.check()?;
    let sys = System::build(gains, cutoff);
    let Some(max_ey11) = solve_robust(|tol| {
        let mut problem = Problem::new(OptimizationDirection::Maximize);
        let y = sys.add_vars(&mut problem, |_| true, false);
        // Pairs with a vacuum user have error exactly 1/2: eY = Y/2 is
        // substituted, so error variables exist only for the other columns.
        let ey = sys.add_vars(&mut problem, |i| !sys.has_vacuum_user(i), true);
        for (i, (yi, eyi)) in y.iter().zip(&ey).enumerate() {
            if let (Some(yi), Some(eyi), false) = (yi, eyi, sys.has_vacuum_user(i)) {
                problem.add_constraint([(*eyi, 1.0), (*yi, -1.0)], ComparisonOp::Le, 0.0);
            }
        }
        sys.add_bands(
            &mut problem,
            |i| y[i].map(|v| (v, 1.0)).into_iter().collect(),
            false,
            tol,
        );
        sys.add_bands(
            &mut problem,
            |i| {
                if sys.has_vacuum_user(i) {
                    y[i].map(|v| (v, 0.5)).into_iter().collect()
                } else {
                    ey[i].map(|v| (v, 1.0)).into_iter().collect()
                }
            },
            true,
            tol,
        );
        solve(&problem)
    }) else {
        return Ok(None);
    };
    Ok(Some(if sys.col[sys.target()].is_some() {
        max_ey11.max(0.0)
    } else {
        f64::INFINITY
    }))
}

/// Largest single-photon error consistent with one family of gains: the
/// maximum of `e11·Y11` divided by the minimum of `Y11`, clamped to `[0, 1/2]`.
pub fn e11_upper_bound(gains: &GainTable, cutoff: u32) -> Result<Option<f64>, DecoyError> {
    let Some(max_ey11) = error_yield11_upper_bound(gains, cutoff)? else {
        return Ok(None);
    };
    let Some(min_y11) = y11_lower_bound(gains, cutoff)? else {
        return Ok(None);
    };
    Ok(Some(error_ratio(max_ey11, min_y11)))
}

fn error_ratio(max_ey11: f64, min_y11: f64) -> f64 {
    if min_y11 > 0.0 && max_ey11.is_finite() {
        (max_ey11 / min_y11).clamp(0.0, 0.5)
    } else {
        0.5
    }
}

/// Both bounds. `Y11` is bounded from the Z family; the single-photon pair
/// yield does not depend on the basis, so `e11` divides the X-family maximum
/// of `e11·Y11` by that same lower bound. An infeasible program yields the
/// conservative `(0, 1/2)` with `feasible = false`.
pub fn lp_yield_bounds(z_gains: &GainTable, x_gains: &GainTable, cutoff: u32) -> Result<YieldBounds, DecoyError> {
    if cutoff < 4 {
        return Err(DecoyError::Domain {
            name: "cutoff",
            value: cutoff as f64,
            lo: 4.0,
            hi: f64::INFINITY,
        });
    }
    let y11 = y11_lower_bound(z_gains, cutoff)?;
    let ey11 = error_yield11_upper_bound(x_gains, cutoff)?;
    Ok(match (y11, ey11) {
        (Some(y11_lower), Some(ey11)) => YieldBounds {
            y11_lower,
            e11_upper: error_ratio(ey11, y11_lower),
            cutoff,
            feasible: true,
        },
        _ => YieldBounds::conservative(cutoff),
    })
}

/// Key length `M11 [1 − h(e11)] − f Σ M h(E)`. The sum runs over Z cells
/// carrying bits, plus X cells when `include_x` is set.
pub fn key_length(m11_z: f64, e11_ph: f64, f_ec: f64, tally: &TallyTable, include_x: bool) -> Result<f64, DecoyError> {
    if !(0.0..=0.5).contains(&e11_ph) {
        return Err(DecoyError::Domain {
            name: "e11_ph",
            value: e11_ph,
            lo: 0.0,
            hi: 0.5,
        });
    }
    let mut cost = 0.0;
    let cells: Vec<_> = if include_x {
        tally.z_bit_cells().chain(tally.x_bit_cells()).collect()
    } else {
        tally.z_bit_cells().collect()
    };
    for (_, cell) in cells {
        if let Some(e) = cell.error_rate() {
            cost += cell.m as f64 * binary_entropy(e)?;
        }
    }
    Ok(m11_z * (1.0 - binary_entropy(e11_ph)?) - f_ec * cost)
}

/// Probability that one user's pair carries a given tally class, before any
/// detection: Z family (VAC + class, either order) or X family (class twice).
pub fn z_label_probability(params: &ProtocolParams, class: IntensityClass) -> f64 {
    let v = params.p_vac();
    match class {
        IntensityClass::Vac => v * v,
        IntensityClass::Decoy => 2.0 * v * params.p_nu,
        IntensityClass::Signal => 2.0 * v * params.p_mu,
    }
}

pub fn x_label_probability(params: &ProtocolParams, class: IntensityClass) -> f64 {
    match class {
        IntensityClass::Vac => params.p_vac().powi(2),
        IntensityClass::Decoy => params.p_nu.powi(2),
        IntensityClass::Signal => params.p_mu.powi(2),
    }
}

/// Fraction of X pairs that survive phase sifting.
pub fn x_sift_fraction(params: &ProtocolParams) -> f64 {
    let targets = if params.d.is_multiple_of(2) { 2.0 } else { 1.0 };
    let width = if params.x_adjacent_slices { 3.0 } else { 1.0 };
    (targets * width / params.d as f64).min(1.0)
}

fn class_intensity(params: &ProtocolParams, class: IntensityClass) -> f64 {
    match class {
        IntensityClass::Vac => 0.0,
        IntensityClass::Decoy => params.nu,
        IntensityClass::Signal => params.mu,
    }
}

/// Gains of both families normalized by pair opportunities, with one
/// Poisson standard deviation of each count as the band.
pub fn gains_from_tally(tally: &TallyTable, params: &ProtocolParams, n_pair: f64) -> (GainTable, GainTable) {
    let mut z = GainTable::default();
    let mut x = GainTable::default();
    let sift = x_sift_fraction(params);
    let rate = |count: u64, opportunities: f64| {
        if opportunities > 0.0 {
            (count as f64 / opportunities).min(1.0)
        } else {
            0.0
        }
    };
    // Poisson standard deviation of a count, at least one count's worth.
    let band = |count: u64, opportunities: f64| {
        if opportunities > 0.0 {
            (count.max(1) as f64).sqrt() / opportunities
        } else {
            0.0
        }
    };
    for a in IntensityClass::ALL {
        for b in IntensityClass::ALL {
            let cell = tally.z_cell(a, b);
            let opp = n_pair * z_label_probability(params, a) * z_label_probability(params, b);
            z.entries.push(GainEntry {
                intensity_a: class_intensity(params, a),
                intensity_b: class_intensity(params, b),
                q: rate(cell.m, opp),
                eq: rate(cell.e, opp),
                dq: band(cell.m, opp),
                deq: band(cell.e, opp),
            });
            let (cell, opp) = if a == IntensityClass::Vac && b == IntensityClass::Vac {
                // Vacuum pairs are basis-free; their error is 1/2 by definition.
                (cell, opp)
            } else {
                let c = tally.x_cell(a, b);
                let o = n_pair * x_label_probability(params, a) * x_label_probability(params, b) * sift;
                (c, o)
            };
            let q = rate(cell.m, opp);
            let dq = band(cell.m, opp);
            let (eq, deq) = if a == IntensityClass::Vac && b == IntensityClass::Vac {
                (q / 2.0, dq / 2.0)
            } else {
                (rate(cell.e, opp), band(cell.e, opp))
            };
            x.entries.push(GainEntry {
                intensity_a: 2.0 * class_intensity(params, a),
                intensity_b: 2.0 * class_intensity(params, b),
                q,
                eq,
                dq,
                deq,
            });
        }
    }
    (z, x)
}

/// PLOB bound under one transmittance convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlobEntry {
    pub convention: String,
    pub eta: f64,
    pub r_plob: f64,
}

/// Result of the full key-rate evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyReport {
    pub schema: String,
    pub n_rounds: u64,
    pub n_pair: f64,
    pub pairs_formed: u64,
    pub m_z_signal: u64,
    pub m_x_matched: u64,
    pub bounds: YieldBounds,
    pub m11_z: f64,
    pub e11_ph: f64,
    /// Key length, negative values kept.
    pub k: f64,
    /// `k / n_pair`.
    pub r: f64,
    /// `max(r, 0)`.
    pub r_clamped: f64,
    pub r_plob: Vec<PlobEntry>,
    pub e_z: Option<f64>,
    pub e_x: Option<f64>,
    pub z_gains: GainTable,
    pub x_gains: GainTable,
    pub assumptions: Vec<String>,
    pub params: ProtocolParams,
}

pub fn plob_conventions(params: &ProtocolParams) -> Vec<PlobEntry> {
    let channel = params.total_channel_loss_db();
    let with_node = channel + 2.0 * params.charlie_loss_db;
    let eff = params.det_efficiency.powi(2);
    let mut out = Vec::new();
    let mut push = |convention: &str, eta: f64| {
        if let Ok(r_plob) = plob_bound(eta) {
            out.push(PlobEntry {
                convention: convention.to_string(),
                eta,
                r_plob,
            });
        }
    };
    if let Ok(t) = transmittance_from_db(channel) {
        push("channel", t);
    }
    if let Ok(t) = transmittance_from_db(with_node) {
        push("channel+node", t);
        push("channel+node+detectors", t * eff);
    }
    out
}

/// Decoy bounds, single-photon count and key rate from a tally.
pub fn evaluate(tally: &TallyTable, params: &ProtocolParams, n_rounds: u64) -> Result<KeyReport, DecoyError> {
    let n_pair = params.pair_opportunities(n_rounds);
    let (z_gains, x_gains) = gains_from_tally(tally, params, n_pair);
    let (z_gains, x_gains) = (
        z_gains.widened(params.decoy_band_sigma),
        x_gains.widened(params.decoy_band_sigma),
    );
    let bounds = lp_yield_bounds(&z_gains, &x_gains, params.lp_cutoff)?;
    let p1 = poisson_pk(params.mu, 1);
    let n_signal = n_pair * z_label_probability(params, IntensityClass::Signal).powi(2);
    let m11_z = n_signal * p1 * p1 * bounds.y11_lower;
    let e11_ph = bounds.e11_upper;
    let k = key_length(m11_z, e11_ph, params.f_ec, tally, params.ec_all_bases)?;
    let r = if n_pair > 0.0 { k / n_pair } else { 0.0 };
    Ok(KeyReport {
        schema: REPORT_SCHEMA.to_string(),
        n_rounds,
        n_pair,
        pairs_formed: tally.pairs,
        m_z_signal: tally.z_cell(IntensityClass::Signal, IntensityClass::Signal).m,
        m_x_matched: tally.x_matched_pairs(),
        bounds,
        m11_z,
        e11_ph,
        k,
        r,
        r_clamped: r.max(0.0),
        r_plob: plob_conventions(params),
        e_z: tally.e_z(),
        e_x: tally.e_x(),
        z_gains,
        x_gains,
        assumptions: vec![
            "gains are pairs per pair opportunity; N_pair opportunities split by a-priori label probabilities".into(),
            "M11_Z = N_pair * P(Z signal label)^2 * P1(mu)^2 * Y11_lower".into(),
            "phase error of Z single-photon pairs equals the X single-photon bit error bound".into(),
            "the single-photon pair yield Y11 is the same in both bases".into(),
            "pairs with a vacuum user have X error 1/2".into(),
            format!(
                "each gain constraint is widened by {} Poisson standard deviations of its count; no other finite-size corrections",
                params.decoy_band_sigma
            ),
        ],
        params: params.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn poisson_examples() {
        assert_eq!(poisson_pk(0.0, 0), 1.0);
        assert_eq!(poisson_pk(0.0, 3), 0.0);
        let p = poisson_pk(0.3958, 1);
        let exact = 0.3958 * (-0.3958f64).exp();
        assert!((p - exact).abs() <= 1e-12 * exact);
        assert!((p - 0.266429).abs() < 1e-6, "{p}");
        let p3 = poisson_pk(0.7916, 3);
        let exact3 = 0.7916f64.powi(3) / 6.0 * (-0.7916f64).exp();
        assert!((p3 - exact3).abs() <= 1e-12 * exact3);
        let total: f64 = (0..=40).map(|k| poisson_pk(0.7916, k)).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let tail = poisson_tail(0.7916, 5);
        let direct = 1.0 - (0..=5).map(|k| poisson_pk(0.7916, k)).sum::<f64>();
        assert!((tail - direct).abs() < 1e-13);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(binary_entropy(0.5).unwrap(), 1.0);
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        let h = binary_entropy(0.2692).unwrap();
        let oracle = -(0.2692f64.ln() * 0.2692 + 0.7308f64.ln() * 0.7308) / 2f64.ln();
        assert!((h - oracle).abs() < 1e-12);
        assert!((h - 0.840314).abs() < 1e-6, "{h}");
        assert!(binary_entropy(-0.1).is_err());
        assert!(binary_entropy(1.1).is_err());
    }

    #[test]
    fn plob_examples() {
        assert!((plob_bound(0.5).unwrap() - 1.0).abs() < 1e-15);
        let eta = 1e-9;
        assert!((plob_bound(eta).unwrap() / (eta / std::f64::consts::LN_2) - 1.0).abs() < 1e-8);
        let eta = 10f64.powf(-5.736);
        assert!((plob_bound(eta).unwrap() / 2.6497e-6 - 1.0).abs() < 1e-4);
        assert!(plob_bound(0.0).is_err());
        assert!(plob_bound(1.0).is_err());
    }

    #[test]
    fn key_length_examples() {
        let t = TallyTable::default();
        assert_eq!(key_length(1000.0, 0.0, 1.06, &t, false).unwrap(), 1000.0);
        let mut t = TallyTable::default();
        t.z[2][2] = crate::pairing::Cell { m: 100, e: 3 };
        assert!(key_length(1000.0, 0.5, 1.06, &t, false).unwrap() < 0.0);
        assert!(key_length(1000.0, 0.6, 1.06, &t, false).is_err());
    }

    #[test]
    fn zero_gains_give_zero_yield() {
        let g = GainTable {
            entries: [
                (0.0, 0.0),
                (0.0, 0.3958),
                (0.3958, 0.0),
                (0.0275, 0.0275),
                (0.3958, 0.3958),
            ]
            .iter()
            .map(|&(a, b)| GainEntry::exact(a, b, 0.0, 0.0))
            .collect(),
        };
        assert_eq!(y11_lower_bound(&g, 10).unwrap(), Some(0.0));
    }

    #[test]
    fn malformed_gains_rejected() {
        let g = GainTable {
            entries: vec![GainEntry::exact(0.1, 0.1, 0.1, 0.2)],
        };
        assert!(y11_lower_bound(&g, 10).is_err());
    }

    proptest! {
        #[test]
        fn entropy_symmetric_and_bounded(x in 0.0f64..=1.0) {
            let h = binary_entropy(x).unwrap();
            prop_assert!((h - binary_entropy(1.0 - x).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&h));
        }

        #[test]
        fn entropy_concave(a in 0.001f64..0.999, b in 0.001f64..0.999) {
            prop_assume!((a - b).abs() > 1e-3);
            let mid = binary_entropy(0.5 * (a + b)).unwrap();
            let chord = 0.5 * (binary_entropy(a).unwrap() + binary_entropy(b).unwrap());
            prop_assert!(mid > chord);
        }

        #[test]
        fn plob_increasing(a in 1e-12f64..0.999, b in 1e-12f64..0.999) {
            prop_assume!(a < b);
            prop_assert!(plob_bound(a).unwrap() < plob_bound(b).unwrap());
        }

        #[test]
        fn key_length_monotone(m11 in 0.0f64..1e6, e1 in 0.0f64..0.5, e2 in 0.0f64..0.5, m in 1u64..10_000, k1 in 0u64..5000, k2 in 0u64..5000) {
            let (elo, ehi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            let (lo, hi) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
            let mk = |e: u64| {
                let mut t = TallyTable::default();
                t.z[2][2] = crate::pairing::Cell { m, e: e.min(m / 2) };
                t
            };
            let t = mk(lo);
            prop_assert!(key_length(m11, elo, 1.06, &t, false).unwrap() >= key_length(m11, ehi, 1.06, &t, false).unwrap());
            prop_assert!(key_length(m11, elo, 1.06, &mk(lo), false).unwrap() >= key_length(m11, elo, 1.06, &mk(hi), false).unwrap());
            prop_assert!(key_length(m11, elo, 1.06, &t, false).unwrap() <= m11);
        }
    }
}
