//! Postselection of single-click rounds, pairing under the maximum pairing
//! time, basis and raw-bit assignment, and per-setting tallies.
//!
//! Each user labels a pair by the intensity classes of its two rounds:
//!
//! | rounds            | label      | tally class |
//! |-------------------|------------|-------------|
//! | VAC, VAC          | vacuum     | VAC         |
//! | VAC + SIGNAL      | Z          | SIGNAL      |
//! | VAC + DECOY       | decoy-Z    | DECOY       |
//! | SIGNAL, SIGNAL    | X          | SIGNAL      |
//! | DECOY, DECOY      | X          | DECOY       |
//! | SIGNAL + DECOY    | invalid    | -           |
//!
//! A vacuum pair carries no photons and is compatible with either basis; it is
//! kept so that the decoy analysis sees the vacuum settings.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::optics_sim::{IntensityClass, RoundChoice, RoundRecord};
use crate::params::{PairingStrategy, ProtocolParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Detector {
    L,
    R,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingleClick {
    pub round_index: u64,
    pub t: f64,
    pub detector: Detector,
    pub alice: RoundChoice,
    pub bob: RoundChoice,
}

/// Keeps exactly the rounds where one detector fired, in order.
pub fn postselect<'a, I>(records: I) -> impl Iterator<Item = SingleClick> + 'a
where
    I: IntoIterator<Item = &'a RoundRecord>,
    I::IntoIter: 'a,
{
    records.into_iter().filter_map(|r| {
        let detector = match (r.click_l, r.click_r) {
            (true, false) => Detector::L,
            (false, true) => Detector::R,
            _ => return None,
        };
        Some(SingleClick {
            round_index: r.round_index,
            t: r.t,
            detector,
            alice: r.alice,
            bob: r.bob,
        })
    })
}

/// Indices `(first, second)` of two clicks paired together.
pub type PairIndex = (usize, usize);

/// Holds the earliest unpaired click and pairs it with the next click if that
/// one arrives within `l_max_s`; otherwise the held click is dropped and the
/// new one is held.
pub fn greedy_pair(clicks: &[SingleClick], l_max_s: f64) -> Vec<PairIndex> {
    let mut out = Vec::with_capacity(clicks.len() / 2);
    let mut held: Option<usize> = None;
    for (i, c) in clicks.iter().enumerate() {
        match held {
            Some(h) if c.t - clicks[h].t <= l_max_s => {
                out.push((h, i));
                held = None;
            }
            _ => held = Some(i),
        }
    }
    out
}

/// Maximum-cardinality pairing of consecutive clicks, ties broken by the
/// smallest total gap.
pub fn min_gap_pair(clicks: &[SingleClick], l_max_s: f64) -> Vec<PairIndex> {
    let n = clicks.len();
    // best[i] = (pairs, -total_gap) over the first i clicks.
    let mut best = vec![(0usize, 0.0f64); n + 1];
    let mut took = vec![false; n + 1];
    for i in 2..=n {
        best[i] = best[i - 1];
        let gap = clicks[i - 1].t - clicks[i - 2].t;
        if gap <= l_max_s {
            let cand = (best[i - 2].0 + 1, best[i - 2].1 - gap);
            if cand.0 > best[i].0 || (cand.0 == best[i].0 && cand.1 > best[i].1) {
                best[i] = cand;
                took[i] = true;
            }
        }
    }
    let mut out = Vec::with_capacity(best[n].0);
    let mut i = n;
    while i >= 2 {
        if took[i] {
            out.push((i - 2, i - 1));
            i -= 2;
        } else {
            i -= 1;
        }
    }
    out.reverse();
    out
}

pub fn pair_clicks(clicks: &[SingleClick], l_max_s: f64, strategy: PairingStrategy) -> Vec<PairIndex> {
    match strategy {
        PairingStrategy::Greedy => greedy_pair(clicks, l_max_s),
        PairingStrategy::MinGap => min_gap_pair(clicks, l_max_s),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Basis {
    Z,
    X,
    Discard,
}

/// One user's label for a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UserLabel {
    Vacuum,
    /// One vacuum round and one round of this class (`Signal` is the key
    /// Z label, `Decoy` the decoy-Z label).
    Z(IntensityClass),
    /// Both rounds of this nonzero class.
    X(IntensityClass),
    Invalid,
}

impl UserLabel {
    pub fn of(first: IntensityClass, second: IntensityClass) -> Self {
        use IntensityClass::*;
        match (first, second) {
            (Vac, Vac) => Self::Vacuum,
            (Vac, c) | (c, Vac) => Self::Z(c),
            (a, b) if a == b => Self::X(a),
            _ => Self::Invalid,
        }
    }

    pub fn class(self) -> Option<IntensityClass> {
        match self {
            Self::Vacuum => Some(IntensityClass::Vac),
            Self::Z(c) | Self::X(c) => Some(c),
            Self::Invalid => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub first: SingleClick,
    pub second: SingleClick,
    pub basis: Basis,
    pub bit_a: Option<u8>,
    pub bit_b: Option<u8>,
    /// Tally classes of Alice and Bob.
    pub intensity_combo: (IntensityClass, IntensityClass),
}

impl Pair {
    pub fn is_error(&self) -> Option<bool> {
        Some(self.bit_a? != self.bit_b?)
    }
}

/// Basis and tally classes of a pair.
pub fn assign_basis(first: &SingleClick, second: &SingleClick) -> (Basis, (IntensityClass, IntensityClass)) {
    let la = UserLabel::of(first.alice.class, second.alice.class);
    let lb = UserLabel::of(first.bob.class, second.bob.class);
    let combo = match (la.class(), lb.class()) {
        (Some(a), Some(b)) => (a, b),
        _ => return (Basis::Discard, (IntensityClass::Vac, IntensityClass::Vac)),
    };
    use UserLabel::*;
    let basis = match (la, lb) {
        (Vacuum | Z(_), Vacuum | Z(_)) => Basis::Z,
        (Vacuum | X(_), Vacuum | X(_)) => Basis::X,
        _ => Basis::Discard,
    };
    (basis, combo)
}

/// Z-basis bits: `bit_a` is 0 when Alice's nonzero round comes first, and
/// `bit_b` is the complement of the same rule for Bob. `None` unless both
/// users hold a Z or decoy-Z label.
pub fn z_bits(first: &SingleClick, second: &SingleClick) -> Option<(u8, u8)> {
    let position = |a: IntensityClass, b: IntensityClass| match UserLabel::of(a, b) {
        UserLabel::Z(_) => Some(u8::from(a == IntensityClass::Vac)),
        _ => None,
    };
    let bit_a = position(first.alice.class, second.alice.class)?;
    let bit_b = 1 - position(first.bob.class, second.bob.class)?;
    Some((bit_a, bit_b))
}

/// X-basis sifting and bits. The relative phase between the two rounds is
/// the modulated slice difference plus the compensation phase; pairs are kept
/// only when it lands on slice 0 or slice D/2 (optionally one slice away).
pub fn x_bits(
    first: &SingleClick,
    second: &SingleClick,
    delta_phi_comp: f64,
    d: u32,
    adjacent: bool,
) -> Option<(u8, u8)> {
    let d_i = d as i64;
    let delta_a = second.alice.phase_index as i64 - first.alice.phase_index as i64;
    let delta_b = second.bob.phase_index as i64 - first.bob.phase_index as i64;
    let slices = (delta_a - delta_b) as f64 + delta_phi_comp.rem_euclid(TAU) * d as f64 / TAU;
    let q = (slices.round() as i64).rem_euclid(d_i);
    let near = |target: i64| {
        let dist = (q - target).rem_euclid(d_i).min((target - q).rem_euclid(d_i));
        dist == 0 || (adjacent && dist == 1)
    };
    let flipped = if near(0) {
        false
    } else if d.is_multiple_of(2) && near(d_i / 2) {
        true
    } else {
        return None;
    };
    let bit_b = u8::from(flipped ^ (first.detector != second.detector));
    Some((0, bit_b))
}

/// Builds a pair with basis and bits. `delta_phi_comp` is needed only for X
/// pairs; an X pair without it, or rejected by sifting, is discarded.
pub fn make_pair(
    first: SingleClick,
    second: SingleClick,
    delta_phi_comp: Option<f64>,
    params: &ProtocolParams,
) -> Pair {
    let (mut basis, intensity_combo) = assign_basis(&first, &second);
    let bits = match basis {
        Basis::Z => z_bits(&first, &second),
        Basis::X => {
            let bits = delta_phi_comp.and_then(|c| x_bits(&first, &second, c, params.d, params.x_adjacent_slices));
            if bits.is_none() {
                basis = Basis::Discard;
            }
            bits
        }
        Basis::Discard => None,
    };
    Pair {
        first,
        second,
        basis,
        bit_a: bits.map(|b| b.0),
        bit_b: bits.map(|b| b.1),
        intensity_combo,
    }
}

/// Pair count and error count of one tally cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub m: u64,
    pub e: u64,
}

impl Cell {
    pub fn error_rate(&self) -> Option<f64> {
        (self.m > 0).then(|| self.e as f64 / self.m as f64)
    }

    fn add(&mut self, other: Cell) {
        self.m += other.m;
        self.e += other.e;
    }
}

/// Pair and error counts per basis and `(alice class, bob class)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TallyTable {
    pub z: [[Cell; 3]; 3],
    pub x: [[Cell; 3]; 3],
    /// All pairs formed, including discarded ones.
    pub pairs: u64,
    pub discarded: u64,
}

impl TallyTable {
    pub fn record(&mut self, pair: &Pair) {
        self.pairs += 1;
        let (a, b) = (pair.intensity_combo.0.index(), pair.intensity_combo.1.index());
        let cell = match pair.basis {
            Basis::Z => &mut self.z[a][b],
            Basis::X => &mut self.x[a][b],
            Basis::Discard => {
                self.discarded += 1;
                return;
            }
        };
        cell.m += 1;
        cell.e += u64::from(pair.is_error() == Some(true));
    }

    pub fn merge(&mut self, other: &TallyTable) {
        for i in 0..3 {
            for j in 0..3 {
                self.z[i][j].add(other.z[i][j]);
                self.x[i][j].add(other.x[i][j]);
            }
        }
        self.pairs += other.pairs;
        self.discarded += other.discarded;
    }

    pub fn z_cell(&self, a: IntensityClass, b: IntensityClass) -> Cell {
        self.z[a.index()][b.index()]
    }

    pub fn x_cell(&self, a: IntensityClass, b: IntensityClass) -> Cell {
        self.x[a.index()][b.index()]
    }

    /// Z cells that carry bits for both users.
    pub fn z_bit_cells(&self) -> impl Iterator<Item = ((IntensityClass, IntensityClass), Cell)> + '_ {
        nonvacuum_combos().map(|(a, b)| ((a, b), self.z_cell(a, b)))
    }

    /// X cells with both users on nonzero classes.
    pub fn x_bit_cells(&self) -> impl Iterator<Item = ((IntensityClass, IntensityClass), Cell)> + '_ {
        nonvacuum_combos().map(|(a, b)| ((a, b), self.x_cell(a, b)))
    }

    /// Error rate of the key cell (SIGNAL, SIGNAL) in the Z basis.
    pub fn e_z(&self) -> Option<f64> {
        self.z_cell(IntensityClass::Signal, IntensityClass::Signal).error_rate()
    }

    /// Error rate over X cells where both users used the same nonzero class.
    pub fn e_x(&self) -> Option<f64> {
        let mut c = self.x_cell(IntensityClass::Signal, IntensityClass::Signal);
        c.add(self.x_cell(IntensityClass::Decoy, IntensityClass::Decoy));
        c.error_rate()
    }

    pub fn x_matched_pairs(&self) -> u64 {
        self.x_cell(IntensityClass::Signal, IntensityClass::Signal).m
            + self.x_cell(IntensityClass::Decoy, IntensityClass::Decoy).m
    }
}

fn nonvacuum_combos() -> impl Iterator<Item = (IntensityClass, IntensityClass)> {
    use IntensityClass::*;
    [Decoy, Signal]
        .into_iter()
        .flat_map(|a| [Decoy, Signal].into_iter().map(move |b| (a, b)))
}

/// Tallies every pair.
pub fn tally<'a, I: IntoIterator<Item = &'a Pair>>(pairs: I) -> TallyTable {
    let mut t = TallyTable::default();
    for p in pairs {
        t.record(p);
    }
    t
}
