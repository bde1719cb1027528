#![allow(dead_code)]

use fmqkd::decoy::{GainEntry, GainTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Poisson probability evaluated in log space, independent of the library's
/// iterative product.
pub fn poisson_log(mu: f64, k: u32) -> f64 {
    if mu == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    let log_fact: f64 = (1..=k).map(|i| (i as f64).ln()).sum();
    (k as f64 * mu.ln() - mu - log_fact).exp()
}

/// Photon-number yields and error yields of a known channel.
pub struct Channel {
    pub y: Vec<Vec<f64>>,
    pub ey: Vec<Vec<f64>>,
}

pub const FORWARD_CUTOFF: usize = 60;

impl Channel {
    /// Threshold-detector channel: each photon survives with `eta_a`/`eta_b`,
    /// plus background `pd`. Errors are 1/2 for pairs with a vacuum user and
    /// `e_mis + (1/2 - e_mis)` weighted by the background share otherwise.
    pub fn threshold(eta_a: f64, eta_b: f64, pd: f64, e_mis: f64) -> Self {
        let n = FORWARD_CUTOFF + 1;
        let mut y = vec![vec![0.0; n]; n];
        let mut ey = vec![vec![0.0; n]; n];
        for k in 0..n {
            for m in 0..n {
                let none = (1.0 - pd) * (1.0 - eta_a).powi(k as i32) * (1.0 - eta_b).powi(m as i32);
                let yield_km = 1.0 - none;
                y[k][m] = yield_km;
                ey[k][m] = if k == 0 || m == 0 {
                    0.5 * yield_km
                } else {
                    let signal = yield_km - pd;
                    e_mis * signal.max(0.0) + 0.5 * (yield_km - signal.max(0.0))
                };
            }
        }
        Self { y, ey }
    }

    pub fn single_photon() -> Self {
        let n = FORWARD_CUTOFF + 1;
        let mut y = vec![vec![0.0; n]; n];
        let ey = vec![vec![0.0; n]; n];
        y[1][1] = 1.0;
        Self { y, ey }
    }

    pub fn gain(&self, xa: f64, xb: f64) -> GainEntry {
        let mut q = 0.0;
        let mut eq = 0.0;
        for k in 0..=FORWARD_CUTOFF {
            let pk = poisson_log(xa, k as u32);
            for m in 0..=FORWARD_CUTOFF {
                let w = pk * poisson_log(xb, m as u32);
                q += w * self.y[k][m];
                eq += w * self.ey[k][m];
            }
        }
        GainEntry::exact(xa, xb, q, eq.min(q))
    }

    pub fn gains(&self, levels: &[f64]) -> GainTable {
        let mut t = GainTable::default();
        for &a in levels {
            for &b in levels {
                t.entries.push(self.gain(a, b));
            }
        }
        t
    }

    pub fn e11(&self) -> f64 {
        self.ey[1][1] / self.y[1][1]
    }
}

pub struct Instance {
    pub channel: Channel,
    pub mu: f64,
    pub nu: f64,
}

pub fn random_instances(count: usize, seed: u64) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let eta_a = 10f64.powf(rng.random_range(-4.0..-1.0));
            let eta_b = 10f64.powf(rng.random_range(-4.0..-1.0));
            let pd = 10f64.powf(rng.random_range(-8.0..-5.0));
            let e_mis = rng.random_range(0.0..0.3);
            let mu = rng.random_range(0.1..0.6);
            let nu = rng.random_range(0.01..mu / 3.0);
            Instance {
                channel: Channel::threshold(eta_a, eta_b, pd, e_mis),
                mu,
                nu,
            }
        })
        .collect()
}
