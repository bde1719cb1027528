mod common;

use common::{random_instances, Channel};
use fmqkd::decoy::{e11_upper_bound, lp_yield_bounds, y11_lower_bound};

#[test]
fn bounds_contain_truth_on_random_channels() {
    for (i, inst) in random_instances(100, 7).iter().enumerate() {
        let z = inst.channel.gains(&[0.0, inst.nu, inst.mu]);
        let x = inst.channel.gains(&[0.0, 2.0 * inst.nu, 2.0 * inst.mu]);
        let b = lp_yield_bounds(&z, &x, 10).unwrap();
        assert!(b.feasible, "instance {i} infeasible");
        let y11 = inst.channel.y[1][1];
        assert!(
            b.y11_lower <= y11 * (1.0 + 1e-9),
            "instance {i}: {} > {y11}",
            b.y11_lower
        );
        let e11 = inst.channel.e11();
        assert!(
            b.e11_upper >= e11 * (1.0 - 1e-9),
            "instance {i}: {} < {e11}",
            b.e11_upper
        );
    }
}

#[test]
fn perfect_single_photon_channel() {
    let ch = Channel::single_photon();
    let g = ch.gains(&[0.0, 0.0275, 0.3958]);
    let y11 = y11_lower_bound(&g, 10).unwrap().unwrap();
    assert!(y11 >= 0.95, "{y11}");
}

#[test]
fn gap_is_small_at_table_intensities() {
    let ch = Channel::threshold(4.6e-3, 4.6e-3, 1.2e-7, 0.0);
    let (mu, nu) = (0.3958, 0.0275);
    let z = ch.gains(&[0.0, nu, mu]);
    let y11 = y11_lower_bound(&z, 10).unwrap().unwrap();
    let truth = ch.y[1][1];
    assert!(y11 <= truth && y11 >= 0.95 * truth, "{y11} vs {truth}");
}

#[test]
fn adding_a_setting_never_loosens_y11() {
    for inst in random_instances(20, 11) {
        let coarse = inst.channel.gains(&[0.0, inst.mu]);
        let fine = inst.channel.gains(&[0.0, inst.nu, inst.mu]);
        let a = y11_lower_bound(&coarse, 10).unwrap().unwrap();
        let b = y11_lower_bound(&fine, 10).unwrap().unwrap();
        assert!(b >= a - 1e-9 * inst.channel.y[1][1], "{b} < {a}");
    }
}

#[test]
fn e11_bound_is_half_without_information() {
    let ch = Channel::threshold(1e-2, 1e-2, 1e-6, 0.5);
    let x = ch.gains(&[0.0, 0.055, 0.79]);
    let e = e11_upper_bound(&x, 10).unwrap().unwrap();
    assert!((e - 0.5).abs() < 1e-6);
}
