use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use branchfrac::atomic::{MagneticField, C64};
use branchfrac::constants;
use branchfrac::obe::*;

mod common;
use common::*;

#[test]
fn random_evolutions_stay_physical() {
    let (herm, trace, eig) = physicality(2024, 1000);
    assert!(herm < 1e-10, "hermiticity {herm:e}");
    assert!(trace < 1e-9, "trace {trace:e}");
    assert!(eig > -1e-9, "min eigenvalue {eig:e}");
}

#[test]
fn generator_preserves_trace() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let l = random_setup(&mut rng).liouvillian(DriveState::On, DriveState::On).unwrap();
        // left null vector: vec(I)
        let mut id = nalgebra::DVector::<C64>::zeros(64);
        for i in 0..8 {
            id[i * 9] = C64::new(1.0, 0.0);
        }
        let left = l.matrix.adjoint() * &id;
        let scale = l.matrix.iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(left.norm() / scale < 1e-9);
    }
}

#[test]
fn semigroup() {
    let d = semigroup_error(77, 100);
    assert!(d < 1e-8, "{d:e}");
}

#[test]
fn two_level_steady_state() {
    let worst = two_level_error();
    assert!(worst < 1e-6, "{worst:e}");
}

/// S, P, D with both fields; returns σ_PP of the steady state.
fn lambda_oracle(o1: f64, d1: f64, o2: f64, d2: f64, p: f64) -> f64 {
    let gamma = 1.0 / constants::TAU_P;
    let c = |x: f64| C64::new(x, 0.0);
    let mut h = DMatrix::<C64>::zeros(3, 3);
    h[(1, 1)] = c(-d1);
    h[(2, 2)] = c(-d1 + d2);
    h[(0, 1)] = c(o1 / 2.0);
    h[(1, 0)] = c(o1 / 2.0);
    h[(1, 2)] = c(o2 / 2.0);
    h[(2, 1)] = c(o2 / 2.0);
    let mut to_s = DMatrix::<C64>::zeros(3, 3);
    to_s[(0, 1)] = c((p * gamma).sqrt());
    let mut to_d = DMatrix::<C64>::zeros(3, 3);
    to_d[(2, 1)] = c(((1.0 - p) * gamma).sqrt());
    let l = lindbladian(&h, &[to_s, to_d]);
    steady_state_matrix(&l).unwrap()[(1, 1)].re
}

#[test]
fn lambda_oracle_traps_at_raman_resonance() {
    let (o1, o2, d2) = (8.7 * MHZ, 18.0 * MHZ, 80.0 * MHZ);
    let on = lambda_oracle(o1, d2, o2, d2, 0.9453);
    let off = lambda_oracle(o1, d2 - 10.0 * MHZ, o2, d2, 0.9453);
    assert!(on < 1e-10, "{on:e}");
    assert!(off > 1e-3);
}

#[test]
fn dark_resonances_sit_at_zeeman_shifted_raman_condition() {
    let setup = Setup::nominal();
    let d2 = setup.drives.repump.detuning;
    let zeeman = constants::BOHR_MAGNETON_RAD_PER_S_T * setup.field.magnitude;
    // largest |g_D m_D − g_S m_S| = 4/5·3/2 + 2·1/2
    let reach = 2.2 * zeeman;
    let grid: Vec<f64> = (0..=320).map(|k| d2 - 8.0 * MHZ + 0.05 * MHZ * k as f64).collect();
    let pts = fluorescence_spectrum(&setup, &grid).unwrap();
    let envelope = fluorescence_spectrum(&setup, &[d2 - 12.0 * MHZ, d2 + 12.0 * MHZ]).unwrap();
    let env = envelope.iter().map(|p| p.rate).fold(f64::INFINITY, f64::min);
    let min = pts.iter().map(|p| p.rate).fold(f64::INFINITY, f64::min);
    assert!(min < 0.1 * env, "{min:e} vs {env:e}");
    for w in pts.windows(3) {
        if w[1].rate < w[0].rate && w[1].rate < w[2].rate && w[1].rate < 0.2 * env {
            assert!((w[1].detuning - d2).abs() < reach + 1.0 * MHZ, "dip at {:.2} MHz", (w[1].detuning - d2) / MHZ);
        }
    }
    // outside the Raman window the spectrum is smooth
    let far: Vec<f64> = pts.iter().filter(|p| (p.detuning - d2).abs() > reach + 1.5 * MHZ).map(|p| p.rate).collect();
    assert!(far.iter().all(|&r| r > 0.3 * env));
    let peak = pts.iter().map(|p| p.rate).fold(0.0, f64::max);
    assert!(peak <= setup.scheme.a_sp() / 2.0);
}

#[test]
fn zero_field_pumps_into_zeeman_dark_states() {
    let mut setup = Setup::nominal();
    let lit = fluorescence_spectrum(&setup, &[-27.5 * MHZ]).unwrap()[0].rate;
    setup.field = MagneticField::along_z(0.0).unwrap();
    for d in [-100.0, -27.5, 0.0, 40.0] {
        let r = fluorescence_spectrum(&setup, &[d * MHZ]).unwrap()[0].rate;
        assert!(r < 1e-3 * lit, "{d} MHz: {r:e}");
    }
}
