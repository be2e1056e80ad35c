#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use branchfrac::atomic::{LevelScheme, MagneticField, PolarizationGeometry, C64};
use branchfrac::constants;
use branchfrac::obe::*;

pub const MHZ: f64 = 2.0 * PI * 1e6;

pub fn random_state(rng: &mut ChaCha8Rng) -> DensityMatrix {
    let g = DMatrix::<C64>::from_fn(8, 8, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
    let m = &g * g.adjoint();
    let tr = m.trace();
    DensityMatrix::new(m / tr).unwrap()
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
        if v.norm() > 0.1 {
            return v.normalize();
        }
    }
}

fn random_geometry(rng: &mut ChaCha8Rng) -> PolarizationGeometry {
    let k = random_unit(rng);
    let e = random_unit(rng);
    let e = (e - k * e.dot(&k)).normalize();
    PolarizationGeometry::new(k, e).unwrap()
}

pub fn random_setup(rng: &mut ChaCha8Rng) -> Setup {
    let mut s = Setup::nominal();
    s.field = MagneticField::new(rng.random::<f64>() * 3e-4, random_unit(rng)).unwrap();
    s.drives.blue.rabi = rng.random::<f64>() * 30.0 * MHZ;
    s.drives.blue.detuning = (rng.random::<f64>() - 0.5) * 200.0 * MHZ;
    s.drives.blue.polarization = random_geometry(rng);
    s.drives.repump.rabi = rng.random::<f64>() * 40.0 * MHZ;
    s.drives.repump.detuning = (rng.random::<f64>() - 0.5) * 200.0 * MHZ;
    s.drives.repump.polarization = random_geometry(rng);
    let p = 0.5 + 0.5 * rng.random::<f64>();
    s.with_scheme(LevelScheme::new(p, constants::TAU_P, constants::TAU_D32, constants::TAU_D52).unwrap())
}

pub fn switch(rng: &mut ChaCha8Rng) -> DriveState {
    if rng.random::<bool>() {
        DriveState::On
    } else {
        DriveState::Off
    }
}

/// (Ω²/4)/(δ² + Ω²/2 + Γ²/4)
pub fn two_level(omega: f64, delta: f64, gamma: f64) -> f64 {
    omega * omega / 4.0 / (delta * delta + omega * omega / 2.0 + gamma * gamma / 4.0)
}

/// Worst Hermiticity, trace and (most negative) eigenvalue errors over
/// `draws` random evolutions of up to 3 µs.
pub fn physicality(seed: u64, draws: usize) -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut herm, mut trace, mut eig) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..draws {
        let setup = random_setup(&mut rng);
        let l = setup.liouvillian(switch(&mut rng), switch(&mut rng)).unwrap();
        let rho0 = random_state(&mut rng);
        let t = rng.random::<f64>() * 3e-6;
        let rho = evolve(&rho0, &l, t).unwrap();
        herm = herm.max(rho.hermiticity_error());
        trace = trace.max((rho.trace() - 1.0).norm());
        eig = eig.min(rho.min_eigenvalue());
    }
    (herm, trace, eig)
}

/// Largest |ρ(t1+t2) − ρ(t2)∘ρ(t1)| element over random pairs.
pub fn semigroup_error(seed: u64, draws: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let setup = random_setup(&mut rng);
        let l = setup.liouvillian(switch(&mut rng), switch(&mut rng)).unwrap();
        let rho0 = random_state(&mut rng);
        let t1 = rng.random::<f64>() * 2.5e-6;
        let t2 = rng.random::<f64>() * 2.5e-6;
        let once = evolve(&rho0, &l, t1 + t2).unwrap();
        let twice = evolve(&evolve(&rho0, &l, t1).unwrap(), &l, t2).unwrap();
        let d = (once.matrix() - twice.matrix()).iter().map(|z| z.norm()).fold(0.0, f64::max);
        worst = worst.max(d);
    }
    worst
}

/// Worst |σ_PP − two-level formula| over a 3 × 7 (Ω, δ) grid with p = 1,
/// B = 0, π light and the repump off.
pub fn two_level_error() -> f64 {
    let scheme = LevelScheme::with_limits(1.0, constants::TAU_P, constants::TAU_D32, constants::TAU_D52).unwrap();
    let mut setup = Setup::nominal().with_scheme(scheme).with_extinctions(f64::NEG_INFINITY, f64::NEG_INFINITY);
    setup.field = MagneticField::along_z(0.0).unwrap();
    setup.drives.blue.polarization = PolarizationGeometry::parallel_to_z();
    setup.drives.repump.rabi = 0.0;
    // |⟨½ ½; 1 0|½ ½⟩| = 1/√3, reduced element √(2J'+1) = √2
    let coupling = (2.0f64 / 3.0).sqrt();
    let gamma = 1.0 / constants::TAU_P;
    let mut worst = 0.0f64;
    for omega in [3.0, 15.0, 60.0] {
        for delta in [-80.0, -25.0, -6.0, 0.0, 6.0, 25.0, 80.0] {
            let mut s = setup.clone();
            s.drives.blue.rabi = omega * MHZ;
            s.drives.blue.detuning = delta * MHZ;
            let rho = steady_state(&s.liouvillian(DriveState::On, DriveState::Off).unwrap()).unwrap();
            let expect = two_level(omega * MHZ * coupling, delta * MHZ, gamma);
            worst = worst.max((rho.p_population() - expect).abs());
        }
    }
    worst
}
