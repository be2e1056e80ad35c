//! Optical Bloch equations for the 8-level ion.
//!
//! Density matrices are vectorized column-major (`vec(ρ)[i + 8j] = ρ_ij`),
//! which is nalgebra's native storage order, so that
//! `vec(AρB) = (Bᵀ ⊗ A) vec(ρ)`.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector, RowDVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::atomic::{
    coupling_matrix, decay_channels, zeeman_shift, active_sublevels, AtomicError, DecayKind, LevelScheme,
    MagneticField, PolarizationGeometry, RabiConvention, Transition, C64, DIM, P_INDICES, S_INDICES,
};
use crate::chronogram::{Chronogram, ChronogramError, Counter};
use crate::constants;

/// Longest single matrix-exponential step.
pub const MAX_STEP: f64 = 1e-6;

const SUPER: usize = DIM * DIM;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObeError {
    #[error(transparent)]
    Atomic(#[from] AtomicError),
    #[error(transparent)]
    Chronogram(#[from] ChronogramError),
    #[error("Rabi frequency must be non-negative, got {0}")]
    NegativeRabi(f64),
    #[error("extinction must be ≤ 0 dB, got {0}")]
    PositiveExtinction(f64),
    #[error("drive for {got:?} supplied where {expected:?} was expected")]
    WrongTransition { expected: Transition, got: Transition },
    #[error("polarization spherical components have norm² {0}, expected 1")]
    PolarizationNotNormalized(f64),
    #[error("evolution time must be non-negative, got {0}")]
    NegativeTime(f64),
    #[error("integration failed at t = {reached} s: {reason}")]
    Integration { reached: f64, reason: String },
    #[error("non-unique steady state: null space has dimension {dimension}")]
    NonUniqueSteadyState { dimension: usize },
    #[error("invalid density matrix: {0}")]
    InvalidDensity(String),
    #[error("cycle expectations did not converge within {0} cycles")]
    NotConverged(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriveState {
    On,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaserDrive {
    pub transition: Transition,
    /// rad/s
    pub rabi: f64,
    /// Laser minus atomic frequency, rad/s.
    pub detuning: f64,
    pub polarization: PolarizationGeometry,
    pub state: DriveState,
    /// Power extinction when OFF, dB; `-inf` is a perfect switch.
    pub extinction_db: f64,
}

impl LaserDrive {
    pub fn new(transition: Transition, rabi: f64, detuning: f64, polarization: PolarizationGeometry) -> Result<Self, ObeError> {
        let d = LaserDrive { transition, rabi, detuning, polarization, state: DriveState::On, extinction_db: f64::NEG_INFINITY };
        d.validate()?;
        Ok(d)
    }

    pub fn blue_nominal() -> Self {
        Self::new(Transition::Cooling, constants::OMEGA_BLUE, constants::DETUNING_BLUE, PolarizationGeometry::nominal()).unwrap()
    }

    /// Repump at the Table I drive, leaking at the measured AOM extinction.
    pub fn repump_nominal() -> Self {
        Self::new(Transition::Repump, constants::OMEGA_REPUMP, constants::DETUNING_REPUMP, PolarizationGeometry::nominal())
            .unwrap()
            .with_extinction(constants::EXTINCTION_DB)
    }

    pub fn validate(&self) -> Result<(), ObeError> {
        if !(self.rabi >= 0.0) {
            return Err(ObeError::NegativeRabi(self.rabi));
        }
        if self.extinction_db > 0.0 || self.extinction_db.is_nan() {
            return Err(ObeError::PositiveExtinction(self.extinction_db));
        }
        PolarizationGeometry::new(self.polarization.propagation, self.polarization.polarization)?;
        Ok(())
    }

    pub fn with_state(&self, state: DriveState) -> Self {
        LaserDrive { state, ..self.clone() }
    }

    pub fn with_rabi(&self, rabi: f64) -> Self {
        LaserDrive { rabi, ..self.clone() }
    }

    pub fn with_detuning(&self, detuning: f64) -> Self {
        LaserDrive { detuning, ..self.clone() }
    }

    pub fn with_extinction(&self, extinction_db: f64) -> Self {
        LaserDrive { extinction_db, ..self.clone() }
    }

    pub fn with_polarization(&self, polarization: PolarizationGeometry) -> Self {
        LaserDrive { polarization, ..self.clone() }
    }

    /// Amplitude leak factor 10^(dB/20).
    pub fn leak_amplitude(&self) -> f64 {
        if self.extinction_db == f64::NEG_INFINITY {
            0.0
        } else {
            10f64.powf(self.extinction_db / 20.0)
        }
    }

    pub fn effective_rabi(&self) -> f64 {
        match self.state {
            DriveState::On => self.rabi,
            DriveState::Off => self.rabi * self.leak_amplitude(),
        }
    }
}

/// Cooling (S↔P) and repump (D↔P) drives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Drives {
    pub blue: LaserDrive,
    pub repump: LaserDrive,
}

impl Drives {
    pub fn nominal() -> Self {
        Drives { blue: LaserDrive::blue_nominal(), repump: LaserDrive::repump_nominal() }
    }

    pub fn switched(&self, blue: DriveState, repump: DriveState) -> Self {
        Drives { blue: self.blue.with_state(blue), repump: self.repump.with_state(repump) }
    }
}

/// Everything that fixes the Liouvillian apart from the switch states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setup {
    pub scheme: LevelScheme,
    pub field: MagneticField,
    pub drives: Drives,
    pub convention: RabiConvention,
}

impl Setup {
    pub fn nominal() -> Self {
        Setup {
            scheme: LevelScheme::nominal(),
            field: MagneticField::nominal(),
            drives: Drives::nominal(),
            convention: RabiConvention::default(),
        }
    }

    pub fn liouvillian(&self, blue: DriveState, repump: DriveState) -> Result<Liouvillian, ObeError> {
        let d = self.drives.switched(blue, repump);
        build_liouvillian_with(&self.scheme, &self.field, &d.blue, &d.repump, self.convention)
    }

    pub fn with_blue_rabi(&self, rabi: f64) -> Self {
        let mut s = self.clone();
        s.drives.blue.rabi = rabi;
        s
    }

    pub fn with_repump_rabi(&self, rabi: f64) -> Self {
        let mut s = self.clone();
        s.drives.repump.rabi = rabi;
        s
    }

    pub fn with_extinctions(&self, blue_db: f64, repump_db: f64) -> Self {
        let mut s = self.clone();
        s.drives.blue.extinction_db = blue_db;
        s.drives.repump.extinction_db = repump_db;
        s
    }

    pub fn with_scheme(&self, scheme: LevelScheme) -> Self {
        Setup { scheme, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix(DMatrix<C64>);

impl DensityMatrix {
    pub fn new(m: DMatrix<C64>) -> Result<Self, ObeError> {
        if m.shape() != (DIM, DIM) {
            return Err(ObeError::InvalidDensity(format!("shape {:?}", m.shape())));
        }
        let rho = DensityMatrix(m);
        rho.check(1e-10, 1e-9, 1e-9)?;
        Ok(rho)
    }

    pub fn from_matrix_unchecked(m: DMatrix<C64>) -> Self {
        DensityMatrix(m)
    }

    /// Incoherent mixture with the given populations.
    pub fn from_populations(pops: &[(usize, f64)]) -> Result<Self, ObeError> {
        let mut m = DMatrix::zeros(DIM, DIM);
        for &(i, w) in pops {
            m[(i, i)] += C64::new(w, 0.0);
        }
        Self::new(m)
    }

    pub fn pure(index: usize) -> Self {
        let mut m = DMatrix::zeros(DIM, DIM);
        m[(index, index)] = C64::new(1.0, 0.0);
        DensityMatrix(m)
    }

    pub fn mixed(indices: &[usize]) -> Self {
        let w = 1.0 / indices.len() as f64;
        let mut m = DMatrix::zeros(DIM, DIM);
        for &i in indices {
            m[(i, i)] = C64::new(w, 0.0);
        }
        DensityMatrix(m)
    }

    /// Unpolarized ground state.
    pub fn ground() -> Self {
        Self::mixed(&S_INDICES)
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.0
    }

    pub fn to_vec(&self) -> DVector<C64> {
        DVector::from_column_slice(self.0.as_slice())
    }

    pub fn from_vec(v: &DVector<C64>) -> Self {
        DensityMatrix(DMatrix::from_column_slice(DIM, DIM, v.as_slice()))
    }

    pub fn population(&self, i: usize) -> f64 {
        self.0[(i, i)].re
    }

    pub fn populations(&self, indices: &[usize]) -> f64 {
        indices.iter().map(|&i| self.population(i)).sum()
    }

    /// σ_PP, the total P1/2 population.
    pub fn p_population(&self) -> f64 {
        self.populations(&P_INDICES)
    }

    pub fn trace(&self) -> C64 {
        self.0.trace()
    }

    pub fn hermiticity_error(&self) -> f64 {
        (&self.0 - self.0.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let h = (&self.0 + self.0.adjoint()) * C64::new(0.5, 0.0);
        h.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn check(&self, herm_tol: f64, trace_tol: f64, pos_tol: f64) -> Result<(), ObeError> {
        let h = self.hermiticity_error();
        if !(h <= herm_tol) {
            return Err(ObeError::InvalidDensity(format!("not Hermitian (deviation {h:e})")));
        }
        let t = self.trace();
        if !((t.re - 1.0).abs() <= trace_tol && t.im.abs() <= trace_tol) {
            return Err(ObeError::InvalidDensity(format!("trace {t}")));
        }
        let e = self.min_eigenvalue();
        if e < -pos_tol {
            return Err(ObeError::InvalidDensity(format!("negative eigenvalue {e:e}")));
        }
        Ok(())
    }

    fn normalized(mut self) -> Self {
        let t = self.trace().re;
        self.0 /= C64::new(t, 0.0);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Liouvillian {
    pub matrix: DMatrix<C64>,
    pub blue: DriveState,
    pub repump: DriveState,
    pub field: MagneticField,
    pub scheme_hash: String,
    pub a_sp: f64,
}

impl Liouvillian {
    pub fn apply(&self, rho: &DensityMatrix) -> DensityMatrix {
        DensityMatrix::from_vec(&(&self.matrix * rho.to_vec()))
    }
}

fn kron(a: &DMatrix<C64>, b: &DMatrix<C64>) -> DMatrix<C64> {
    a.kronecker(b)
}

/// Lindblad generator for any Hilbert-space dimension:
/// −i(I⊗H − Hᵀ⊗I) + Σ_k (L_k*⊗L_k − ½ I⊗L_k†L_k − ½ (L_k†L_k)ᵀ⊗I).
pub fn lindbladian(h: &DMatrix<C64>, jumps: &[DMatrix<C64>]) -> DMatrix<C64> {
    let n = h.nrows();
    let id = DMatrix::<C64>::identity(n, n);
    let mi = C64::new(0.0, -1.0);
    let mut l = (kron(&id, h) - kron(&h.transpose(), &id)) * mi;
    for j in jumps {
        let jdj = j.adjoint() * j;
        l += kron(&j.conjugate(), j);
        l -= (kron(&id, &jdj) + kron(&jdj.transpose(), &id)) * C64::new(0.5, 0.0);
    }
    l
}

/// Rotating-frame Hamiltonian (rad/s). P1/2 sits at −δ₁ and D3/2 at −δ₁+δ₂,
/// so the Raman resonance is δ₁ = δ₂.
pub fn hamiltonian(
    field: &MagneticField,
    blue: &LaserDrive,
    repump: &LaserDrive,
    convention: RabiConvention,
) -> Result<DMatrix<C64>, ObeError> {
    for (d, expected) in [(blue, Transition::Cooling), (repump, Transition::Repump)] {
        if d.transition != expected {
            return Err(ObeError::WrongTransition { expected, got: d.transition });
        }
        d.validate()?;
    }
    let mut h = DMatrix::<C64>::zeros(DIM, DIM);
    for (i, sl) in active_sublevels().iter().enumerate() {
        let offset = match sl.term {
            crate::atomic::Term::S12 => 0.0,
            crate::atomic::Term::P12 => -blue.detuning,
            _ => -blue.detuning + repump.detuning,
        };
        h[(i, i)] = C64::new(offset + zeeman_shift(*sl, field), 0.0);
    }
    let mut v = DMatrix::<C64>::zeros(DIM, DIM);
    for d in [blue, repump] {
        let a = d.polarization.spherical(field);
        let n = a.norm_sqr();
        if (n - 1.0).abs() > 1e-9 {
            return Err(ObeError::PolarizationNotNormalized(n));
        }
        let amp = 0.5 * d.effective_rabi() * convention.scale(d.transition);
        if amp > 0.0 {
            v += coupling_matrix(d.transition, &a) * C64::new(amp, 0.0);
        }
    }
    h += &v + v.adjoint();
    Ok(h)
}

fn scheme_hash(scheme: &LevelScheme) -> String {
    let json = serde_json::to_vec(scheme).expect("scheme serializes");
    hex::encode(&Sha256::digest(&json)[..8])
}

pub fn build_liouvillian(
    scheme: &LevelScheme,
    field: &MagneticField,
    blue: &LaserDrive,
    repump: &LaserDrive,
) -> Result<Liouvillian, ObeError> {
    build_liouvillian_with(scheme, field, blue, repump, RabiConvention::default())
}

pub fn build_liouvillian_with(
    scheme: &LevelScheme,
    field: &MagneticField,
    blue: &LaserDrive,
    repump: &LaserDrive,
    convention: RabiConvention,
) -> Result<Liouvillian, ObeError> {
    let h = hamiltonian(field, blue, repump, convention)?;
    let jumps: Vec<_> = decay_channels(scheme).iter().map(|j| j.matrix()).collect();
    Ok(Liouvillian {
        matrix: lindbladian(&h, &jumps),
        blue: blue.state,
        repump: repump.state,
        field: *field,
        scheme_hash: scheme_hash(scheme),
        a_sp: scheme.a_sp(),
    })
}

fn exp_checked(m: DMatrix<C64>, reached: f64) -> Result<DMatrix<C64>, ObeError> {
    let e = m.exp();
    if e.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(ObeError::Integration { reached, reason: "non-finite matrix exponential".into() });
    }
    Ok(e)
}

fn substeps(t: f64) -> (usize, f64) {
    let n = ((t / MAX_STEP).ceil() as usize).max(1);
    (n, t / n as f64)
}

/// ρ(t) = exp(Lt)ρ₀, chained over equal sub-steps no longer than [`MAX_STEP`].
pub fn evolve(rho0: &DensityMatrix, l: &Liouvillian, t: f64) -> Result<DensityMatrix, ObeError> {
    if !(t >= 0.0) {
        return Err(ObeError::NegativeTime(t));
    }
    if t == 0.0 {
        return Ok(rho0.clone());
    }
    let (n, dt) = substeps(t);
    let step = exp_checked(&l.matrix * C64::new(dt, 0.0), 0.0)?;
    let mut v = rho0.to_vec();
    for k in 0..n {
        v = &step * v;
        if v.iter().any(|z| !z.re.is_finite()) {
            return Err(ObeError::Integration { reached: (k + 1) as f64 * dt, reason: "state diverged".into() });
        }
    }
    Ok(DensityMatrix::from_vec(&v))
}

/// vec-space row picking out σ_PP.
pub fn p_population_functional() -> DVector<C64> {
    let mut c = DVector::zeros(SUPER);
    for i in P_INDICES {
        c[i + DIM * i] = C64::new(1.0, 0.0);
    }
    c
}

/// Constant-generator propagator over a fixed duration that also accumulates
/// ∫ cᵀ vec(ρ(s)) ds for one linear functional c.
#[derive(Debug, Clone)]
pub struct Propagator {
    pub steps: usize,
    pub dt: f64,
    step: DMatrix<C64>,
    weight: RowDVector<C64>,
}

impl Propagator {
    pub fn new(l: &DMatrix<C64>, duration: f64, functional: &DVector<C64>) -> Result<Self, ObeError> {
        if !(duration >= 0.0) {
            return Err(ObeError::NegativeTime(duration));
        }
        let (steps, dt) = substeps(duration);
        let n = l.nrows();
        // exp([[L, 0], [cᵀ, 0]]·dt) = [[e^{L dt}, 0], [cᵀ∫₀^dt e^{Ls} ds, 1]]
        let mut aug = DMatrix::<C64>::zeros(n + 1, n + 1);
        aug.view_mut((0, 0), (n, n)).copy_from(l);
        for j in 0..n {
            aug[(n, j)] = functional[j];
        }
        let e = exp_checked(aug * C64::new(dt, 0.0), 0.0)?;
        Ok(Propagator {
            steps,
            dt,
            step: e.view((0, 0), (n, n)).into_owned(),
            weight: RowDVector::from_iterator(n, (0..n).map(|j| e[(n, j)])),
        })
    }

    /// Returns the final state and the integral; per-step integrals are pushed
    /// into `cells` when given.
    pub fn run(&self, v0: &DVector<C64>, mut cells: Option<&mut Vec<f64>>) -> (DVector<C64>, f64) {
        let mut v = v0.clone();
        let mut total = 0.0;
        for _ in 0..self.steps {
            let w = (&self.weight * &v)[(0, 0)].re;
            total += w;
            if let Some(c) = cells.as_deref_mut() {
                c.push(w);
            }
            v = &self.step * v;
        }
        (v, total)
    }
}

/// Dimension of the numerical null space of a generator (relative tolerance
/// on the Frobenius norm) and its basis, smallest singular value first.
pub fn null_space_of(l: &DMatrix<C64>, rel_tol: f64) -> (usize, Vec<DVector<C64>>) {
    let svd = l.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let scale = l.norm();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    let dim = order.iter().filter(|&&k| svd.singular_values[k] <= rel_tol * scale).count();
    let vecs = order.iter().take(dim.max(1)).map(|&k| v_t.row(k).adjoint()).collect();
    (dim, vecs)
}

pub fn null_space(l: &Liouvillian, rel_tol: f64) -> (usize, Vec<DVector<C64>>) {
    null_space_of(&l.matrix, rel_tol)
}

/// Unit-trace stationary state of a generator on an n-level space.
pub fn steady_state_matrix(l: &DMatrix<C64>) -> Result<DMatrix<C64>, ObeError> {
    let n = (l.nrows() as f64).sqrt().round() as usize;
    let (dim, vecs) = null_space_of(l, 1e-12);
    if dim > 1 {
        return Err(ObeError::NonUniqueSteadyState { dimension: dim });
    }
    let m = DMatrix::from_column_slice(n, n, vecs[0].as_slice());
    let tr = m.trace();
    if tr.norm() < 1e-12 {
        return Err(ObeError::InvalidDensity("null vector is traceless".into()));
    }
    let m = m / tr;
    Ok((&m + m.adjoint()) * C64::new(0.5, 0.0))
}

/// Unique stationary state of L.
pub fn steady_state(l: &Liouvillian) -> Result<DensityMatrix, ObeError> {
    Ok(DensityMatrix(steady_state_matrix(&l.matrix)?))
}

/// Steady-state σ_PP of the sub-system spanned by `indices` (which must
/// include both P1/2 sublevels), using the given scheme's decay channels
/// restricted to that sub-space.
pub fn closed_p_population(setup: &Setup, blue: DriveState, repump: DriveState, indices: &[usize]) -> Result<f64, ObeError> {
    let d = setup.drives.switched(blue, repump);
    let h = hamiltonian(&setup.field, &d.blue, &d.repump, setup.convention)?;
    let sub = |m: &DMatrix<C64>| DMatrix::from_fn(indices.len(), indices.len(), |i, j| m[(indices[i], indices[j])]);
    let jumps: Vec<_> = decay_channels(&setup.scheme).iter().map(|j| sub(&j.matrix())).collect();
    let rho = steady_state_matrix(&lindbladian(&sub(&h), &jumps))?;
    Ok(indices.iter().enumerate().filter(|(_, i)| P_INDICES.contains(i)).map(|(k, _)| rho[(k, k)].re).sum())
}

/// A_SP·σ_PP, emitted (not detected) blue photons per second.
pub fn blue_scatter_rate(rho: &DensityMatrix, scheme: &LevelScheme) -> f64 {
    scheme.a_sp() * rho.p_population()
}

#[derive(Debug, Clone)]
pub struct PhaseTrace {
    pub label: String,
    pub entry: DensityMatrix,
    pub exit: DensityMatrix,
    /// Expected emitted blue photons in the phase.
    pub emitted: f64,
    pub cell_duration: f64,
    /// Expected emitted blue photons per integration cell.
    pub cells: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ExpectedCounts {
    /// Indexed by [`Counter::index`].
    pub counts: [f64; 4],
    /// Periodic-steady-state phase records; empty for the idealized protocol.
    pub phases: Vec<PhaseTrace>,
    pub cycles: usize,
}

impl ExpectedCounts {
    pub fn get(&self, c: Counter) -> f64 {
        self.counts[c.index()]
    }

    /// The estimator formula applied to expected counts.
    pub fn branching_fraction(&self) -> f64 {
        let sb = self.get(Counter::Nb) - self.get(Counter::NbB);
        let sr = self.get(Counter::Nr) - self.get(Counter::NrB);
        sb / (sb + sr)
    }
}

/// Infinite windows and τ_D → ∞: N_b = p/(1−p), N_r = 1, no background.
pub fn ideal_counts(scheme: &LevelScheme) -> ExpectedCounts {
    let p = scheme.p;
    ExpectedCounts { counts: [p / (1.0 - p), 1.0, 0.0, 0.0], phases: Vec::new(), cycles: 0 }
}

const MAX_CYCLES: usize = 200;

/// Expected emitted blue photons per gate, chained over cycles until the
/// per-window expectations stop changing (1e−10 relative).
pub fn expected_counts(
    chronogram: &Chronogram,
    setup: &Setup,
    entry: Option<&DensityMatrix>,
) -> Result<ExpectedCounts, ObeError> {
    chronogram.validate()?;
    let c = p_population_functional();
    let mut gens: HashMap<(DriveState, DriveState), Liouvillian> = HashMap::new();
    let mut props: HashMap<(DriveState, DriveState, u64), Propagator> = HashMap::new();
    let mut segments: Vec<(String, f64, DriveState, DriveState, Option<Counter>)> = chronogram
        .phases
        .iter()
        .map(|p| (p.label.clone(), p.duration, p.blue, p.repump, p.gate))
        .collect();
    if chronogram.pad > 0.0 {
        segments.push(("pad".into(), chronogram.pad, DriveState::Off, DriveState::Off, None));
    }
    for (_, t, b, r, _) in &segments {
        if !gens.contains_key(&(*b, *r)) {
            gens.insert((*b, *r), setup.liouvillian(*b, *r)?);
        }
        let key = (*b, *r, t.to_bits());
        if !props.contains_key(&key) {
            props.insert(key, Propagator::new(&gens[&(*b, *r)].matrix, *t, &c)?);
        }
    }
    let a_sp = setup.scheme.a_sp();
    let mut v = entry.cloned().unwrap_or_else(DensityMatrix::ground).to_vec();
    let mut prev: Option<[f64; 4]> = None;
    for cycle in 1..=MAX_CYCLES {
        let mut counts = [0.0; 4];
        let mut phases = Vec::with_capacity(segments.len());
        for (label, t, b, r, gate) in &segments {
            let prop = &props[&(*b, *r, t.to_bits())];
            let mut cells = Vec::with_capacity(prop.steps);
            let entry_state = DensityMatrix::from_vec(&v);
            let (next, integral) = prop.run(&v, Some(&mut cells));
            v = next;
            let emitted = a_sp * integral;
            cells.iter_mut().for_each(|x| *x *= a_sp);
            if let Some(g) = gate {
                counts[g.index()] += emitted;
            }
            phases.push(PhaseTrace {
                label: label.clone(),
                entry: entry_state,
                exit: DensityMatrix::from_vec(&v),
                emitted,
                cell_duration: prop.dt,
                cells,
            });
        }
        if v.iter().any(|z| !z.re.is_finite()) {
            return Err(ObeError::Integration { reached: cycle as f64 * chronogram.cycle_duration(), reason: "state diverged".into() });
        }
        if let Some(p) = prev {
            if p.iter().zip(&counts).all(|(a, b)| (a - b).abs() <= 1e-10 * b.abs() + 1e-15) {
                return Ok(ExpectedCounts { counts, phases, cycles: cycle });
            }
        }
        prev = Some(counts);
    }
    Err(ObeError::NotConverged(MAX_CYCLES))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumPoint {
    /// Blue detuning δ₁, rad/s.
    pub detuning: f64,
    /// Steady-state emitted blue photons per second.
    pub rate: f64,
}

/// Steady-state blue scatter rate versus δ₁ with both drives on.
pub fn fluorescence_spectrum(setup: &Setup, detunings: &[f64]) -> Result<Vec<SpectrumPoint>, ObeError> {
    detunings
        .par_iter()
        .map(|&d| {
            let mut s = setup.clone();
            s.drives.blue.detuning = d;
            let l = s.liouvillian(DriveState::On, DriveState::On)?;
            let rho = steady_state(&l)?;
            Ok(SpectrumPoint { detuning: d, rate: blue_scatter_rate(&rho, &s.scheme) })
        })
        .collect()
}

pub fn write_spectrum_csv<W: Write>(points: &[SpectrumPoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "detuning_Hz,rate_per_s")?;
    for p in points {
        writeln!(out, "{},{}", p.detuning / (2.0 * std::f64::consts::PI), p.rate)?;
    }
    Ok(())
}

/// Ground state right after a blue photon: the blue collapse operators
/// applied to the closed S–P steady state.
pub fn post_emission_state(setup: &Setup) -> Result<DensityMatrix, ObeError> {
    let closed = LevelScheme::with_limits(1.0, setup.scheme.tau_p, constants::TAU_D32, setup.scheme.tau_d52)?;
    let l = setup.with_scheme(closed.clone()).liouvillian(DriveState::On, DriveState::Off)?;
    let ss = steady_state(&l)?;
    let mut m = DMatrix::<C64>::zeros(DIM, DIM);
    for op in decay_channels(&closed).iter().filter(|o| o.kind == DecayKind::Blue) {
        let j = op.matrix();
        m += &j * ss.matrix() * j.adjoint();
    }
    Ok(DensityMatrix(m).normalized())
}

/// σ_PP(t) sampled on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub sigma_pp: Vec<f64>,
}

pub fn p_population_trajectory(
    rho0: &DensityMatrix,
    l: &Liouvillian,
    horizon: f64,
    samples: usize,
) -> Result<Trajectory, ObeError> {
    let samples = samples.max(2);
    let dt = horizon / (samples - 1) as f64;
    let step = exp_checked(&l.matrix * C64::new(dt, 0.0), 0.0)?;
    let mut v = rho0.to_vec();
    let mut times = Vec::with_capacity(samples);
    let mut sigma = Vec::with_capacity(samples);
    for k in 0..samples {
        times.push(k as f64 * dt);
        sigma.push(DensityMatrix::from_vec(&v).p_population());
        v = &step * v;
    }
    Ok(Trajectory { times, sigma_pp: sigma })
}

/// Exact ∫₀^t σ_PP ds from ρ₀ under L.
pub fn integrated_p_population(rho0: &DensityMatrix, l: &Liouvillian, t: f64) -> Result<f64, ObeError> {
    let prop = Propagator::new(&l.matrix, t, &p_population_functional())?;
    Ok(prop.run(&rho0.to_vec(), None).1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atomic::D_INDICES;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;

    fn dark() -> Setup {
        Setup::nominal().with_extinctions(f64::NEG_INFINITY, f64::NEG_INFINITY)
    }

    #[test]
    fn vec_round_trip() {
        let m = DMatrix::from_fn(DIM, DIM, |i, j| C64::new(i as f64, j as f64));
        let rho = DensityMatrix::from_matrix_unchecked(m.clone());
        let v = rho.to_vec();
        assert_eq!(v[3 + DIM * 5], m[(3, 5)]);
        assert_eq!(DensityMatrix::from_vec(&v).matrix(), &m);
    }

    #[test]
    fn leak_scaling() {
        let d = LaserDrive::blue_nominal().with_state(DriveState::Off);
        assert_eq!(d.effective_rabi(), 0.0);
        let a = d.with_extinction(-40.0).effective_rabi();
        let b = d.with_extinction(-46.0).effective_rabi();
        assert_abs_diff_eq!(a / b, 10f64.powf(0.3), epsilon = 1e-12);
        assert_abs_diff_eq!(d.with_extinction(-40.0).leak_amplitude(), 0.01, epsilon = 1e-15);
    }

    #[test]
    fn rejects_bad_drives() {
        let s = Setup::nominal();
        let bad = s.drives.blue.with_rabi(-1.0);
        assert!(matches!(
            build_liouvillian(&s.scheme, &s.field, &bad, &s.drives.repump),
            Err(ObeError::NegativeRabi(_))
        ));
        assert!(matches!(
            build_liouvillian(&s.scheme, &s.field, &s.drives.repump, &s.drives.blue),
            Err(ObeError::WrongTransition { .. })
        ));
        let mut skew = s.drives.blue.clone();
        skew.polarization.polarization = Vector3::new(0.0, 2.0, 0.0);
        assert!(build_liouvillian(&s.scheme, &s.field, &skew, &s.drives.repump).is_err());
    }

    #[test]
    fn trace_preservation() {
        let l = Setup::nominal().liouvillian(DriveState::On, DriveState::On).unwrap();
        let id = DensityMatrix::from_matrix_unchecked(DMatrix::identity(DIM, DIM)).to_vec();
        let left = id.adjoint() * &l.matrix;
        let scale = l.matrix.norm();
        assert!(left.iter().all(|z| z.norm() <= 1e-12 * scale));
        let rho = DensityMatrix::mixed(&[0, 2, 5]);
        assert!(l.apply(&rho).trace().norm() < 1e-12 * scale);
    }

    #[test]
    fn spontaneous_decay_law() {
        let s = dark();
        let l = s.liouvillian(DriveState::Off, DriveState::Off).unwrap();
        let rho = evolve(&DensityMatrix::pure(3), &l, s.scheme.tau_p).unwrap();
        assert_abs_diff_eq!(rho.p_population(), (-1.0f64).exp(), epsilon = 1e-6);
        assert_abs_diff_eq!(rho.populations(&D_INDICES), (1.0 - s.scheme.p) * (1.0 - (-1.0f64).exp()), epsilon = 1e-6);
    }

    #[test]
    fn ground_is_stationary_when_dark() {
        let l = dark().liouvillian(DriveState::Off, DriveState::Off).unwrap();
        let rho0 = DensityMatrix::ground();
        for t in [1e-6, 1e-3, 0.5] {
            let rho = evolve(&rho0, &l, t).unwrap();
            assert!((rho.matrix() - rho0.matrix()).norm() < 1e-12);
        }
        assert_eq!(evolve(&rho0, &l, 0.0).unwrap(), rho0);
        assert!(matches!(evolve(&rho0, &l, -1.0), Err(ObeError::NegativeTime(_))));
    }

    #[test]
    fn pure_decay_null_space_is_ground_manifold() {
        let l = dark().liouvillian(DriveState::Off, DriveState::Off).unwrap();
        assert!(matches!(steady_state(&l), Err(ObeError::NonUniqueSteadyState { dimension: 2 })));
        let (dim, vecs) = null_space(&l, 1e-12);
        assert_eq!(dim, 2);
        for v in vecs {
            let rho = DensityMatrix::from_vec(&v);
            let off_ground: f64 = (2..DIM).map(|i| rho.matrix()[(i, i)].norm()).sum();
            // the slow D3/2 decay (~2 s⁻¹ against ‖L‖ ~ 1e10) limits null-vector accuracy
            assert!(off_ground < 1e-6 * rho.matrix().norm(), "{off_ground}");
        }
    }

    #[test]
    fn nominal_steady_state_matches_long_evolution() {
        let s = Setup::nominal();
        let l = s.liouvillian(DriveState::On, DriveState::On).unwrap();
        let ss = steady_state(&l).unwrap();
        ss.check(1e-10, 1e-9, 1e-9).unwrap();
        let r = blue_scatter_rate(&ss, &s.scheme);
        assert!(r > 0.0 && r.is_finite());
        let late = evolve(&DensityMatrix::ground(), &l, 200e-6).unwrap();
        assert!((blue_scatter_rate(&late, &s.scheme) - r).abs() <= 1e-8 * r);
    }

    #[test]
    fn scatter_rate_from_population() {
        let s = LevelScheme::nominal();
        let rho = DensityMatrix::from_populations(&[(0, 0.9), (3, 0.1)]).unwrap();
        assert_abs_diff_eq!(blue_scatter_rate(&rho, &s) / 1.279e7, 1.0, epsilon = 5e-4);
        assert_eq!(blue_scatter_rate(&DensityMatrix::ground(), &s), 0.0);
    }

    #[test]
    fn gated_integral_matches_fine_quadrature() {
        let s = Setup::nominal();
        let l = s.liouvillian(DriveState::On, DriveState::Off).unwrap();
        let rho0 = DensityMatrix::ground();
        let exact = integrated_p_population(&rho0, &l, 70e-9).unwrap();
        let tr = p_population_trajectory(&rho0, &l, 70e-9, 2801).unwrap();
        let h = tr.times[1];
        let trap: f64 = tr.sigma_pp.windows(2).map(|w| 0.5 * h * (w[0] + w[1])).sum();
        assert!((trap - exact).abs() < 1e-5 * exact);
    }

    #[test]
    fn dark_phase_emits_nothing_from_ground() {
        let mut c = Chronogram::reference();
        for p in &mut c.phases {
            p.blue = DriveState::Off;
            p.repump = DriveState::Off;
        }
        let e = expected_counts(&c, &dark(), None).unwrap();
        assert!(e.counts.iter().all(|&x| x.abs() < 1e-15));
    }

    #[test]
    fn long_window_gives_geometric_mean() {
        let s = Setup::nominal().with_scheme(LevelScheme::nominal().with_tau_d32(f64::INFINITY)).with_extinctions(f64::NEG_INFINITY, f64::NEG_INFINITY);
        let c = Chronogram::reference().scaled(20.0);
        let e = expected_counts(&c, &s, None).unwrap();
        let p = s.scheme.p;
        assert_abs_diff_eq!(e.get(Counter::Nb), p / (1.0 - p), epsilon = 1e-6);
        assert_abs_diff_eq!(e.get(Counter::Nr), 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(e.branching_fraction(), p, epsilon = 1e-9);
    }

    #[test]
    fn post_emission_state_is_ground() {
        let rho = post_emission_state(&Setup::nominal()).unwrap();
        rho.check(1e-10, 1e-9, 1e-9).unwrap();
        assert_abs_diff_eq!(rho.populations(&S_INDICES), 1.0, epsilon = 1e-12);
    }
}
