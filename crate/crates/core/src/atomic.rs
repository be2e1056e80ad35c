//! ⁸⁸Sr⁺ low-lying level structure: Zeeman sublevels, dipole coupling
//! geometry and spontaneous-decay channels.
//!
//! The optical Bloch basis is fixed to eight sublevels, ordered
//!
//! | index | level | m    |
//! |-------|-------|------|
//! | 0, 1  | S1/2  | ∓1/2 |
//! | 2, 3  | P1/2  | ∓1/2 |
//! | 4..=7 | D3/2  | −3/2 … +3/2 |
//!
//! D5/2 only appears as a shelf label for the dark-event analysis.

use std::fmt;

use nalgebra::{Complex, DMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::angular::{clebsch_gordan, lande_g, HalfInt};
use crate::constants;

pub type C64 = Complex<f64>;

/// Number of sublevels in the optical Bloch basis.
pub const DIM: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AtomicError {
    #[error("branching fraction p = {0} must lie strictly between 0 and 1")]
    BranchingOutOfRange(f64),
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("{0} is not an electric-dipole transition of the scheme")]
    UnsupportedTransition(String),
    #[error("{0} must be a unit vector (norm {1})")]
    NotUnit(&'static str, f64),
    #[error("polarization must be orthogonal to propagation (dot product {0})")]
    PolarizationNotTransverse(f64),
    #[error("magnetic field magnitude must be non-negative, got {0}")]
    NegativeField(f64),
    #[error("88Sr+ has zero nuclear spin; hyperfine structure (I = {0}) is not supported")]
    Hyperfine(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Term {
    S12,
    P12,
    D32,
    D52,
}

impl Term {
    pub fn j(self) -> HalfInt {
        match self {
            Term::S12 | Term::P12 => HalfInt(1),
            Term::D32 => HalfInt(3),
            Term::D52 => HalfInt(5),
        }
    }

    pub fn l(self) -> HalfInt {
        match self {
            Term::S12 => HalfInt(0),
            Term::P12 => HalfInt(2),
            Term::D32 | Term::D52 => HalfInt(4),
        }
    }

    pub fn lande(self) -> f64 {
        lande_g(self.l(), HalfInt(1), self.j())
    }

    pub fn label(self) -> &'static str {
        match self {
            Term::S12 => "S1/2",
            Term::P12 => "P1/2",
            Term::D32 => "D3/2",
            Term::D52 => "D5/2",
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sublevel {
    pub term: Term,
    pub m: HalfInt,
}

impl Sublevel {
    pub const fn new(term: Term, m_doubled: i32) -> Self {
        Sublevel { term, m: HalfInt(m_doubled) }
    }

    /// Position in the 8-level basis, `None` for D5/2.
    pub fn index(self) -> Option<usize> {
        let offset = match self.term {
            Term::S12 => 0,
            Term::P12 => 2,
            Term::D32 => 4,
            Term::D52 => return None,
        };
        let j = self.term.j().0;
        if self.m.0.abs() > j || (self.m.0 + j) % 2 != 0 {
            return None;
        }
        Some(offset + ((self.m.0 + j) / 2) as usize)
    }
}

impl fmt::Display for Sublevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(m={})", self.term, self.m)
    }
}

/// The eight OBE sublevels in basis order.
pub fn active_sublevels() -> [Sublevel; DIM] {
    [
        Sublevel::new(Term::S12, -1),
        Sublevel::new(Term::S12, 1),
        Sublevel::new(Term::P12, -1),
        Sublevel::new(Term::P12, 1),
        Sublevel::new(Term::D32, -3),
        Sublevel::new(Term::D32, -1),
        Sublevel::new(Term::D32, 1),
        Sublevel::new(Term::D32, 3),
    ]
}

pub const S_INDICES: [usize; 2] = [0, 1];
pub const P_INDICES: [usize; 2] = [2, 3];
pub const D_INDICES: [usize; 4] = [4, 5, 6, 7];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub term: Term,
    pub j: HalfInt,
    pub lande_g: f64,
}

/// Level structure plus the decay constants of the P1/2 and D states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelScheme {
    pub levels: Vec<Level>,
    pub sublevels: Vec<Sublevel>,
    /// Probability that P1/2 decays to S1/2.
    pub p: f64,
    pub tau_p: f64,
    /// D3/2 lifetime; `f64::INFINITY` switches the D→S decay off.
    pub tau_d32: f64,
    pub tau_d52: f64,
}

impl LevelScheme {
    pub fn new(p: f64, tau_p: f64, tau_d32: f64, tau_d52: f64) -> Result<Self, AtomicError> {
        if !(p > 0.0 && p < 1.0) {
            return Err(AtomicError::BranchingOutOfRange(p));
        }
        Self::unchecked(p, tau_p, tau_d32, tau_d52)
    }

    /// Same as [`LevelScheme::new`] but admits the closed limits p = 0 and
    /// p = 1, which the OBE oracles need.
    pub fn with_limits(p: f64, tau_p: f64, tau_d32: f64, tau_d52: f64) -> Result<Self, AtomicError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(AtomicError::BranchingOutOfRange(p));
        }
        Self::unchecked(p, tau_p, tau_d32, tau_d52)
    }

    fn unchecked(p: f64, tau_p: f64, tau_d32: f64, tau_d52: f64) -> Result<Self, AtomicError> {
        for (name, value) in [("tau_P", tau_p), ("tau_D3/2", tau_d32), ("tau_D5/2", tau_d52)] {
            if !(value > 0.0) {
                return Err(AtomicError::NonPositive { name, value });
            }
        }
        let levels = [Term::S12, Term::P12, Term::D32, Term::D52]
            .into_iter()
            .map(|term| Level { term, j: term.j(), lande_g: term.lande() })
            .collect();
        Ok(LevelScheme { levels, sublevels: active_sublevels().to_vec(), p, tau_p, tau_d32, tau_d52 })
    }

    pub fn nominal() -> Self {
        Self::new(constants::P_NOMINAL, constants::TAU_P, constants::TAU_D32, constants::TAU_D52)
            .expect("nominal scheme is valid")
    }

    /// Rejects a requested nuclear spin; ⁸⁸Sr⁺ has none.
    pub fn check_nuclear_spin(spin: f64) -> Result<(), AtomicError> {
        if spin != 0.0 {
            return Err(AtomicError::Hyperfine(spin));
        }
        Ok(())
    }

    pub fn gamma_p(&self) -> f64 {
        1.0 / self.tau_p
    }

    /// A_SP = p/τ_P.
    pub fn a_sp(&self) -> f64 {
        self.p / self.tau_p
    }

    /// A_PD = (1−p)/τ_P.
    pub fn a_pd(&self) -> f64 {
        (1.0 - self.p) / self.tau_p
    }

    pub fn with_p(&self, p: f64) -> Self {
        LevelScheme { p, ..self.clone() }
    }

    pub fn with_tau_d32(&self, tau: f64) -> Self {
        LevelScheme { tau_d32: tau, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagneticField {
    /// Tesla.
    pub magnitude: f64,
    /// Quantization axis.
    pub orientation: Vector3<f64>,
}

impl MagneticField {
    pub fn new(magnitude: f64, orientation: Vector3<f64>) -> Result<Self, AtomicError> {
        if !(magnitude >= 0.0) {
            return Err(AtomicError::NegativeField(magnitude));
        }
        check_unit("field orientation", &orientation)?;
        Ok(MagneticField { magnitude, orientation })
    }

    pub fn along_z(magnitude: f64) -> Result<Self, AtomicError> {
        Self::new(magnitude, Vector3::z())
    }

    pub fn nominal() -> Self {
        Self::along_z(constants::B_NOMINAL).unwrap()
    }

    /// Right-handed orthonormal frame (x', y', z') with z' on the field axis.
    pub fn frame(&self) -> [Vector3<f64>; 3] {
        let z = self.orientation;
        let seed = if z.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let x = (seed - z * seed.dot(&z)).normalize();
        let y = z.cross(&x);
        [x, y, z]
    }
}

fn check_unit(name: &'static str, v: &Vector3<f64>) -> Result<(), AtomicError> {
    let n = v.norm();
    if (n - 1.0).abs() > 1e-9 {
        return Err(AtomicError::NotUnit(name, n));
    }
    Ok(())
}

/// Linearly polarized beam geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarizationGeometry {
    pub propagation: Vector3<f64>,
    pub polarization: Vector3<f64>,
}

/// Spherical components a₋₁, a₀, a₊₁ of a polarization vector about the
/// quantization axis, stored at index q+1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalPolarization(pub [C64; 3]);

impl SphericalPolarization {
    pub fn component(&self, q: i32) -> C64 {
        self.0[(q + 1) as usize]
    }

    pub fn pi() -> Self {
        SphericalPolarization([C64::new(0.0, 0.0), C64::new(1.0, 0.0), C64::new(0.0, 0.0)])
    }

    pub fn norm_sqr(&self) -> f64 {
        self.0.iter().map(|a| a.norm_sqr()).sum()
    }
}

impl PolarizationGeometry {
    pub fn new(propagation: Vector3<f64>, polarization: Vector3<f64>) -> Result<Self, AtomicError> {
        check_unit("propagation", &propagation)?;
        check_unit("polarization", &polarization)?;
        let dot = propagation.dot(&polarization);
        if dot.abs() > 1e-9 {
            return Err(AtomicError::PolarizationNotTransverse(dot));
        }
        Ok(PolarizationGeometry { propagation, polarization })
    }

    /// Beams propagate at 45° to the field (taken along z) and are polarized
    /// perpendicular to it.
    pub fn nominal() -> Self {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        Self::new(Vector3::new(s, 0.0, s), Vector3::y()).unwrap()
    }

    /// Polarization along the field axis (pure π light) for beams along x.
    pub fn parallel_to_z() -> Self {
        Self::new(Vector3::x(), Vector3::z()).unwrap()
    }

    /// a_q = ê_q*·ε with ê₊₁ = −(x̂+iŷ)/√2, ê₀ = ẑ, ê₋₁ = (x̂−iŷ)/√2.
    pub fn spherical(&self, field: &MagneticField) -> SphericalPolarization {
        let [fx, fy, fz] = field.frame();
        let e = &self.polarization;
        let (ex, ey, ez) = (e.dot(&fx), e.dot(&fy), e.dot(&fz));
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let plus = C64::new(-ex * r, ey * r);
        let minus = C64::new(ex * r, ey * r);
        SphericalPolarization([minus, C64::new(ez, 0.0), plus])
    }
}

/// Zeeman shift g·m·μ_B·B/ħ in rad/s.
pub fn zeeman_shift(sublevel: Sublevel, field: &MagneticField) -> f64 {
    sublevel.term.lande() * sublevel.m.value() * constants::BOHR_MAGNETON_RAD_PER_S_T * field.magnitude
}

/// Electric-dipole transitions driven in the experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Transition {
    /// S1/2 ↔ P1/2 at 711 THz.
    Cooling,
    /// D3/2 ↔ P1/2 at 275 THz.
    Repump,
}

impl Transition {
    pub fn between(lower: Term, upper: Term) -> Result<Self, AtomicError> {
        match (lower, upper) {
            (Term::S12, Term::P12) => Ok(Transition::Cooling),
            (Term::D32, Term::P12) => Ok(Transition::Repump),
            (l, u) => Err(AtomicError::UnsupportedTransition(format!("{l}↔{u}"))),
        }
    }

    pub fn lower(self) -> Term {
        match self {
            Transition::Cooling => Term::S12,
            Transition::Repump => Term::D32,
        }
    }

    pub fn upper(self) -> Term {
        Term::P12
    }
}

/// How the scalar Rabi frequency Ω maps onto sublevel couplings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RabiConvention {
    /// Ω·√(2J_upper+1)·CG·a_q.
    #[default]
    UpperMultiplicity,
    /// Ω·CG·a_q with unit reduced matrix element.
    ReducedUnit,
}

impl RabiConvention {
    pub fn scale(self, transition: Transition) -> f64 {
        match self {
            RabiConvention::UpperMultiplicity => ((transition.upper().j().0 + 1) as f64).sqrt(),
            RabiConvention::ReducedUnit => 1.0,
        }
    }
}

/// Relative Rabi amplitudes in the 8-level basis; entry (upper, lower) holds
/// ⟨J_l m_l; 1 q | J_u m_u⟩·a_q with q = m_u − m_l. The lower-triangular
/// partner is left zero.
pub fn coupling_matrix(transition: Transition, pol: &SphericalPolarization) -> DMatrix<C64> {
    let mut c = DMatrix::zeros(DIM, DIM);
    let lower = transition.lower();
    let upper = transition.upper();
    for mu in upper.j().projections() {
        for ml in lower.j().projections() {
            let q2 = mu.0 - ml.0;
            if q2.abs() > 2 {
                continue;
            }
            let cg = clebsch_gordan(lower.j(), ml, HalfInt(2), HalfInt(q2), upper.j(), mu);
            let (u, l) = (Sublevel { term: upper, m: mu }.index().unwrap(), Sublevel { term: lower, m: ml }.index().unwrap());
            c[(u, l)] = pol.component(q2 / 2) * cg;
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DecayKind {
    /// P1/2 → S1/2, blue photon.
    Blue,
    /// P1/2 → D3/2, infrared photon.
    Infrared,
    /// D3/2 → S1/2 electric quadrupole.
    Quadrupole,
}

/// One collapse operator √rate·Σ c_k |lower_k⟩⟨upper_k| for a fixed emitted
/// photon polarization q.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpOperator {
    pub kind: DecayKind,
    pub q: i32,
    pub rate: f64,
    /// (upper index, lower index, angular amplitude)
    pub terms: Vec<(usize, usize, f64)>,
}

impl JumpOperator {
    pub fn matrix(&self) -> DMatrix<C64> {
        let mut m = DMatrix::zeros(DIM, DIM);
        let s = self.rate.sqrt();
        for &(u, l, c) in &self.terms {
            m[(l, u)] = C64::new(s * c, 0.0);
        }
        m
    }

    /// Rate of the individual upper → lower channel carried by this operator.
    pub fn pair_rate(&self, upper: usize, lower: usize) -> f64 {
        self.terms.iter().filter(|t| t.0 == upper && t.1 == lower).map(|t| self.rate * t.2 * t.2).sum()
    }
}

fn channel_ops(kind: DecayKind, upper: Term, lower: Term, rank: i32, rate: f64) -> Vec<JumpOperator> {
    if rate == 0.0 {
        return Vec::new();
    }
    (-rank..=rank)
        .filter_map(|q| {
            let terms: Vec<_> = upper
                .j()
                .projections()
                .filter_map(|mu| {
                    let ml = HalfInt(mu.0 - 2 * q);
                    let c = clebsch_gordan(lower.j(), ml, HalfInt(2 * rank), HalfInt(2 * q), upper.j(), mu);
                    (c != 0.0).then(|| {
                        (Sublevel { term: upper, m: mu }.index().unwrap(), Sublevel { term: lower, m: ml }.index().unwrap(), c)
                    })
                })
                .collect();
            (!terms.is_empty()).then_some(JumpOperator { kind, q, rate, terms })
        })
        .collect()
}

/// All spontaneous-decay collapse operators of the 8-level basis.
///
/// The per-sublevel split follows squared CG coefficients, so the total rate
/// out of each P1/2 sublevel is 1/τ_P, split p : 1−p between S and D.
pub fn decay_channels(scheme: &LevelScheme) -> Vec<JumpOperator> {
    let mut ops = channel_ops(DecayKind::Blue, Term::P12, Term::S12, 1, scheme.a_sp());
    ops.extend(channel_ops(DecayKind::Infrared, Term::P12, Term::D32, 1, scheme.a_pd()));
    if scheme.tau_d32.is_finite() {
        ops.extend(channel_ops(DecayKind::Quadrupole, Term::D32, Term::S12, 2, 1.0 / scheme.tau_d32));
    }
    ops
}

/// Total decay rate out of `upper` into any sublevel of `lower_term`.
pub fn rate_into(ops: &[JumpOperator], upper: usize, lower_term: Term) -> f64 {
    let lowers: Vec<usize> = lower_term.j().projections().filter_map(|m| Sublevel { term: lower_term, m }.index()).collect();
    ops.iter().map(|op| lowers.iter().map(|&l| op.pair_rate(upper, l)).sum::<f64>()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn sublevel_count_and_order() {
        let s = active_sublevels();
        assert_eq!(s.len(), 8);
        for (i, sl) in s.iter().enumerate() {
            assert_eq!(sl.index(), Some(i));
        }
        assert_eq!(Sublevel::new(Term::D52, 1).index(), None);
        assert_eq!(Sublevel::new(Term::S12, 3).index(), None);
    }

    #[test]
    fn lande_values() {
        assert_abs_diff_eq!(Term::S12.lande(), 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(Term::P12.lande(), 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(Term::D32.lande(), 0.8, epsilon = 1e-15);
    }

    #[test]
    fn zeeman_examples() {
        let zero = MagneticField::along_z(0.0).unwrap();
        assert_eq!(zeeman_shift(Sublevel::new(Term::S12, 1), &zero), 0.0);
        let b = MagneticField::along_z(1e-4).unwrap();
        let s = zeeman_shift(Sublevel::new(Term::S12, 1), &b) / (2.0 * PI * 1e6);
        assert_abs_diff_eq!(s, 1.3996, epsilon = 5e-5);
        let d = zeeman_shift(Sublevel::new(Term::D32, -3), &b) / (2.0 * PI * 1e6);
        assert_abs_diff_eq!(d, -1.6795, epsilon = 5e-5);
    }

    #[test]
    fn transition_rejection() {
        assert!(Transition::between(Term::S12, Term::D32).is_err());
        assert!(Transition::between(Term::S12, Term::D52).is_err());
        assert_eq!(Transition::between(Term::D32, Term::P12).unwrap(), Transition::Repump);
    }

    #[test]
    fn pi_light_selection_rule() {
        let c = coupling_matrix(Transition::Cooling, &SphericalPolarization::pi());
        for u in P_INDICES {
            for l in S_INDICES {
                let same_m = active_sublevels()[u].m == active_sublevels()[l].m;
                assert_eq!(c[(u, l)].norm() > 0.0, same_m, "u={u} l={l}");
            }
        }
    }

    #[test]
    fn cg_sum_rule_per_upper_sublevel() {
        // unpolarized: each q with unit weight
        let iso = SphericalPolarization([C64::new(1.0, 0.0); 3]);
        let cs = coupling_matrix(Transition::Cooling, &iso);
        let cd = coupling_matrix(Transition::Repump, &iso);
        for u in P_INDICES {
            let s: f64 = S_INDICES.iter().map(|&l| cs[(u, l)].norm_sqr()).sum();
            let d: f64 = D_INDICES.iter().map(|&l| cd[(u, l)].norm_sqr()).sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-14);
            assert_abs_diff_eq!(d, 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn perpendicular_linear_has_no_pi_component() {
        let a = PolarizationGeometry::nominal().spherical(&MagneticField::nominal());
        assert_abs_diff_eq!(a.component(0).norm(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(a.component(1).norm(), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
        assert_abs_diff_eq!(a.component(-1).norm(), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
        assert_abs_diff_eq!(a.norm_sqr(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn geometry_validation() {
        assert!(PolarizationGeometry::new(Vector3::z(), Vector3::z()).is_err());
        assert!(PolarizationGeometry::new(Vector3::new(0.0, 0.0, 2.0), Vector3::x()).is_err());
        assert!(MagneticField::new(-1.0, Vector3::z()).is_err());
        assert!(LevelScheme::check_nuclear_spin(4.5).is_err());
        assert!(LevelScheme::new(1.0, 7e-9, 0.4, 0.4).is_err());
        assert!(LevelScheme::with_limits(1.0, 7e-9, 0.4, 0.4).is_ok());
    }

    #[test]
    fn closed_limit_has_no_infrared_jumps() {
        let s = LevelScheme::with_limits(1.0, 7.39e-9, 0.435, 0.39).unwrap();
        assert!(decay_channels(&s).iter().all(|op| op.kind != DecayKind::Infrared));
    }

    #[test]
    fn nominal_rates() {
        let s = LevelScheme::new(0.9453, 7.39e-9, 0.435, 0.3908).unwrap();
        assert_relative_eq!(s.a_sp(), 1.279e8, max_relative = 5e-4);
        assert_relative_eq!(s.a_pd(), 7.40e6, max_relative = 5e-4);
        let ops = decay_channels(&s);
        let out: f64 = [Term::S12, Term::D32].iter().map(|&t| rate_into(&ops, 3, t)).sum();
        assert_relative_eq!(out, 1.353e8, max_relative = 5e-4);
    }

    #[test]
    fn quadrupole_rate_completeness() {
        let s = LevelScheme::nominal();
        let ops = decay_channels(&s);
        for d in D_INDICES {
            assert_relative_eq!(rate_into(&ops, d, Term::S12), 1.0 / 0.435, max_relative = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn rate_completeness(p in 0.001f64..0.999, tau in 1e-9f64..1e-7) {
            let s = LevelScheme::new(p, tau, 0.435, 0.39).unwrap();
            let ops = decay_channels(&s);
            for u in P_INDICES {
                let to_s = rate_into(&ops, u, Term::S12);
                let to_d = rate_into(&ops, u, Term::D32);
                prop_assert!(((to_s + to_d) * tau - 1.0).abs() < 1e-12);
                prop_assert!((to_s - p / tau).abs() <= 1e-12 * p / tau);
                prop_assert!((to_d - (1.0 - p) / tau).abs() <= 1e-12 / tau);
            }
            prop_assert!(((s.a_sp() + s.a_pd()) * tau - 1.0).abs() < 1e-14);
        }

        #[test]
        fn cg_mirror_symmetry(re_p in -1.0f64..1.0, im_p in -1.0f64..1.0, re_z in -1.0f64..1.0, re_m in -1.0f64..1.0, im_m in -1.0f64..1.0) {
            let a = SphericalPolarization([C64::new(re_m, im_m), C64::new(re_z, 0.0), C64::new(re_p, im_p)]);
            let swapped = SphericalPolarization([a.0[2], a.0[1], a.0[0]]);
            let mirror = |i: usize| -> usize {
                let sl = active_sublevels()[i];
                Sublevel { term: sl.term, m: HalfInt(-sl.m.0) }.index().unwrap()
            };
            for tr in [Transition::Cooling, Transition::Repump] {
                let c = coupling_matrix(tr, &a);
                let cm = coupling_matrix(tr, &swapped);
                for u in 0..DIM {
                    for l in 0..DIM {
                        prop_assert!((c[(u, l)].norm() - cm[(mirror(u), mirror(l))].norm()).abs() < 1e-12);
                    }
                }
            }
        }

        #[test]
        fn zeeman_linearity(b in 0.0f64..1e-3, k in 0.0f64..5.0) {
            let f1 = MagneticField::along_z(b).unwrap();
            let f2 = MagneticField::along_z(b * k).unwrap();
            for sl in active_sublevels() {
                let (z1, z2) = (zeeman_shift(sl, &f1), zeeman_shift(sl, &f2));
                prop_assert!((z2 - k * z1).abs() <= 1e-9 * z2.abs().max(1.0));
                let mirrored = Sublevel { term: sl.term, m: HalfInt(-sl.m.0) };
                prop_assert!((zeeman_shift(mirrored, &f1) + z1).abs() <= 1e-9 * z1.abs().max(1.0));
            }
        }
    }
}
