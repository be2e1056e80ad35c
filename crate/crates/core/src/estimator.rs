//! Branching fraction, ratio, efficiency and transition probabilities from
//! gated photon counts.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chronogram::{Chronogram, Counter};
use crate::systematics::ErrorBudget;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("background exceeds signal: net {which} counts = {net}")]
    NonPositiveSignal { which: &'static str, net: f64 },
    #[error("record has zero cycles")]
    NoCycles,
    #[error("{signal} window ({a} s) and its background window ({b} s) differ; enable exposure scaling to accept")]
    UnequalWindows { signal: &'static str, a: f64, b: f64 },
    #[error("window durations must be positive")]
    BadDuration,
    #[error("value {0} outside the open interval (0, 1)")]
    OutOfRange(f64),
    #[error("τ_P must be positive, got {0}")]
    Lifetime(f64),
    #[error("line {line}, column {column}: {message}")]
    Parse { line: u64, column: usize, message: String },
    #[error("no records in input")]
    Empty,
}

/// Accumulated gated counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountRecord {
    pub cycles: u64,
    #[serde(rename = "N_b")]
    pub n_b: u64,
    #[serde(rename = "N_r")]
    pub n_r: u64,
    #[serde(rename = "N_b_B")]
    pub n_b_bg: u64,
    #[serde(rename = "N_r_B")]
    pub n_r_bg: u64,
    /// Gate lengths indexed by [`Counter::index`], s.
    #[serde(default = "reference_windows")]
    pub windows: [f64; 4],
    /// Scale background counts by the exposure ratio when windows differ.
    #[serde(default)]
    pub exposure_scaling: bool,
}

fn reference_windows() -> [f64; 4] {
    Chronogram::reference().gate_durations()
}

impl CountRecord {
    /// Record with the reference window lengths.
    pub fn new(cycles: u64, n_b: u64, n_r: u64, n_b_bg: u64, n_r_bg: u64) -> Self {
        CountRecord { cycles, n_b, n_r, n_b_bg, n_r_bg, windows: reference_windows(), exposure_scaling: false }
    }

    pub fn with_windows(mut self, windows: [f64; 4], exposure_scaling: bool) -> Result<Self, EstimatorError> {
        self.windows = windows;
        self.exposure_scaling = exposure_scaling;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        if self.windows.iter().any(|&w| !(w > 0.0)) {
            return Err(EstimatorError::BadDuration);
        }
        if !self.exposure_scaling {
            for (name, s, b) in [("blue", Counter::Nb, Counter::NbB), ("repump", Counter::Nr, Counter::NrB)] {
                let (a, bb) = (self.windows[s.index()], self.windows[b.index()]);
                if (a - bb).abs() > 1e-12 * a.max(bb) {
                    return Err(EstimatorError::UnequalWindows { signal: name, a, b: bb });
                }
            }
        }
        Ok(())
    }

    fn scale(&self, s: Counter, b: Counter) -> f64 {
        if self.exposure_scaling {
            self.windows[s.index()] / self.windows[b.index()]
        } else {
            1.0
        }
    }

    /// (S_b, var S_b, S_r, var S_r)
    fn net(&self) -> (f64, f64, f64, f64) {
        let kb = self.scale(Counter::Nb, Counter::NbB);
        let kr = self.scale(Counter::Nr, Counter::NrB);
        let (nb, nr, bb, br) = (self.n_b as f64, self.n_r as f64, self.n_b_bg as f64, self.n_r_bg as f64);
        (nb - kb * bb, nb + kb * kb * bb, nr - kr * br, nr + kr * kr * br)
    }

    pub fn merge(&self, other: &CountRecord) -> CountRecord {
        CountRecord {
            cycles: self.cycles + other.cycles,
            n_b: self.n_b + other.n_b,
            n_r: self.n_r + other.n_r,
            n_b_bg: self.n_b_bg + other.n_b_bg,
            n_r_bg: self.n_r_bg + other.n_r_bg,
            ..self.clone()
        }
    }

    pub fn count(&self, c: Counter) -> u64 {
        match c {
            Counter::Nb => self.n_b,
            Counter::Nr => self.n_r,
            Counter::NbB => self.n_b_bg,
            Counter::NrB => self.n_r_bg,
        }
    }
}

/// A value with asymmetric bounds (`plus`, `minus` both ≥ 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounded {
    pub value: f64,
    pub plus: f64,
    pub minus: f64,
}

impl Bounded {
    pub fn symmetric(value: f64, sigma: f64) -> Self {
        Bounded { value, plus: sigma, minus: sigma }
    }

    pub fn new(value: f64, plus: f64, minus: f64) -> Self {
        Bounded { value, plus, minus }
    }

    pub fn is_symmetric(&self) -> bool {
        self.plus == self.minus
    }
}

impl fmt::Display for Bounded {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_measurement(self))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub p: f64,
    pub sigma_stat: f64,
    pub br: Bounded,
    pub efficiency: f64,
}

/// How the four Poisson count errors combine into σ_stat.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaModel {
    /// First-order propagation, independent errors in quadrature.
    #[default]
    Quadrature,
    /// Relative errors √N/S of all four counts added linearly on BR, then
    /// σ_p = p(1−p)·σ_BR/BR. Conservative; reproduces the published digits.
    LinearRelative,
}

/// p̂ = S_b/(S_b+S_r) with first-order Poisson propagation.
pub fn branching_fraction(rec: &CountRecord) -> Result<Estimate, EstimatorError> {
    branching_fraction_with(rec, SigmaModel::default())
}

pub fn branching_fraction_with(rec: &CountRecord, model: SigmaModel) -> Result<Estimate, EstimatorError> {
    rec.validate()?;
    if rec.cycles == 0 {
        return Err(EstimatorError::NoCycles);
    }
    let (sb, vb, sr, vr) = rec.net();
    if !(sb > 0.0) {
        return Err(EstimatorError::NonPositiveSignal { which: "blue", net: sb });
    }
    if !(sr > 0.0) {
        return Err(EstimatorError::NonPositiveSignal { which: "repump", net: sr });
    }
    let s = sb + sr;
    let p = net_ratio(sb, sr);
    let sigma = match model {
        SigmaModel::Quadrature => ((sr * sr * vb + sb * sb * vr) / s.powi(4)).sqrt(),
        SigmaModel::LinearRelative => {
            let kb = rec.scale(Counter::Nb, Counter::NbB);
            let kr = rec.scale(Counter::Nr, Counter::NrB);
            let rel_b = ((rec.n_b as f64).sqrt() + kb * (rec.n_b_bg as f64).sqrt()) / sb;
            let rel_r = ((rec.n_r as f64).sqrt() + kr * (rec.n_r_bg as f64).sqrt()) / sr;
            p * (1.0 - p) * (rel_b + rel_r)
        }
    };
    let br = branching_ratio(&Bounded::symmetric(p, sigma))?;
    Ok(Estimate { p, sigma_stat: sigma, br, efficiency: sr / rec.cycles as f64 })
}

/// S_b/(S_b+S_r)
pub fn net_ratio(sb: f64, sr: f64) -> f64 {
    sb / (sb + sr)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMapping {
    /// σ_BR = σ_p/(1−p)².
    #[default]
    Linearized,
    /// Bounds are BR at the interval endpoints.
    Endpoint,
}

pub fn branching_ratio(p: &Bounded) -> Result<Bounded, EstimatorError> {
    branching_ratio_with(p, BoundMapping::default())
}

/// BR = p/(1−p).
pub fn branching_ratio_with(p: &Bounded, mapping: BoundMapping) -> Result<Bounded, EstimatorError> {
    let v = p.value;
    if !(v > 0.0 && v < 1.0) {
        return Err(EstimatorError::OutOfRange(v));
    }
    let br = |x: f64| x / (1.0 - x);
    Ok(match mapping {
        BoundMapping::Linearized => {
            let d = 1.0 / (1.0 - v).powi(2);
            Bounded::new(br(v), p.plus * d, p.minus * d)
        }
        BoundMapping::Endpoint => {
            let hi = v + p.plus;
            if hi >= 1.0 {
                return Err(EstimatorError::OutOfRange(hi));
            }
            Bounded::new(br(v), br(hi) - br(v), br(v) - br((v - p.minus).max(0.0)))
        }
    })
}

/// ε̂ = (N_r − N_r^B)/cycles.
pub fn detection_efficiency(rec: &CountRecord) -> Result<f64, EstimatorError> {
    Ok(branching_fraction(rec)?.efficiency)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DominantTerm {
    BranchingFraction,
    Lifetime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionProbabilities {
    /// s⁻¹
    pub a_sp: Bounded,
    pub a_pd: Bounded,
    pub a_sp_dominant: DominantTerm,
    pub a_pd_dominant: DominantTerm,
}

/// A_SP = p/τ_P and A_PD = (1−p)/τ_P, relative errors added in quadrature.
pub fn transition_probabilities(p: &Bounded, tau_p: f64, sigma_tau: f64) -> Result<TransitionProbabilities, EstimatorError> {
    if !(tau_p > 0.0) {
        return Err(EstimatorError::Lifetime(tau_p));
    }
    let rt = sigma_tau / tau_p;
    let q = 1.0 - p.value;
    let combine = |central: f64, rel_p_plus: f64, rel_p_minus: f64| {
        Bounded::new(
            central,
            central * (rel_p_plus.powi(2) + rt * rt).sqrt(),
            central * (rel_p_minus.powi(2) + rt * rt).sqrt(),
        )
    };
    let dominant = |rel: f64| if rel > rt { DominantTerm::BranchingFraction } else { DominantTerm::Lifetime };
    let a_sp = combine(p.value / tau_p, p.plus / p.value, p.minus / p.value);
    // A_PD moves opposite to p
    let (rp, rm) = if q > 0.0 { (p.minus / q, p.plus / q) } else { (0.0, 0.0) };
    let a_pd = combine(q / tau_p, rp, rm);
    Ok(TransitionProbabilities {
        a_sp,
        a_pd,
        a_sp_dominant: dominant(p.plus.max(p.minus) / p.value),
        a_pd_dominant: dominant(rp.max(rm)),
    })
}

/// total± = σ_stat + Σ row bounds±.
pub fn combine_total_uncertainty(p: f64, sigma_stat: f64, budget: Option<&ErrorBudget>) -> Bounded {
    match budget {
        None => Bounded::symmetric(p, sigma_stat),
        Some(b) => Bounded::new(p, sigma_stat + b.total.plus, sigma_stat + b.total.minus),
    }
}

/// Decimal exponent of the last significant digit of `sigma` under the
/// particle-data-group rule: two digits when the leading three are 100–354,
/// one digit when 355–949, and 950–999 rounds up to two digits of 1000.
pub fn pdg_decimal(sigma: f64) -> i32 {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return 0;
    }
    let e = sigma.log10().floor() as i32;
    let lead = (sigma / 10f64.powi(e - 2)).round() as i64;
    let (lead, e) = if lead >= 1000 { (100, e + 1) } else { (lead, e) };
    match lead {
        100..=354 => e - 1,
        355..=949 => e,
        _ => e,
    }
}

fn round_to(x: f64, decimal: i32) -> f64 {
    let f = 10f64.powi(-decimal);
    (x * f).round() / f
}

/// `0.9454(6)`, `17.33(20)` or `17.27(+23/-17)`.
pub fn format_measurement(b: &Bounded) -> String {
    let d = if b.is_symmetric() { pdg_decimal(b.plus) } else { pdg_decimal(b.plus).min(pdg_decimal(b.minus)) };
    let places = (-d).max(0) as usize;
    let value = format!("{:.*}", places, round_to(b.value, d));
    let digits = |s: f64| -> String {
        let r = round_to(s, d);
        if d < 0 {
            format!("{}", (r * 10f64.powi(-d)).round() as i64)
        } else {
            format!("{}", r as i64)
        }
    };
    if b.is_symmetric() {
        format!("{value}({})", digits(b.plus))
    } else {
        format!("{value}(+{}/-{})", digits(b.plus), digits(b.minus))
    }
}

/// Significant-figure rounding for plain numbers, e.g. ε̂ = 1.01e−3.
pub fn round_sig(x: f64, sig: i32) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let e = x.abs().log10().floor() as i32;
    round_to(x, e - sig + 1)
}

/// Parses `cycles,N_b,N_r,N_b_B,N_r_B` rows; a non-numeric first line is a
/// header.
pub fn parse_counts_csv(text: &str) -> Result<Vec<CountRecord>, EstimatorError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).comment(Some(b'#')).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            EstimatorError::Parse { line, column: 0, message: e.to_string() }
        })?;
        let line = row.position().map_or(i as u64 + 1, |p| p.line());
        if i == 0 && row.get(0).is_some_and(|f| f.parse::<u64>().is_err()) {
            continue;
        }
        if row.len() != 5 {
            return Err(EstimatorError::Parse { line, column: row.len() + 1, message: format!("expected 5 fields, found {}", row.len()) });
        }
        let mut v = [0u64; 5];
        for (k, f) in row.iter().enumerate() {
            v[k] = f.parse().map_err(|e| EstimatorError::Parse { line, column: k + 1, message: format!("{f:?}: {e}") })?;
        }
        out.push(CountRecord::new(v[0], v[1], v[2], v[3], v[4]));
    }
    if out.is_empty() {
        return Err(EstimatorError::Empty);
    }
    Ok(out)
}

/// Reads a batch report or a bare count record from JSON.
pub fn parse_counts_json(text: &str) -> Result<CountRecord, EstimatorError> {
    #[derive(Deserialize)]
    struct Loose {
        cycles: u64,
        #[serde(rename = "N_b")]
        n_b: u64,
        #[serde(rename = "N_r")]
        n_r: u64,
        #[serde(rename = "N_b_B")]
        n_b_bg: u64,
        #[serde(rename = "N_r_B")]
        n_r_bg: u64,
        windows: Option<[f64; 4]>,
        #[serde(default)]
        exposure_scaling: bool,
    }
    if text.trim().is_empty() {
        return Err(EstimatorError::Empty);
    }
    let l: Loose = serde_json::from_str(text)
        .map_err(|e| EstimatorError::Parse { line: e.line() as u64, column: e.column(), message: e.to_string() })?;
    let rec = CountRecord {
        cycles: l.cycles,
        n_b: l.n_b,
        n_r: l.n_r,
        n_b_bg: l.n_b_bg,
        n_r_bg: l.n_r_bg,
        windows: l.windows.unwrap_or_else(reference_windows),
        exposure_scaling: l.exposure_scaling,
    };
    rec.validate()?;
    Ok(rec)
}
