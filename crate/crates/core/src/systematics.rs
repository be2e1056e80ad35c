//! Systematic corrections to p̂ and the error budget.
//!
//! Every shift is the correction to add to the raw estimate
//! (p_ideal − p_raw).

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chronogram::Chronogram;
use crate::detection;
use crate::estimator::{branching_fraction, net_ratio, CountRecord, EstimatorError};
use crate::obe::{expected_counts, ObeError, Setup};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BudgetError {
    #[error("budget is missing the {0} row")]
    MissingRow(&'static str),
    #[error("budget has more than one {0} row")]
    DuplicateRow(&'static str),
    #[error(transparent)]
    Obe(#[from] ObeError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Collisions,
    DeadTime,
    FiniteWindows,
    LaserLeaks,
}

impl RowKind {
    pub const ALL: [RowKind; 4] = [RowKind::Collisions, RowKind::DeadTime, RowKind::FiniteWindows, RowKind::LaserLeaks];

    pub fn label(self) -> &'static str {
        match self {
            RowKind::Collisions => "Collisions",
            RowKind::DeadTime => "Dead time",
            RowKind::FiniteWindows => "D3/2 lifetime and finite windows",
            RowKind::LaserLeaks => "Laser leaks",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub kind: RowKind,
    pub shift: f64,
    pub plus: f64,
    pub minus: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub shift: f64,
    pub plus: f64,
    pub minus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    pub rows: Vec<BudgetRow>,
    pub total: Totals,
}

/// Envelope of a quantity over a parameter grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub nominal: f64,
    pub min: f64,
    pub max: f64,
    /// (parameter multipliers, value)
    pub points: Vec<(Vec<f64>, f64)>,
}

impl Envelope {
    /// Signed deviations (max − nominal, nominal − min), both ≥ 0.
    pub fn bounds(&self) -> (f64, f64) {
        (self.max - self.nominal, self.nominal - self.min)
    }
}

/// Evaluates `f` on the full {1−fraction, 1, 1+fraction}ᵏ grid of parameter
/// multipliers, in parallel.
pub fn sensitivity_scan<F>(dims: usize, fraction: f64, f: F) -> Result<Envelope, BudgetError>
where
    F: Fn(&[f64]) -> Result<f64, BudgetError> + Sync,
{
    let levels = [1.0 - fraction, 1.0, 1.0 + fraction];
    let grid: Vec<Vec<f64>> = (0..3usize.pow(dims as u32))
        .map(|mut k| {
            (0..dims)
                .map(|_| {
                    let l = levels[k % 3];
                    k /= 3;
                    l
                })
                .collect()
        })
        .collect();
    let values: Vec<f64> = grid.par_iter().map(|m| f(m)).collect::<Result<_, _>>()?;
    let nominal_idx = (0..dims).map(|d| 3usize.pow(d as u32)).sum::<usize>();
    let nominal = values[nominal_idx];
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(Envelope { nominal, min, max, points: grid.into_iter().zip(values).collect() })
}

/// Correction for blue photons lost to dead time: N_b → N_b/(1−q).
pub fn dead_time_shift(q: f64, p: f64) -> f64 {
    let br = p / (1.0 - p) / (1.0 - q);
    br / (1.0 + br) - p
}

pub fn dead_time_row(setup: &Setup, efficiency: f64, dead_time: f64, fraction: f64) -> Result<BudgetRow, BudgetError> {
    let p = setup.scheme.p;
    let env = sensitivity_scan(2, fraction, |m| {
        let s = setup.with_blue_rabi(setup.drives.blue.rabi * m[0]);
        Ok(dead_time_shift(detection::dead_time_q(&s, efficiency, dead_time * m[1])?, p))
    })?;
    let (plus, minus) = env.bounds();
    Ok(BudgetRow { kind: RowKind::DeadTime, shift: env.nominal, plus, minus })
}

/// p̂ from the periodic-steady-state expected counts.
pub fn expected_estimate(chronogram: &Chronogram, setup: &Setup) -> Result<f64, BudgetError> {
    Ok(expected_counts(chronogram, setup, None)?.branching_fraction())
}

/// p − p̂(expected counts) with perfect switching, so that only the window
/// lengths, preparation and τ_D contribute.
pub fn finite_window_shift(chronogram: &Chronogram, setup: &Setup) -> Result<f64, BudgetError> {
    let s = setup.with_extinctions(f64::NEG_INFINITY, f64::NEG_INFINITY);
    Ok(setup.scheme.p - expected_estimate(chronogram, &s)?)
}

/// Bounds from the blue Rabi frequency alone.
pub fn finite_window_row(chronogram: &Chronogram, setup: &Setup, fraction: f64) -> Result<BudgetRow, BudgetError> {
    let env = sensitivity_scan(1, fraction, |m| {
        finite_window_shift(chronogram, &setup.with_blue_rabi(setup.drives.blue.rabi * m[0]))
    })?;
    let (plus, minus) = env.bounds();
    Ok(BudgetRow { kind: RowKind::FiniteWindows, shift: env.nominal, plus, minus })
}

/// p̂(perfect switches) − p̂(configured extinctions).
pub fn laser_leak_shift(chronogram: &Chronogram, setup: &Setup) -> Result<f64, BudgetError> {
    let perfect = setup.with_extinctions(f64::NEG_INFINITY, f64::NEG_INFINITY);
    if perfect == *setup {
        return Ok(0.0);
    }
    Ok(expected_estimate(chronogram, &perfect)? - expected_estimate(chronogram, setup)?)
}

/// Bounds from the joint (Ω₁, Ω₂) grid; never tighter than the shift itself.
pub fn laser_leak_row(chronogram: &Chronogram, setup: &Setup, fraction: f64) -> Result<BudgetRow, BudgetError> {
    let env = sensitivity_scan(2, fraction, |m| {
        let s = setup
            .with_blue_rabi(setup.drives.blue.rabi * m[0])
            .with_repump_rabi(setup.drives.repump.rabi * m[1]);
        laser_leak_shift(chronogram, &s)
    })?;
    let (plus, minus) = env.bounds();
    let floor = env.nominal.abs();
    Ok(BudgetRow { kind: RowKind::LaserLeaks, shift: env.nominal, plus: plus.max(floor), minus: minus.max(floor) })
}

/// Worst case: each dark event wipes the counts of two whole cycles.
///
/// The per-cycle influence is the change of the estimator when one cycle's
/// blue (or repump) photons are removed from an ideal record.
pub fn collision_bound(spacings: &[f64], cycle_duration: f64, p: f64) -> Result<f64, BudgetError> {
    let events_per_cycle: f64 = spacings.iter().filter(|s| s.is_finite() && **s > 0.0).map(|s| cycle_duration / s).sum();
    if events_per_cycle == 0.0 {
        return Ok(0.0);
    }
    let n = 1e6;
    let br = p / (1.0 - p);
    let base = net_ratio(n * br, n);
    let influence = n * (base - net_ratio(n * br - br, n)).abs().max((net_ratio(n * br, n - 1.0) - base).abs());
    Ok(2.0 * events_per_cycle * influence)
}

pub fn collision_row(spacings: &[f64], cycle_duration: f64, p: f64) -> Result<BudgetRow, BudgetError> {
    let b = collision_bound(spacings, cycle_duration, p)?;
    Ok(BudgetRow { kind: RowKind::Collisions, shift: 0.0, plus: b, minus: b })
}

pub fn build_budget(rows: Vec<BudgetRow>) -> Result<ErrorBudget, BudgetError> {
    for k in RowKind::ALL {
        match rows.iter().filter(|r| r.kind == k).count() {
            0 => return Err(BudgetError::MissingRow(k.label())),
            1 => {}
            _ => return Err(BudgetError::DuplicateRow(k.label())),
        }
    }
    let mut rows = rows;
    rows.sort_by_key(|r| r.kind);
    let total = Totals {
        shift: rows.iter().map(|r| r.shift).sum(),
        plus: rows.iter().map(|r| r.plus).sum(),
        minus: rows.iter().map(|r| r.minus).sum(),
    };
    Ok(ErrorBudget { rows, total })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetInputs {
    pub efficiency: f64,
    pub dead_time: f64,
    pub scan_fraction: f64,
    pub event_spacings: Vec<f64>,
}

impl Default for BudgetInputs {
    fn default() -> Self {
        BudgetInputs {
            efficiency: crate::constants::EFFICIENCY_NOMINAL,
            dead_time: crate::constants::TAU_PM,
            scan_fraction: 0.2,
            event_spacings: vec![crate::constants::SHELVED_EVENT_SPACING, crate::constants::SHORT_EVENT_SPACING],
        }
    }
}

/// All four rows at the given operating point.
pub fn compute_budget(chronogram: &Chronogram, setup: &Setup, inputs: &BudgetInputs) -> Result<ErrorBudget, BudgetError> {
    let f = inputs.scan_fraction;
    let rows = vec![
        collision_row(&inputs.event_spacings, chronogram.cycle_duration(), setup.scheme.p)?,
        dead_time_row(setup, inputs.efficiency, inputs.dead_time, f)?,
        finite_window_row(chronogram, setup, f)?,
        laser_leak_row(chronogram, setup, f)?,
    ];
    build_budget(rows)
}

impl ErrorBudget {
    pub fn row(&self, kind: RowKind) -> &BudgetRow {
        self.rows.iter().find(|r| r.kind == kind).expect("complete budget")
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "row,shift,uncertainty_plus,uncertainty_minus")?;
        for r in &self.rows {
            writeln!(out, "{},{:e},{:e},{:e}", r.kind.label(), r.shift, r.plus, r.minus)?;
        }
        writeln!(out, "Total,{:e},{:e},{:e}", self.total.shift, self.total.plus, self.total.minus)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<34} {:>12} {:>12} {:>12}", "Effect", "Shift", "Unc. (+)", "Unc. (-)");
        let line = |s: &mut String, name: &str, a: f64, b: f64, c: f64| {
            let _ = writeln!(s, "{name:<34} {a:>12.1e} {b:>12.1e} {c:>12.1e}");
        };
        for r in &self.rows {
            line(&mut s, r.kind.label(), r.shift, r.plus, r.minus);
        }
        line(&mut s, "Total", self.total.shift, self.total.plus, self.total.minus);
        s
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("budget serializes")))
    }
}

/// p̂ difference between two acquisitions taken with different field
/// orientations, with its statistical uncertainty.
pub fn birefringence_comparison(a: &CountRecord, b: &CountRecord) -> Result<(f64, f64), BudgetError> {
    let (ea, eb) = (branching_fraction(a)?, branching_fraction(b)?);
    Ok((ea.p - eb.p, ea.sigma_stat.hypot(eb.sigma_stat)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn row(kind: RowKind, shift: f64, plus: f64, minus: f64) -> BudgetRow {
        BudgetRow { kind, shift, plus, minus }
    }

    #[test]
    fn dead_time_shift_first_order() {
        let p = 0.9453;
        assert_eq!(dead_time_shift(0.0, p), 0.0);
        let s = dead_time_shift(1.4e-4, p);
        assert_abs_diff_eq!(s, 1.4e-4 * p * (1.0 - p), epsilon = 1e-9);
        assert!((s - 7e-6).abs() < 0.5e-6);
    }

    #[test]
    fn zero_width_scan_is_degenerate() {
        let env = sensitivity_scan(2, 0.0, |m| Ok(m[0] * 3.0 + m[1])).unwrap();
        assert_eq!(env.bounds(), (0.0, 0.0));
        let env = sensitivity_scan(2, 0.2, |m| Ok(m[0] - m[1])).unwrap();
        assert_eq!(env.nominal, 0.0);
        assert!(env.min <= env.nominal && env.nominal <= env.max);
        assert_abs_diff_eq!(env.max, 0.4, epsilon = 1e-12);
    }

    #[test]
    fn budget_assembly() {
        let rows = vec![
            row(RowKind::LaserLeaks, 1e-8, 1e-8, 1e-8),
            row(RowKind::Collisions, 0.0, 2e-7, 2e-7),
            row(RowKind::DeadTime, 7e-6, 5e-6, 3e-6),
            row(RowKind::FiniteWindows, 1e-5, 2e-4, 2e-5),
        ];
        let b = build_budget(rows.clone()).unwrap();
        let mut rev = rows.clone();
        rev.reverse();
        assert_eq!(build_budget(rev).unwrap(), b);
        assert_abs_diff_eq!(b.total.plus, 2.0521e-4, epsilon = 1e-12);
        assert!(matches!(build_budget(rows[..3].to_vec()), Err(BudgetError::MissingRow(_))));
        let zero = build_budget(RowKind::ALL.iter().map(|&k| row(k, 0.0, 0.0, 0.0)).collect()).unwrap();
        assert_eq!(zero.total, Totals { shift: 0.0, plus: 0.0, minus: 0.0 });
        assert_eq!(b.hash(), build_budget(rows).unwrap().hash());
        assert!(b.table().contains("Total"));
    }

    #[test]
    fn collision_bound_scaling() {
        let cyc = 770e-6;
        let b = collision_bound(&[1800.0, 1520.0], cyc, 0.9453).unwrap();
        let analytic = 2.0 * cyc * (1.0 / 1800.0 + 1.0 / 1520.0) * 0.9453 * 0.0547;
        assert!((b / analytic - 1.0).abs() < 1e-3, "{b} vs {analytic}");
        assert_eq!(collision_bound(&[f64::INFINITY], cyc, 0.9453).unwrap(), 0.0);
        let b10 = collision_bound(&[180.0, 152.0], cyc, 0.9453).unwrap();
        assert_abs_diff_eq!(b10 / b, 10.0, epsilon = 1e-9);
    }
}
