//! Frozen physical constants and reference values.
//!
//! Every value carries its source. Nothing else in the crate hard-codes a
//! physical constant.

use std::f64::consts::PI;

/// Bohr magneton over Planck's constant, Hz/T (CODATA 2018, μ_B/h =
/// 13.996 244 936 1(42) GHz/T).
pub const BOHR_MAGNETON_HZ_PER_T: f64 = 13.996_244_936_1e9;

/// μ_B/ħ in rad s⁻¹ T⁻¹.
pub const BOHR_MAGNETON_RAD_PER_S_T: f64 = 2.0 * PI * BOHR_MAGNETON_HZ_PER_T;

/// Free-electron spin g-factor used in the Landé formula (rounded to 2, the
/// nonrelativistic value).
pub const ELECTRON_SPIN_G: f64 = 2.0;

/// 5p ²P1/2 lifetime, s (Pinnington et al. 1995: 7.39(7) ns).
pub const TAU_P: f64 = 7.39e-9;
pub const TAU_P_UNCERTAINTY: f64 = 0.07e-9;

/// 4d ²D3/2 lifetime, s (Mannervik et al. 1999: 435(4) ms).
pub const TAU_D32: f64 = 0.435;

/// 4d ²D5/2 lifetime, s (Letchumanan et al. 2005: 390.8 ms).
pub const TAU_D52: f64 = 0.3908;

/// Raw branching fraction fed to the OBE for systematic estimates.
pub const P_NOMINAL: f64 = 0.9453;

/// Photomultiplier dead time, s.
pub const TAU_PM: f64 = 70e-9;

/// Global detection efficiency.
pub const EFFICIENCY_NOMINAL: f64 = 1.0e-3;

/// Nominal drive parameters, rad/s.
pub const OMEGA_BLUE: f64 = 2.0 * PI * 8.7e6;
pub const OMEGA_REPUMP: f64 = 2.0 * PI * 18.0e6;
pub const DETUNING_BLUE: f64 = -2.0 * PI * 27.5e6;
pub const DETUNING_REPUMP: f64 = 2.0 * PI * 80.0e6;

/// Nominal magnetic field, T.
pub const B_NOMINAL: f64 = 1.0e-4;

/// Measured AOM extinction of the repump beam, dB (power ratio).
pub const EXTINCTION_DB: f64 = -77.0;

/// Cycle length stated for the reference chronogram, s. The listed phases
/// add up to 720 µs; the rest is an unlit pad.
pub const CYCLE_DURATION: f64 = 770e-6;

/// Mean spacing between dark events observed in the 43 h record, s.
pub const SHELVED_EVENT_SPACING: f64 = 1800.0;
pub const SHORT_EVENT_SPACING: f64 = 1520.0;

/// Length of the long fluorescence record, s (43 h).
pub const COLLISION_RECORD_DURATION: f64 = 43.0 * 3600.0;

/// Mean single-ion trap lifetime, s.
pub const ION_LIFETIME: f64 = 1560.0;

/// Fluorescence record bin, s.
pub const TRACE_BIN: f64 = 5e-3;
