//! Photon detection: efficiency thinning, per-phase backgrounds, PMT dead time.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants;
use crate::obe::{self, DriveState, ObeError, Setup, Trajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectionError {
    #[error("efficiency must lie in (0, 1], got {0}")]
    Efficiency(f64),
    #[error("dead time must be non-negative, got {0} s")]
    DeadTime(f64),
    #[error("background rate for phase {0} must be non-negative, got {1}")]
    Background(String, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeadTimeModel {
    /// Events inside the dead window are lost and do not extend it.
    #[default]
    NonParalyzable,
    /// Every event, counted or not, restarts the dead window.
    Paralyzable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub efficiency: f64,
    /// s
    pub dead_time: f64,
    /// Background count rate per phase label, s⁻¹.
    pub backgrounds: BTreeMap<String, f64>,
    pub dead_time_model: DeadTimeModel,
}

impl DetectorModel {
    pub fn new(efficiency: f64, dead_time: f64, backgrounds: BTreeMap<String, f64>) -> Result<Self, DetectionError> {
        let d = DetectorModel { efficiency, dead_time, backgrounds, dead_time_model: DeadTimeModel::NonParalyzable };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), DetectionError> {
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(DetectionError::Efficiency(self.efficiency));
        }
        if !(self.dead_time >= 0.0) {
            return Err(DetectionError::DeadTime(self.dead_time));
        }
        for (k, &v) in &self.backgrounds {
            if !(v >= 0.0) {
                return Err(DetectionError::Background(k.clone(), v));
            }
        }
        Ok(())
    }

    /// ε = 1, no dead time, no background.
    pub fn transparent() -> Self {
        DetectorModel { efficiency: 1.0, dead_time: 0.0, backgrounds: BTreeMap::new(), dead_time_model: DeadTimeModel::NonParalyzable }
    }

    /// ε = 1.0e−3, τ_PM = 70 ns and the background rates of the first run:
    /// 342 349 and 50 418 counts over 54 272 970 cycles of 160 µs and 80 µs
    /// windows.
    pub fn nominal() -> Self {
        let cycles = 54_272_970.0;
        let blue = 342_349.0 / (cycles * 160e-6);
        let red = 50_418.0 / (cycles * 80e-6);
        let backgrounds = [("c", blue), ("g", blue), ("d", red), ("e", red)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        DetectorModel {
            efficiency: constants::EFFICIENCY_NOMINAL,
            dead_time: constants::TAU_PM,
            backgrounds,
            dead_time_model: DeadTimeModel::NonParalyzable,
        }
    }

    pub fn background(&self, phase: &str) -> f64 {
        self.backgrounds.get(phase).copied().unwrap_or(0.0)
    }

    pub fn with_efficiency(&self, efficiency: f64) -> Self {
        DetectorModel { efficiency, ..self.clone() }
    }

    pub fn without_backgrounds(&self) -> Self {
        DetectorModel { backgrounds: BTreeMap::new(), ..self.clone() }
    }
}

/// Number of events surviving the dead time; `events` must be sorted.
pub fn dead_time_filter(events: &[f64], dead_time: f64, model: DeadTimeModel) -> u32 {
    if dead_time <= 0.0 {
        return events.len() as u32;
    }
    let mut count = 0;
    let mut blocked_until = f64::NEG_INFINITY;
    for &t in events {
        if t >= blocked_until {
            count += 1;
            blocked_until = t + dead_time;
        } else if model == DeadTimeModel::Paralyzable {
            blocked_until = t + dead_time;
        }
    }
    count
}

/// Detected count for one gate window of length `window`.
///
/// `emissions` are emission times relative to the window start, sorted.
/// `scratch` is reused between calls to avoid allocation.
pub fn detect<R: Rng + ?Sized>(
    emissions: &[f64],
    window: f64,
    background_rate: f64,
    det: &DetectorModel,
    rng: &mut R,
    scratch: &mut Vec<f64>,
) -> u32 {
    scratch.clear();
    for &t in emissions {
        if det.efficiency >= 1.0 || rng.random::<f64>() < det.efficiency {
            scratch.push(t);
        }
    }
    let mean_bg = background_rate * window;
    if mean_bg > 0.0 {
        let n = Poisson::new(mean_bg).expect("finite mean").sample(rng) as usize;
        for _ in 0..n {
            scratch.push(rng.random::<f64>() * window);
        }
        if n > 0 && det.dead_time > 0.0 {
            scratch.sort_by(f64::total_cmp);
        }
    }
    dead_time_filter(scratch, det.dead_time, det.dead_time_model)
}

/// q = 1 − exp(−∫₀^τ ε A_SP σ_PP(t) dt), trapezoidal quadrature of a sampled
/// trajectory with linear interpolation at the upper limit.
pub fn dead_time_loss_q(trajectory: &Trajectory, efficiency: f64, a_sp: f64, dead_time: f64) -> f64 {
    if dead_time <= 0.0 {
        return 0.0;
    }
    let (t, s) = (&trajectory.times, &trajectory.sigma_pp);
    let mut integral = 0.0;
    for k in 1..t.len() {
        if t[k - 1] >= dead_time {
            break;
        }
        let (t1, s1) = if t[k] > dead_time {
            let f = (dead_time - t[k - 1]) / (t[k] - t[k - 1]);
            (dead_time, s[k - 1] + f * (s[k] - s[k - 1]))
        } else {
            (t[k], s[k])
        };
        integral += 0.5 * (t1 - t[k - 1]) * (s[k - 1] + s1);
    }
    1.0 - (-efficiency * a_sp * integral).exp()
}

/// Dead-time loss probability from the optical Bloch trajectory of window c
/// (blue on, repump off) starting just after a blue emission.
pub fn dead_time_q(setup: &Setup, efficiency: f64, dead_time: f64) -> Result<f64, ObeError> {
    if dead_time <= 0.0 {
        return Ok(0.0);
    }
    let rho0 = obe::post_emission_state(setup)?;
    let l = setup.liouvillian(DriveState::On, DriveState::Off)?;
    let samples = ((dead_time / 0.02e-9).ceil() as usize).clamp(64, 20_000) + 1;
    let traj = obe::p_population_trajectory(&rho0, &l, dead_time, samples)?;
    Ok(dead_time_loss_q(&traj, efficiency, setup.scheme.a_sp(), dead_time))
}
