use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::obe::DriveState;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChronogramError {
    #[error("phase {0}: duration must be positive, got {1} s")]
    NonPositiveDuration(String, f64),
    #[error("pad must be non-negative, got {0} s")]
    NegativePad(f64),
    #[error("counter {0:?} is gated more than once")]
    DuplicateGate(Counter),
    #[error("counter {0:?} is never gated")]
    MissingGate(Counter),
    #[error("no phase labelled {0}")]
    UnknownPhase(String),
}

/// The four photon counters of a detection cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Counter {
    #[serde(rename = "N_b")]
    Nb,
    #[serde(rename = "N_r")]
    Nr,
    #[serde(rename = "N_r_B")]
    NrB,
    #[serde(rename = "N_b_B")]
    NbB,
}

impl Counter {
    pub const ALL: [Counter; 4] = [Counter::Nb, Counter::Nr, Counter::NrB, Counter::NbB];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Counter::Nb => "N_b",
            Counter::Nr => "N_r",
            Counter::NrB => "N_r_B",
            Counter::NbB => "N_b_B",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub label: String,
    pub duration: f64,
    pub blue: DriveState,
    pub repump: DriveState,
    pub gate: Option<Counter>,
}

impl Phase {
    pub fn new(label: &str, duration: f64, blue: DriveState, repump: DriveState, gate: Option<Counter>) -> Self {
        Phase { label: label.to_string(), duration, blue, repump, gate }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chronogram {
    pub phases: Vec<Phase>,
    /// Unlit, ungated dead time appended after the last phase.
    pub pad: f64,
}

impl Default for Chronogram {
    fn default() -> Self {
        Self::reference()
    }
}

impl Chronogram {
    /// Seven phases a–g (720 µs) plus a 50 µs pad to the 770 µs cycle.
    pub fn reference() -> Self {
        use Counter::*;
        use DriveState::{Off, On};
        let us = 1e-6;
        let phases = vec![
            Phase::new("a", 80.0 * us, On, On, None),
            Phase::new("b", 80.0 * us, Off, On, None),
            Phase::new("c", 160.0 * us, On, Off, Some(Nb)),
            Phase::new("d", 80.0 * us, Off, On, Some(Nr)),
            Phase::new("e", 80.0 * us, Off, On, Some(NrB)),
            Phase::new("f", 80.0 * us, On, Off, None),
            Phase::new("g", 160.0 * us, On, Off, Some(NbB)),
        ];
        Chronogram { phases, pad: 50.0 * us }
    }

    pub fn new(phases: Vec<Phase>, pad: f64) -> Result<Self, ChronogramError> {
        let c = Chronogram { phases, pad };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ChronogramError> {
        for ph in &self.phases {
            if !(ph.duration > 0.0) || !ph.duration.is_finite() {
                return Err(ChronogramError::NonPositiveDuration(ph.label.clone(), ph.duration));
            }
        }
        if !(self.pad >= 0.0) {
            return Err(ChronogramError::NegativePad(self.pad));
        }
        for c in Counter::ALL {
            match self.phases.iter().filter(|p| p.gate == Some(c)).count() {
                0 => return Err(ChronogramError::MissingGate(c)),
                1 => {}
                _ => return Err(ChronogramError::DuplicateGate(c)),
            }
        }
        Ok(())
    }

    pub fn listed_duration(&self) -> f64 {
        self.phases.iter().map(|p| p.duration).sum()
    }

    pub fn cycle_duration(&self) -> f64 {
        self.listed_duration() + self.pad
    }

    pub fn gate_duration(&self, counter: Counter) -> f64 {
        self.phases.iter().find(|p| p.gate == Some(counter)).map_or(0.0, |p| p.duration)
    }

    pub fn gate_durations(&self) -> [f64; 4] {
        Counter::ALL.map(|c| self.gate_duration(c))
    }

    pub fn phase(&self, label: &str) -> Option<&Phase> {
        self.phases.iter().find(|p| p.label == label)
    }

    pub fn with_duration(mut self, label: &str, duration: f64) -> Result<Self, ChronogramError> {
        let ph = self
            .phases
            .iter_mut()
            .find(|p| p.label == label)
            .ok_or_else(|| ChronogramError::UnknownPhase(label.to_string()))?;
        ph.duration = duration;
        self.validate()?;
        Ok(self)
    }

    /// Every phase (and the pad) stretched by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut c = self.clone();
        for p in &mut c.phases {
            p.duration *= factor;
        }
        c.pad *= factor;
        c
    }
}
