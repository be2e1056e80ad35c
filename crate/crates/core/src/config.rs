//! TOML run configuration. Every physical quantity carries its unit in the
//! key name (`_MHz_x2pi` is an angular frequency 2π × value × 10⁶ rad/s);
//! unknown keys are rejected. Omitted sections take the nominal values.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::PathBuf;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::atomic::{LevelScheme, MagneticField, PolarizationGeometry, RabiConvention, Transition};
use crate::chronogram::{Chronogram, Counter, Phase};
use crate::collisions::{FitOptions, TraceParams};
use crate::constants;
use crate::detection::{DeadTimeModel, DetectorModel};
use crate::obe::{DriveState, Drives, LaserDrive, Setup};
use crate::sequence::{BatchOptions, Fidelity};
use crate::systematics::BudgetInputs;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Syntax(String),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid { field: field.to_string(), message: e.to_string() }
}

const MHZ: f64 = 2.0 * PI * 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeConfig {
    pub p: f64,
    #[serde(rename = "tau_P_ns")]
    pub tau_p_ns: f64,
    #[serde(rename = "tau_D32_s")]
    pub tau_d32_s: f64,
    #[serde(rename = "tau_D52_s")]
    pub tau_d52_s: f64,
    pub nuclear_spin: f64,
    pub rabi_convention: RabiConvention,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        SchemeConfig {
            p: constants::P_NOMINAL,
            tau_p_ns: constants::TAU_P * 1e9,
            tau_d32_s: constants::TAU_D32,
            tau_d52_s: constants::TAU_D52,
            nuclear_spin: 0.0,
            rabi_convention: RabiConvention::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    #[serde(rename = "magnitude_T")]
    pub magnitude_t: f64,
    pub direction: [f64; 3],
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig { magnitude_t: constants::B_NOMINAL, direction: [0.0, 0.0, 1.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveConfig {
    #[serde(rename = "rabi_MHz_x2pi")]
    pub rabi_mhz: f64,
    #[serde(rename = "detuning_MHz_x2pi")]
    pub detuning_mhz: f64,
    pub propagation: [f64; 3],
    pub polarization: [f64; 3],
    /// Power extinction when switched off; `-inf` for a perfect switch.
    #[serde(rename = "extinction_dB")]
    pub extinction_db: f64,
}

impl DriveConfig {
    fn from_drive(d: &LaserDrive) -> Self {
        let v = |x: &Vector3<f64>| [x.x, x.y, x.z];
        DriveConfig {
            rabi_mhz: d.rabi / MHZ,
            detuning_mhz: d.detuning / MHZ,
            propagation: v(&d.polarization.propagation),
            polarization: v(&d.polarization.polarization),
            extinction_db: d.extinction_db,
        }
    }

    fn build(&self, transition: Transition, field: &str) -> Result<LaserDrive, ConfigError> {
        let geom = PolarizationGeometry::new(Vector3::from(self.propagation), Vector3::from(self.polarization))
            .map_err(|e| invalid(&format!("{field}.polarization"), e))?;
        let d = LaserDrive::new(transition, self.rabi_mhz * MHZ, self.detuning_mhz * MHZ, geom)
            .map_err(|e| invalid(&format!("{field}.rabi_MHz_x2pi"), e))?
            .with_extinction(self.extinction_db);
        d.validate().map_err(|e| invalid(&format!("{field}.extinction_dB"), e))?;
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub label: String,
    pub duration_us: f64,
    pub blue: DriveState,
    pub repump: DriveState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<Counter>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChronogramConfig {
    pub pad_us: f64,
    pub phase: Vec<PhaseConfig>,
}

impl Default for ChronogramConfig {
    fn default() -> Self {
        let c = Chronogram::reference();
        ChronogramConfig {
            pad_us: c.pad * 1e6,
            phase: c
                .phases
                .iter()
                .map(|p| PhaseConfig { label: p.label.clone(), duration_us: p.duration * 1e6, blue: p.blue, repump: p.repump, gate: p.gate })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub efficiency: f64,
    pub dead_time_ns: f64,
    pub dead_time_model: DeadTimeModel,
    /// Background count rate per phase label.
    pub background_per_s: BTreeMap<String, f64>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        let d = DetectorModel::nominal();
        DetectorConfig {
            efficiency: d.efficiency,
            dead_time_ns: d.dead_time * 1e9,
            dead_time_model: d.dead_time_model,
            background_per_s: d.backgrounds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchConfig {
    pub block_size: u64,
    pub warmup_cycles: u32,
    pub flag_probability: f64,
    pub drop_flagged: bool,
}

impl Default for BatchConfig {
    fn default() -> Self {
        let o = BatchOptions::default();
        BatchConfig { block_size: o.block_size, warmup_cycles: o.warmup, flag_probability: o.flag_probability, drop_flagged: o.drop_flagged }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    pub scan_fraction: f64,
    pub event_spacings_s: Vec<f64>,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        let b = BudgetInputs::default();
        BudgetConfig { scan_fraction: b.scan_fraction, event_spacings_s: b.event_spacings }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollisionConfig {
    pub bin_ms: f64,
    pub bright_rate_per_s: f64,
    pub dark_rate_per_s: f64,
    pub shelved_spacing_s: f64,
    pub short_spacing_s: f64,
    #[serde(rename = "tau_D52_s")]
    pub tau_d52_s: f64,
    pub short_min_ms: f64,
    pub short_scale_ms: f64,
    pub ion_lifetime_s: f64,
    pub duration_h: f64,
    /// Count threshold; omitted → midpoint of the bright and dark means.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_counts: Option<f64>,
    pub histogram_bin_s: f64,
    pub exclude_first_bin: bool,
    pub poisson_weights: bool,
}

impl Default for CollisionConfig {
    fn default() -> Self {
        let t = TraceParams::default();
        let f = FitOptions::default();
        CollisionConfig {
            bin_ms: t.bin * 1e3,
            bright_rate_per_s: t.bright_rate,
            dark_rate_per_s: t.dark_rate,
            shelved_spacing_s: t.shelved_spacing,
            short_spacing_s: t.short_spacing,
            tau_d52_s: t.tau_d52,
            short_min_ms: t.short_min * 1e3,
            short_scale_ms: t.short_scale * 1e3,
            ion_lifetime_s: t.ion_lifetime,
            duration_h: t.duration / 3600.0,
            threshold_counts: None,
            histogram_bin_s: f.width,
            exclude_first_bin: f.exclude_first,
            poisson_weights: f.poisson_weights,
        }
    }
}

impl CollisionConfig {
    pub fn trace_params(&self) -> TraceParams {
        TraceParams {
            bin: self.bin_ms * 1e-3,
            bright_rate: self.bright_rate_per_s,
            dark_rate: self.dark_rate_per_s,
            shelved_spacing: self.shelved_spacing_s,
            short_spacing: self.short_spacing_s,
            tau_d52: self.tau_d52_s,
            short_min: self.short_min_ms * 1e-3,
            short_scale: self.short_scale_ms * 1e-3,
            ion_lifetime: self.ion_lifetime_s,
            duration: self.duration_h * 3600.0,
        }
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions { width: self.histogram_bin_s, tau: self.tau_d52_s, exclude_first: self.exclude_first_bin, poisson_weights: self.poisson_weights }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumConfig {
    #[serde(rename = "start_MHz_x2pi")]
    pub start_mhz: f64,
    #[serde(rename = "stop_MHz_x2pi")]
    pub stop_mhz: f64,
    pub points: usize,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        SpectrumConfig { start_mhz: -100.0, stop_mhz: 100.0, points: 201 }
    }
}

impl SpectrumConfig {
    pub fn detunings(&self) -> Result<Vec<f64>, ConfigError> {
        if self.points < 2 || !(self.stop_mhz > self.start_mhz) {
            return Err(invalid("spectrum", "need points ≥ 2 and stop > start"));
        }
        let step = (self.stop_mhz - self.start_mhz) / (self.points - 1) as f64;
        Ok((0..self.points).map(|k| (self.start_mhz + k as f64 * step) * MHZ).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub cycles: u64,
    pub fidelity: Fidelity,
    pub output_dir: PathBuf,
    pub scheme: SchemeConfig,
    pub field: FieldConfig,
    pub blue: DriveConfig,
    pub repump: DriveConfig,
    pub chronogram: ChronogramConfig,
    pub detector: DetectorConfig,
    pub batch: BatchConfig,
    pub budget: BudgetConfig,
    pub collisions: CollisionConfig,
    pub spectrum: SpectrumConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = Drives::nominal();
        RunConfig {
            seed: 0,
            cycles: 1_000_000,
            fidelity: Fidelity::Fast,
            output_dir: PathBuf::from("out"),
            scheme: SchemeConfig::default(),
            field: FieldConfig::default(),
            blue: DriveConfig::from_drive(&d.blue),
            repump: DriveConfig::from_drive(&d.repump),
            chronogram: ChronogramConfig::default(),
            detector: DetectorConfig::default(),
            batch: BatchConfig::default(),
            budget: BudgetConfig::default(),
            collisions: CollisionConfig::default(),
            spectrum: SpectrumConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let over: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        let mut base = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        merge(&mut base, over);
        let c: RunConfig = base.try_into().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.cycles == 0 {
            return Err(invalid("cycles", "must be at least 1"));
        }
        LevelScheme::check_nuclear_spin(self.scheme.nuclear_spin).map_err(|e| invalid("scheme.nuclear_spin", e))?;
        self.setup()?;
        self.chronogram()?;
        self.detector()?;
        if self.batch.block_size == 0 {
            return Err(invalid("batch.block_size", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.batch.flag_probability) {
            return Err(invalid("batch.flag_probability", "must lie in [0, 1]"));
        }
        if !(self.budget.scan_fraction >= 0.0 && self.budget.scan_fraction < 1.0) {
            return Err(invalid("budget.scan_fraction", "must lie in [0, 1)"));
        }
        self.collisions.trace_params().validate().map_err(|e| invalid("collisions", e))?;
        Ok(())
    }

    pub fn scheme(&self) -> Result<LevelScheme, ConfigError> {
        let s = &self.scheme;
        LevelScheme::new(s.p, s.tau_p_ns * 1e-9, s.tau_d32_s, s.tau_d52_s).map_err(|e| invalid("scheme", e))
    }

    pub fn setup(&self) -> Result<Setup, ConfigError> {
        let field = MagneticField::new(self.field.magnitude_t, Vector3::from(self.field.direction)).map_err(|e| invalid("field", e))?;
        Ok(Setup {
            scheme: self.scheme()?,
            field,
            drives: Drives { blue: self.blue.build(Transition::Cooling, "blue")?, repump: self.repump.build(Transition::Repump, "repump")? },
            convention: self.scheme.rabi_convention,
        })
    }

    pub fn chronogram(&self) -> Result<Chronogram, ConfigError> {
        let phases = self
            .chronogram
            .phase
            .iter()
            .map(|p| Phase::new(&p.label, p.duration_us * 1e-6, p.blue, p.repump, p.gate))
            .collect();
        Chronogram::new(phases, self.chronogram.pad_us * 1e-6).map_err(|e| invalid("chronogram", e))
    }

    pub fn detector(&self) -> Result<DetectorModel, ConfigError> {
        let d = &self.detector;
        let mut m = DetectorModel::new(d.efficiency, d.dead_time_ns * 1e-9, d.background_per_s.clone()).map_err(|e| invalid("detector", e))?;
        m.dead_time_model = d.dead_time_model;
        Ok(m)
    }

    pub fn batch_options(&self) -> BatchOptions {
        BatchOptions {
            block_size: self.batch.block_size,
            warmup: self.batch.warmup_cycles,
            flag_probability: self.batch.flag_probability,
            drop_flagged: self.batch.drop_flagged,
        }
    }

    pub fn budget_inputs(&self) -> BudgetInputs {
        BudgetInputs {
            efficiency: self.detector.efficiency,
            dead_time: self.detector.dead_time_ns * 1e-9,
            scan_fraction: self.budget.scan_fraction,
            event_spacings: self.budget.event_spacings_s.clone(),
        }
    }

    /// SHA-256 of the canonical TOML serialization; seed and cycle count are
    /// reported separately and excluded.
    pub fn params_hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        c.cycles = 1;
        c.output_dir = PathBuf::new();
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }
}
