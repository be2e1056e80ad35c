//! Monte Carlo execution of the detection cycle.
//!
//! Two tiers share one interface. FAST treats the ion as a bright/dark
//! telegraph process whose rates come from closed-subsystem OBE steady
//! states; OBE samples photons from the exact ensemble rate trajectory by
//! thinning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atomic::{LevelScheme, D_INDICES, P_INDICES, S_INDICES};
use crate::chronogram::{Chronogram, ChronogramError, Counter};
use crate::detection::{detect, DetectionError, DetectorModel};
use crate::estimator::CountRecord;
use crate::obe::{closed_p_population, expected_counts, DriveState, ObeError, Setup};

pub const DEFAULT_BLOCK: u64 = 10_000;
pub const DEFAULT_WARMUP: u32 = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SequenceError {
    #[error(transparent)]
    Obe(#[from] ObeError),
    #[error(transparent)]
    Chronogram(#[from] ChronogramError),
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error("a batch needs at least one cycle")]
    NoCycles,
    #[error("block size must be positive")]
    BlockSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fidelity {
    #[default]
    Fast,
    Obe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IonState {
    Ground,
    D32,
    /// Shelved in D5/2 by an off-resonant or collisional event.
    D52,
}

/// Telegraph-process rates, indexed [on, off] by the relevant switch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FastRates {
    /// Blue photons per second while bright.
    pub blue: [f64; 2],
    /// Bright → D3/2 per second.
    pub shelve: [f64; 2],
    /// D3/2 → bright per second, each accompanied by one blue photon.
    pub repump: [f64; 2],
    /// Spontaneous D3/2 → S1/2, no blue photon.
    pub d_decay: f64,
}

fn idx(s: DriveState) -> usize {
    match s {
        DriveState::On => 0,
        DriveState::Off => 1,
    }
}

impl FastRates {
    /// R_b = pΓσ_PP of the closed S–P system and k = pΓσ_PP of the closed
    /// D–P system, at the on and leak Rabi frequencies.
    pub fn from_obe(setup: &Setup) -> Result<Self, ObeError> {
        let p = setup.scheme.p;
        let gamma = setup.scheme.gamma_p();
        let mut out = FastRates { blue: [0.0; 2], shelve: [0.0; 2], repump: [0.0; 2], d_decay: 1.0 / setup.scheme.tau_d32 };
        let sp: Vec<usize> = S_INDICES.iter().chain(&P_INDICES).copied().collect();
        let dp: Vec<usize> = P_INDICES.iter().chain(&D_INDICES).copied().collect();
        let closed_sp = setup.with_scheme(LevelScheme::with_limits(1.0, setup.scheme.tau_p, setup.scheme.tau_d32, setup.scheme.tau_d52)?);
        let closed_dp = setup.with_scheme(LevelScheme::with_limits(0.0, setup.scheme.tau_p, setup.scheme.tau_d32, setup.scheme.tau_d52)?);
        for state in [DriveState::On, DriveState::Off] {
            let i = idx(state);
            if setup.drives.blue.with_state(state).effective_rabi() > 0.0 {
                let s = closed_p_population(&closed_sp, state, DriveState::Off, &sp)?;
                out.blue[i] = p * gamma * s;
                out.shelve[i] = (1.0 - p) * gamma * s;
            }
            if setup.drives.repump.with_state(state).effective_rabi() > 0.0 {
                let s = closed_p_population(&closed_dp, DriveState::Off, state, &dp)?;
                out.repump[i] = p * gamma * s;
            }
        }
        Ok(out)
    }
}

/// Piecewise-constant emission intensity of one gated phase.
#[derive(Debug, Clone, PartialEq)]
struct GateIntensity {
    cell: f64,
    rates: Vec<f64>,
    max: f64,
}

#[derive(Debug, Clone)]
struct ObeTier {
    gates: [GateIntensity; 4],
    ground_exit: f64,
}

#[derive(Debug, Clone)]
pub struct SequenceModel {
    pub setup: Setup,
    pub chronogram: Chronogram,
    pub fidelity: Fidelity,
    pub rates: FastRates,
    obe: Option<ObeTier>,
}

impl SequenceModel {
    pub fn new(setup: Setup, chronogram: Chronogram, fidelity: Fidelity) -> Result<Self, SequenceError> {
        chronogram.validate()?;
        let rates = FastRates::from_obe(&setup)?;
        let obe = match fidelity {
            Fidelity::Fast => None,
            Fidelity::Obe => {
                let e = expected_counts(&chronogram, &setup, None)?;
                let mut gates: [GateIntensity; 4] = std::array::from_fn(|_| GateIntensity { cell: 1.0, rates: vec![], max: 0.0 });
                for (ph, tr) in chronogram.phases.iter().zip(&e.phases) {
                    if let Some(g) = ph.gate {
                        let rates: Vec<f64> = tr.cells.iter().map(|n| (n / tr.cell_duration).max(0.0)).collect();
                        let max = rates.iter().copied().fold(0.0, f64::max);
                        gates[g.index()] = GateIntensity { cell: tr.cell_duration, rates, max };
                    }
                }
                let exit = &e.phases.last().expect("non-empty chronogram").exit;
                let ground_exit = exit.populations(&S_INDICES) + exit.populations(&P_INDICES);
                Some(ObeTier { gates, ground_exit })
            }
        };
        Ok(SequenceModel { setup, chronogram, fidelity, rates, obe })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleOutcome {
    /// Emitted blue photons per counter.
    pub emitted: [u32; 4],
    pub final_state: IonState,
    /// Emission times relative to each gate's opening, sorted.
    pub timestamps: [Vec<f64>; 4],
}

/// Evolves the telegraph process through one phase; returns the blue photon
/// times (relative to the phase start) into `out` when given.
pub fn simulate_phase<R: Rng + ?Sized>(
    rng: &mut R,
    rates: &FastRates,
    blue: DriveState,
    repump: DriveState,
    duration: f64,
    state: &mut IonState,
    mut out: Option<&mut Vec<f64>>,
) -> u32 {
    let (rb, rs) = (rates.blue[idx(blue)], rates.shelve[idx(blue)]);
    let rk = rates.repump[idx(repump)];
    let mut t = 0.0;
    let mut n = 0;
    loop {
        let total = match state {
            IonState::Ground => rb + rs,
            IonState::D32 => rk + rates.d_decay,
            IonState::D52 => 0.0,
        };
        if !(total > 0.0) {
            break;
        }
        t += Exp::new(total).expect("positive rate").sample(rng);
        if t >= duration {
            break;
        }
        let u = rng.random::<f64>() * total;
        match state {
            IonState::Ground if u < rb => {
                n += 1;
                if let Some(o) = out.as_deref_mut() {
                    o.push(t);
                }
            }
            IonState::Ground => *state = IonState::D32,
            IonState::D32 if u < rk => {
                n += 1;
                if let Some(o) = out.as_deref_mut() {
                    o.push(t);
                }
                *state = IonState::Ground;
            }
            IonState::D32 => *state = IonState::Ground,
            IonState::D52 => unreachable!(),
        }
    }
    n
}

fn thin<R: Rng + ?Sized>(rng: &mut R, g: &GateIntensity, out: &mut Vec<f64>) -> u32 {
    if g.max <= 0.0 {
        return 0;
    }
    let window = g.cell * g.rates.len() as f64;
    let exp = Exp::new(g.max).expect("positive rate");
    let mut t = 0.0;
    let mut n = 0;
    loop {
        t += exp.sample(rng);
        if t >= window {
            break;
        }
        let k = ((t / g.cell) as usize).min(g.rates.len() - 1);
        if rng.random::<f64>() * g.max < g.rates[k] {
            out.push(t);
            n += 1;
        }
    }
    n
}

/// One detection cycle starting from `state`.
pub fn run_cycle<R: Rng + ?Sized>(rng: &mut R, model: &SequenceModel, state: IonState) -> CycleOutcome {
    let mut ts: [Vec<f64>; 4] = Default::default();
    let mut emitted = [0u32; 4];
    match &model.obe {
        None => {
            let mut s = if state == IonState::D52 { IonState::Ground } else { state };
            for ph in &model.chronogram.phases {
                let out = ph.gate.map(|g| &mut ts[g.index()]);
                let n = simulate_phase(rng, &model.rates, ph.blue, ph.repump, ph.duration, &mut s, out);
                if let Some(g) = ph.gate {
                    emitted[g.index()] = n;
                }
            }
            if model.chronogram.pad > 0.0 {
                simulate_phase(rng, &model.rates, DriveState::Off, DriveState::Off, model.chronogram.pad, &mut s, None);
            }
            CycleOutcome { emitted, final_state: s, timestamps: ts }
        }
        Some(tier) => {
            for c in Counter::ALL {
                emitted[c.index()] = thin(rng, &tier.gates[c.index()], &mut ts[c.index()]);
            }
            let final_state = if rng.random::<f64>() < tier.ground_exit { IonState::Ground } else { IonState::D32 };
            CycleOutcome { emitted, final_state, timestamps: ts }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchOptions {
    pub block_size: u64,
    pub warmup: u32,
    /// Probability per cycle of a collision that darkens the ion from a
    /// uniformly drawn instant until the end of the cycle.
    pub flag_probability: f64,
    pub drop_flagged: bool,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions { block_size: DEFAULT_BLOCK, warmup: DEFAULT_WARMUP, flag_probability: 0.0, drop_flagged: true }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub blocks: u64,
    pub dropped: u64,
    pub flagged: u64,
    /// Σ emitted and Σ emitted² per counter, over aggregated cycles.
    pub emitted_sum: [u64; 4],
    pub emitted_sumsq: [u64; 4],
    /// Cycles ending bright / in D3/2.
    pub final_ground: u64,
    pub final_d32: u64,
}

impl Diagnostics {
    fn merge(mut self, o: Diagnostics) -> Diagnostics {
        self.blocks += o.blocks;
        self.dropped += o.dropped;
        self.flagged += o.flagged;
        for k in 0..4 {
            self.emitted_sum[k] += o.emitted_sum[k];
            self.emitted_sumsq[k] += o.emitted_sumsq[k];
        }
        self.final_ground += o.final_ground;
        self.final_d32 += o.final_d32;
        self
    }

    /// Mean and standard error of emitted photons per cycle.
    pub fn emitted_mean(&self, c: Counter, cycles: u64) -> (f64, f64) {
        let n = cycles as f64;
        let m = self.emitted_sum[c.index()] as f64 / n;
        let var = (self.emitted_sumsq[c.index()] as f64 / n - m * m).max(0.0);
        (m, (var / n).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    pub record: CountRecord,
    pub diagnostics: Diagnostics,
}

fn run_block(model: &SequenceModel, det: &DetectorModel, seed: u64, block: u64, cycles: u64, opts: &BatchOptions) -> (CountRecord, Diagnostics) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block);
    let mut state = IonState::Ground;
    for _ in 0..opts.warmup {
        state = run_cycle(&mut rng, model, state).final_state;
    }
    let labels: [(&str, f64); 4] = Counter::ALL.map(|c| {
        let ph = model.chronogram.phases.iter().find(|p| p.gate == Some(c)).expect("validated");
        (ph.label.as_str(), ph.duration)
    });
    let starts: [f64; 4] = Counter::ALL.map(|c| {
        let mut t = 0.0;
        for p in &model.chronogram.phases {
            if p.gate == Some(c) {
                break;
            }
            t += p.duration;
        }
        t
    });
    let cycle = model.chronogram.cycle_duration();
    let mut counts = [0u64; 4];
    let mut diag = Diagnostics { blocks: 1, ..Default::default() };
    let mut kept = 0u64;
    let mut scratch = Vec::new();
    for _ in 0..cycles {
        let mut out = run_cycle(&mut rng, model, state);
        state = out.final_state;
        if opts.flag_probability > 0.0 && rng.random::<f64>() < opts.flag_probability {
            diag.flagged += 1;
            if opts.drop_flagged {
                diag.dropped += 1;
                continue;
            }
            let cut = rng.random::<f64>() * cycle;
            for c in Counter::ALL {
                let ts = &mut out.timestamps[c.index()];
                ts.retain(|&t| starts[c.index()] + t < cut);
                out.emitted[c.index()] = ts.len() as u32;
            }
        }
        kept += 1;
        for c in Counter::ALL {
            let k = c.index();
            let (label, window) = labels[k];
            counts[k] += detect(&out.timestamps[k], window, det.background(label), det, &mut rng, &mut scratch) as u64;
            let e = out.emitted[k] as u64;
            diag.emitted_sum[k] += e;
            diag.emitted_sumsq[k] += e * e;
        }
        match state {
            IonState::Ground => diag.final_ground += 1,
            _ => diag.final_d32 += 1,
        }
    }
    let rec = CountRecord {
        cycles: kept,
        n_b: counts[Counter::Nb.index()],
        n_r: counts[Counter::Nr.index()],
        n_b_bg: counts[Counter::NbB.index()],
        n_r_bg: counts[Counter::NrB.index()],
        windows: model.chronogram.gate_durations(),
        exposure_scaling: false,
    };
    (rec, diag)
}

/// Aggregates `n_cycles` cycles split into fixed-size blocks; block `b` draws
/// from ChaCha8 stream `b` of `seed`, so the result does not depend on the
/// number of worker threads.
pub fn run_batch(
    model: &SequenceModel,
    det: &DetectorModel,
    seed: u64,
    n_cycles: u64,
    opts: &BatchOptions,
) -> Result<BatchResult, SequenceError> {
    if n_cycles == 0 {
        return Err(SequenceError::NoCycles);
    }
    if opts.block_size == 0 {
        return Err(SequenceError::BlockSize);
    }
    det.validate()?;
    let blocks = n_cycles.div_ceil(opts.block_size);
    let windows = model.chronogram.gate_durations();
    let (record, diagnostics) = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let n = opts.block_size.min(n_cycles - b * opts.block_size);
            run_block(model, det, seed, b, n, opts)
        })
        .reduce(
            || (CountRecord { windows, ..CountRecord::new(0, 0, 0, 0, 0) }, Diagnostics::default()),
            |(ra, da), (rb, db)| (ra.merge(&rb), da.merge(db)),
        );
    Ok(BatchResult { record, diagnostics })
}
