//! Dark periods in long fluorescence records: generation, thresholding,
//! fixed-τ histogram fit and trap-lifetime statistics.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CollisionError {
    #[error("{0} must be positive, got {1}")]
    NonPositive(&'static str, f64),
    #[error("empty trace")]
    EmptyTrace,
    #[error("fit is degenerate: {0}")]
    FitDegenerate(String),
    #[error("need at least 2 loss events, got {0}")]
    InsufficientLosses(usize),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EventClass {
    Short,
    Shelved,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DarkEvent {
    pub start: f64,
    pub duration: f64,
    pub class: EventClass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FluorescenceTrace {
    pub bin: f64,
    pub counts: Vec<u32>,
}

impl FluorescenceTrace {
    pub fn new(bin: f64, counts: Vec<u32>) -> Result<Self, CollisionError> {
        if !(bin > 0.0) {
            return Err(CollisionError::NonPositive("bin duration", bin));
        }
        Ok(FluorescenceTrace { bin, counts })
    }

    pub fn duration(&self) -> f64 {
        self.counts.len() as f64 * self.bin
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "bin_index,counts")?;
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(out, "{i},{c}")?;
        }
        Ok(())
    }

    /// Reads `bin_index,counts` rows; indices must be consecutive from 0.
    pub fn read_csv<R: BufRead>(input: R, bin: f64) -> Result<Self, CollisionError> {
        let mut counts = Vec::new();
        for (k, line) in input.lines().enumerate() {
            let line = line.map_err(|e| CollisionError::Parse { line: k + 1, message: e.to_string() })?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || (k == 0 && line.starts_with("bin_index")) {
                continue;
            }
            let bad = |m: &str| CollisionError::Parse { line: k + 1, message: m.to_string() };
            let (i, c) = line.split_once(',').ok_or_else(|| bad("expected bin_index,counts"))?;
            let i: usize = i.trim().parse().map_err(|_| bad("bad bin index"))?;
            let c: u32 = c.trim().parse().map_err(|_| bad("bad count"))?;
            if i != counts.len() {
                return Err(bad("bin indices must be consecutive from 0"));
            }
            counts.push(c);
        }
        if counts.is_empty() {
            return Err(CollisionError::EmptyTrace);
        }
        FluorescenceTrace::new(bin, counts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceParams {
    pub bin: f64,
    /// Count rates while fluorescing / dark, s⁻¹.
    pub bright_rate: f64,
    pub dark_rate: f64,
    /// Mean spacing between events of each class, s.
    pub shelved_spacing: f64,
    pub short_spacing: f64,
    pub tau_d52: f64,
    /// SHORT durations are `short_min` + Exponential(`short_scale`).
    pub short_min: f64,
    pub short_scale: f64,
    pub ion_lifetime: f64,
    pub duration: f64,
}

impl Default for TraceParams {
    fn default() -> Self {
        TraceParams {
            bin: constants::TRACE_BIN,
            bright_rate: 30e3,
            dark_rate: 500.0,
            shelved_spacing: constants::SHELVED_EVENT_SPACING,
            short_spacing: constants::SHORT_EVENT_SPACING,
            tau_d52: constants::TAU_D52,
            short_min: 2.0 * constants::TRACE_BIN,
            short_scale: 2e-3,
            ion_lifetime: constants::ION_LIFETIME,
            duration: constants::COLLISION_RECORD_DURATION,
        }
    }
}

impl TraceParams {
    pub fn validate(&self) -> Result<(), CollisionError> {
        let pos = [
            ("bin duration", self.bin),
            ("bright rate", self.bright_rate),
            ("shelved spacing", self.shelved_spacing),
            ("short spacing", self.short_spacing),
            ("tau_d52", self.tau_d52),
            ("short scale", self.short_scale),
            ("ion lifetime", self.ion_lifetime),
            ("duration", self.duration),
        ];
        for (name, v) in pos {
            if !(v > 0.0) {
                return Err(CollisionError::NonPositive(name, v));
            }
        }
        if !(self.dark_rate >= 0.0) || !(self.dark_rate < self.bright_rate) {
            return Err(CollisionError::NonPositive("bright − dark rate", self.bright_rate - self.dark_rate));
        }
        if !(self.short_min >= 0.0) {
            return Err(CollisionError::NonPositive("short minimum", self.short_min));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedTrace {
    pub trace: FluorescenceTrace,
    pub events: Vec<DarkEvent>,
    /// Ion-loss instants; a new ion is loaded immediately.
    pub losses: Vec<f64>,
}

/// Infinite spacing (rate 0) disables a class.
fn exp_or_never<R: Rng + ?Sized>(rng: &mut R, spacing: f64) -> f64 {
    if spacing.is_finite() {
        Exp::new(1.0 / spacing).expect("positive rate").sample(rng)
    } else {
        f64::INFINITY
    }
}

pub fn simulate_trace<R: Rng + ?Sized>(rng: &mut R, p: &TraceParams) -> Result<SimulatedTrace, CollisionError> {
    p.validate()?;
    let rate = |s: f64| if s.is_finite() { 1.0 / s } else { 0.0 };
    let (r_shelved, r_short) = (rate(p.shelved_spacing), rate(p.short_spacing));
    let total = r_shelved + r_short;

    let mut events = Vec::new();
    let mut t = 0.0;
    if total > 0.0 {
        let gap = Exp::new(total).expect("positive rate");
        let shelved = Exp::new(1.0 / p.tau_d52).expect("positive");
        let short = Exp::new(1.0 / p.short_scale).expect("positive");
        loop {
            t += gap.sample(rng);
            if t >= p.duration {
                break;
            }
            let (class, d) = if rng.random::<f64>() * total < r_shelved {
                (EventClass::Shelved, shelved.sample(rng))
            } else {
                (EventClass::Short, p.short_min + short.sample(rng))
            };
            events.push(DarkEvent { start: t, duration: d, class });
            t += d;
        }
    }

    let mut losses = Vec::new();
    let mut t = 0.0;
    loop {
        t += exp_or_never(rng, p.ion_lifetime);
        if t >= p.duration {
            break;
        }
        losses.push(t);
    }

    let n = (p.duration / p.bin).round() as usize;
    let bright = p.bright_rate * p.bin;
    let dark = p.dark_rate * p.bin;
    let pb = Poisson::new(bright + dark).expect("finite mean");
    let mut counts = Vec::with_capacity(n);
    let mut next = 0;
    for k in 0..n {
        let (a, b) = (k as f64 * p.bin, (k + 1) as f64 * p.bin);
        while next < events.len() && events[next].start + events[next].duration <= a {
            next += 1;
        }
        let mut dark_time = 0.0;
        let mut j = next;
        while j < events.len() && events[j].start < b {
            let e = &events[j];
            dark_time += (e.start + e.duration).min(b) - e.start.max(a);
            j += 1;
        }
        let c = if dark_time <= 0.0 {
            pb.sample(rng)
        } else {
            let mean = bright * (1.0 - dark_time / p.bin).max(0.0) + dark;
            if mean > 0.0 {
                Poisson::new(mean).expect("finite mean").sample(rng)
            } else {
                0.0
            }
        };
        counts.push(c as u32);
    }
    Ok(SimulatedTrace { trace: FluorescenceTrace::new(p.bin, counts)?, events, losses })
}

/// P(X ≤ k) for X ~ Poisson(μ), by direct summation (underflows to 0 for μ ≳ 700).
fn poisson_cdf(k: i64, mu: f64) -> f64 {
    if k < 0 {
        return 0.0;
    }
    let mut term = (-mu).exp();
    let mut sum = term;
    for i in 1..=k {
        term *= mu / i as f64;
        sum += term;
    }
    sum.min(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub events: Vec<DarkEvent>,
    /// Bins with counts strictly below this are dark.
    pub threshold: f64,
    /// Per-bin probability of misclassifying a bright or dark bin.
    pub misclassification: f64,
    pub warning: Option<String>,
}

/// Midpoint of the bright and dark Poisson means per bin.
pub fn midpoint_threshold(bright_rate: f64, dark_rate: f64, bin: f64) -> f64 {
    0.5 * (bright_rate + dark_rate) * bin
}

pub fn detect_events(trace: &FluorescenceTrace, threshold: f64, bright_rate: f64, dark_rate: f64) -> Detection {
    let mut events = Vec::new();
    let mut run: Option<usize> = None;
    for (k, &c) in trace.counts.iter().enumerate() {
        let is_dark = (c as f64) < threshold;
        match (is_dark, run) {
            (true, None) => run = Some(k),
            (false, Some(s)) => {
                events.push(DarkEvent { start: s as f64 * trace.bin, duration: (k - s) as f64 * trace.bin, class: EventClass::Unknown });
                run = None;
            }
            _ => {}
        }
    }
    if let Some(s) = run {
        let k = trace.counts.len();
        events.push(DarkEvent { start: s as f64 * trace.bin, duration: (k - s) as f64 * trace.bin, class: EventClass::Unknown });
    }
    let kth = threshold.ceil() as i64 - 1;
    let p_bright_low = poisson_cdf(kth, bright_rate * trace.bin);
    let p_dark_high = 1.0 - poisson_cdf(kth, dark_rate * trace.bin);
    let misclassification = p_bright_low.max(p_dark_high);
    let warning = (misclassification > 1e-6).then(|| {
        format!("bright and dark count distributions overlap: per-bin misclassification probability {misclassification:.2e}")
    });
    Detection { events, threshold, misclassification, warning }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub width: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(events: &[DarkEvent], width: f64) -> Self {
        let mut counts = Vec::new();
        for e in events {
            let k = (e.duration / width).floor() as usize;
            if counts.len() <= k {
                counts.resize(k + 1, 0);
            }
            counts[k] += 1;
        }
        Histogram { width, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "duration_bin_s,events")?;
        for (k, c) in self.counts.iter().enumerate() {
            writeln!(out, "{},{}", k as f64 * self.width, c)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitOptions {
    pub width: f64,
    pub tau: f64,
    pub exclude_first: bool,
    /// Weight bins by 1/max(n, 1) instead of uniformly.
    pub poisson_weights: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        // 160 ms bins put the expected first-bin amplitude of ~86 SHELVED
        // events at ~29.
        FitOptions { width: 0.16, tau: constants::TAU_D52, exclude_first: true, poisson_weights: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramFit {
    /// Fitted curve value on the first bin.
    pub amplitude: f64,
    pub amplitude_error: f64,
    pub shelved_fraction: f64,
    pub short_fraction: f64,
    pub total: u64,
}

/// Least squares of n_k ≈ A·exp(−k·w/τ) with τ fixed.
pub fn fit_histogram(events: &[DarkEvent], opts: &FitOptions) -> Result<(HistogramFit, Histogram), CollisionError> {
    if !(opts.width > 0.0) {
        return Err(CollisionError::NonPositive("histogram bin width", opts.width));
    }
    if !(opts.tau > 0.0) {
        return Err(CollisionError::NonPositive("tau", opts.tau));
    }
    let h = Histogram::new(events, opts.width);
    let first = usize::from(opts.exclude_first);
    let used: Vec<(f64, f64)> = h
        .counts
        .iter()
        .enumerate()
        .skip(first)
        .map(|(k, &n)| ((-(k as f64) * opts.width / opts.tau).exp(), n as f64))
        .collect();
    let nonempty = used.iter().filter(|(_, n)| *n > 0.0).count();
    if nonempty < 2 {
        return Err(CollisionError::FitDegenerate(format!("{nonempty} non-empty bins in the fitted tail")));
    }
    let w = |n: f64| if opts.poisson_weights { 1.0 / n.max(1.0) } else { 1.0 };
    let sxx: f64 = used.iter().map(|&(x, n)| w(n) * x * x).sum();
    let sxy: f64 = used.iter().map(|&(x, n)| w(n) * x * n).sum();
    let a = sxy / sxx;
    let dof = (used.len() as f64 - 1.0).max(1.0);
    let rss: f64 = used.iter().map(|&(x, n)| w(n) * (n - a * x).powi(2)).sum();
    let amplitude_error = (rss / dof / sxx).sqrt();
    let total = h.total();
    let mass = a / (1.0 - (-opts.width / opts.tau).exp());
    let short = h.counts[0] as f64 - a;
    let fit = HistogramFit {
        amplitude: a,
        amplitude_error,
        shelved_fraction: mass / total as f64,
        short_fraction: short / total as f64,
        total,
    };
    Ok((fit, h))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LifetimeStats {
    pub losses: usize,
    pub mean_lifetime: f64,
    pub ks_statistic: f64,
    pub p_value: f64,
}

fn ks_exponential(times: &[f64], mean: f64, scratch: &mut Vec<f64>) -> f64 {
    scratch.clear();
    let mut prev = 0.0;
    for &t in times {
        scratch.push(t - prev);
        prev = t;
    }
    scratch.sort_by(f64::total_cmp);
    let n = scratch.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in scratch.iter().enumerate() {
        let f = 1.0 - (-x / mean).exp();
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    d
}

pub const KS_REPLICAS: usize = 1999;

/// Mean lifetime T/n and a Kolmogorov–Smirnov test of the inter-loss
/// intervals against Exponential(T/n).
///
/// Because the mean is estimated, the p-value is computed by Monte Carlo
/// conditional on n: under the Poisson hypothesis the n loss instants are
/// uniform order statistics on [0, T].
pub fn trap_lifetime_stats(losses: &[f64], observation: f64) -> Result<LifetimeStats, CollisionError> {
    if losses.len() < 2 {
        return Err(CollisionError::InsufficientLosses(losses.len()));
    }
    if !(observation > 0.0) {
        return Err(CollisionError::NonPositive("observation time", observation));
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mean = observation / n as f64;
    let mut scratch = Vec::with_capacity(n);
    let d = ks_exponential(&sorted, mean, &mut scratch);

    let mut rng = ChaCha8Rng::seed_from_u64(n as u64 ^ observation.to_bits());
    let mut sim = vec![0.0; n];
    let mut exceed = 0;
    for _ in 0..KS_REPLICAS {
        for s in sim.iter_mut() {
            *s = rng.random::<f64>() * observation;
        }
        sim.sort_by(f64::total_cmp);
        if ks_exponential(&sim, mean, &mut scratch) >= d {
            exceed += 1;
        }
    }
    Ok(LifetimeStats {
        losses: n,
        mean_lifetime: mean,
        ks_statistic: d,
        p_value: (exceed + 1) as f64 / (KS_REPLICAS + 1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(n: usize, c: u32) -> FluorescenceTrace {
        FluorescenceTrace::new(5e-3, vec![c; n]).unwrap()
    }

    #[test]
    fn all_bright_has_no_events() {
        let d = detect_events(&flat(1000, 150), 76.0, 30e3, 500.0);
        assert!(d.events.is_empty());
        assert!(d.warning.is_none());
    }

    #[test]
    fn injected_window() {
        let mut t = flat(1000, 150);
        for c in &mut t.counts[200..280] {
            *c = 2;
        }
        let d = detect_events(&t, 76.0, 30e3, 500.0);
        assert_eq!(d.events.len(), 1);
        assert!((d.events[0].duration - 0.4).abs() <= 5e-3);
        assert!((d.events[0].start - 1.0).abs() < 1e-12);
    }

    #[test]
    fn overlapping_rates_warn() {
        let d = detect_events(&flat(10, 5), 4.0, 1000.0, 600.0);
        assert!(d.warning.is_some());
        assert!(d.misclassification > 0.1);
    }

    #[test]
    fn separate_runs_are_not_merged() {
        let mut t = flat(100, 150);
        t.counts[10] = 0;
        t.counts[11] = 0;
        t.counts[13] = 0;
        let d = detect_events(&t, 76.0, 30e3, 500.0);
        assert_eq!(d.events.len(), 2);
    }

    #[test]
    fn histogram_conserves_events() {
        let ev: Vec<DarkEvent> = (0..57).map(|k| DarkEvent { start: 0.0, duration: k as f64 * 0.037, class: EventClass::Unknown }).collect();
        for w in [0.01, 0.16, 1.0, 5.0] {
            assert_eq!(Histogram::new(&ev, w).total(), 57);
        }
    }

    #[test]
    fn degenerate_tail() {
        let ev = vec![DarkEvent { start: 0.0, duration: 0.01, class: EventClass::Unknown }; 10];
        assert!(matches!(fit_histogram(&ev, &FitOptions::default()), Err(CollisionError::FitDegenerate(_))));
    }

    #[test]
    fn exact_exponential_histogram() {
        let o = FitOptions::default();
        let r = (-o.width / o.tau).exp();
        let mut ev = Vec::new();
        for k in 0..12 {
            let n = (1000.0 * r.powi(k)).round() as usize;
            ev.extend(std::iter::repeat_n(DarkEvent { start: 0.0, duration: (k as f64 + 0.5) * o.width, class: EventClass::Shelved }, n));
        }
        let (fit, _) = fit_histogram(&ev, &o).unwrap();
        assert!((fit.amplitude - 1000.0).abs() < 1.0);
        assert!(fit.short_fraction.abs() < 2e-3);
    }

    #[test]
    fn insufficient_losses() {
        assert_eq!(trap_lifetime_stats(&[10.0], 100.0), Err(CollisionError::InsufficientLosses(1)));
    }

    #[test]
    fn csv_round_trip() {
        let t = FluorescenceTrace::new(5e-3, vec![3, 150, 0, 7]).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(FluorescenceTrace::read_csv(&buf[..], 5e-3).unwrap(), t);
        assert!(matches!(FluorescenceTrace::read_csv("0,1\n2,3\n".as_bytes(), 5e-3), Err(CollisionError::Parse { line: 2, .. })));
        assert_eq!(FluorescenceTrace::read_csv("bin_index,counts\n".as_bytes(), 5e-3), Err(CollisionError::EmptyTrace));
    }
}
