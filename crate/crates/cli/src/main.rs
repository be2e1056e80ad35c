use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use branchfrac::collisions::{
    detect_events, fit_histogram, midpoint_threshold, simulate_trace, trap_lifetime_stats, CollisionError, DarkEvent, FluorescenceTrace,
    HistogramFit, LifetimeStats,
};
use branchfrac::config::{ConfigError, RunConfig};
use branchfrac::estimator::{branching_fraction, branching_fraction_with, parse_counts_csv, parse_counts_json, CountRecord, SigmaModel};
use branchfrac::obe::{fluorescence_spectrum, write_spectrum_csv};
use branchfrac::report::{sha256_hex, BatchReport, EstimateReport};
use branchfrac::sequence::{run_batch, Fidelity, SequenceModel};
use branchfrac::systematics::{compute_budget, ErrorBudget};

const EXIT_CONFIG: u8 = 3;
const EXIT_RUNTIME: u8 = 4;
const EXIT_FIT: u8 = 5;

#[derive(Debug)]
enum Failure {
    Config(String),
    Runtime(String),
    Fit(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Runtime(_) => EXIT_RUNTIME,
            Failure::Fit(_) => EXIT_FIT,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

#[derive(Parser)]
#[command(name = "branchfrac", version, about = "Branching-fraction simulator and analysis for a single trapped Sr+ ion")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; omitted keys take nominal values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FidelityArg {
    Fast,
    Obe,
}

#[derive(Clone, Copy, ValueEnum)]
enum SigmaArg {
    /// Independent Poisson errors in quadrature.
    Quadrature,
    /// Relative errors added linearly (conservative).
    Linear,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo batch through the detection chain; writes report.json.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        cycles: Option<u64>,
        #[arg(long, value_enum)]
        fidelity: Option<FidelityArg>,
    },
    /// Estimate p, BR and efficiency from a counts CSV or a batch report.
    Estimate {
        input: PathBuf,
        /// budget.json from `budget`, for total uncertainties.
        #[arg(long)]
        budget: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "quadrature")]
        sigma_model: SigmaArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Systematic error budget; writes budget.csv and budget.json.
    Budget {
        #[command(flatten)]
        common: Common,
    },
    /// Dark-event histogram fit and trap-lifetime statistics.
    Collisions {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// Analyse a recorded trace (bin_index,counts) instead of simulating.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Number of simulated records to pool.
        #[arg(long, default_value_t = 1)]
        traces: u64,
        /// Also write the simulated trace(s) as CSV.
        #[arg(long)]
        export_trace: bool,
    },
    /// Steady-state fluorescence versus blue detuning; writes spectrum.csv.
    Spectrum {
        #[command(flatten)]
        common: Common,
        #[arg(long, allow_hyphen_values = true)]
        start_mhz: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        stop_mhz: Option<f64>,
        #[arg(long)]
        points: Option<usize>,
    },
}

fn load(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf, Failure> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    let p = dir.join(name);
    fs::write(&p, bytes).map_err(|e| runtime(format!("{}: {e}", p.display())))?;
    eprintln!("wrote {} (sha256 {})", p.display(), &sha256_hex(bytes)[..16]);
    Ok(p)
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

fn simulate(common: &Common, seed: Option<u64>, cycles: Option<u64>, fidelity: Option<FidelityArg>) -> Result<(), Failure> {
    let mut cfg = load(common)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = cycles {
        cfg.cycles = n;
    }
    if let Some(f) = fidelity {
        cfg.fidelity = match f {
            FidelityArg::Fast => Fidelity::Fast,
            FidelityArg::Obe => Fidelity::Obe,
        };
    }
    cfg.validate()?;
    let model = SequenceModel::new(cfg.setup()?, cfg.chronogram()?, cfg.fidelity).map_err(runtime)?;
    let result = run_batch(&model, &cfg.detector()?, cfg.seed, cfg.cycles, &cfg.batch_options()).map_err(runtime)?;
    let report = BatchReport::new(&result, cfg.seed, &cfg.params_hash(), cfg.fidelity);
    write(&cfg.output_dir, "config.toml", cfg.to_toml().as_bytes())?;
    write(&cfg.output_dir, "report.json", report.to_json().as_bytes())?;
    match branching_fraction(&report.record()) {
        Ok(e) => println!("cycles {}  N_b {}  N_r {}  N_b_B {}  N_r_B {}  p = {:.6} ± {:.1e}", report.cycles, report.n_b, report.n_r, report.n_b_bg, report.n_r_bg, e.p, e.sigma_stat),
        Err(e) => println!("cycles {}  N_b {}  N_r {}  ({e})", report.cycles, report.n_b, report.n_r),
    }
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<CountRecord>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let parsed = if text.trim_start().starts_with('{') { parse_counts_json(&text).map(|r| vec![r]) } else { parse_counts_csv(&text) };
    parsed.map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn estimate(input: &Path, budget: Option<&Path>, model: SigmaModel, out: Option<&Path>) -> Result<(), Failure> {
    let records = read_records(input)?;
    let budget: Option<ErrorBudget> = match budget {
        Some(p) => {
            let t = fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            Some(serde_json::from_str(&t).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let mut reports = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        let est = branching_fraction_with(rec, model).map_err(runtime)?;
        let r = EstimateReport::new(rec, &est, budget.as_ref()).map_err(runtime)?;
        if records.len() > 1 {
            println!("record {}", i + 1);
        }
        print!("{}", r.text());
        reports.push(r);
    }
    if let Some(dir) = out {
        write(dir, "estimate.json", &json(&reports))?;
    }
    Ok(())
}

fn budget(common: &Common) -> Result<(), Failure> {
    let cfg = load(common)?;
    let b = compute_budget(&cfg.chronogram()?, &cfg.setup()?, &cfg.budget_inputs()).map_err(runtime)?;
    print!("{}", b.table());
    let mut csv = Vec::new();
    b.write_csv(&mut csv).map_err(runtime)?;
    write(&cfg.output_dir, "budget.csv", &csv)?;
    write(&cfg.output_dir, "budget.json", &json(&b))?;
    Ok(())
}

#[derive(Serialize)]
struct CollisionReport {
    seed: Option<u64>,
    params_hash: String,
    traces: u64,
    observation_s: f64,
    threshold_counts: f64,
    misclassification: f64,
    detected_events: usize,
    true_events: Option<usize>,
    fit: HistogramFit,
    lifetime: Option<LifetimeStats>,
    notes: Vec<String>,
}

fn fit_failure(e: CollisionError) -> Failure {
    match e {
        CollisionError::FitDegenerate(_) => Failure::Fit(e.to_string()),
        other => runtime(other),
    }
}

fn events_csv(events: &[DarkEvent]) -> Vec<u8> {
    let mut s = String::from("start_s,duration_s\n");
    for e in events {
        s += &format!("{},{}\n", e.start, e.duration);
    }
    s.into_bytes()
}

fn collisions(common: &Common, seed: Option<u64>, trace: Option<&Path>, traces: u64, export: bool) -> Result<(), Failure> {
    let mut cfg = load(common)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let c = &cfg.collisions;
    let params = c.trace_params();
    let threshold = c.threshold_counts.unwrap_or_else(|| midpoint_threshold(params.bright_rate, params.dark_rate, params.bin));
    let mut notes = vec!["SHORT-event durations follow a modelling choice (minimum plus exponential); the SHORT fraction is model-dependent".to_string()];

    let (events, losses, observation, true_events, misclassification) = if let Some(path) = trace {
        let f = fs::File::open(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        let t = FluorescenceTrace::read_csv(std::io::BufReader::new(f), params.bin).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        let d = detect_events(&t, threshold, params.bright_rate, params.dark_rate);
        if let Some(w) = &d.warning {
            eprintln!("warning: {w}");
            notes.push(w.clone());
        }
        (d.events, None, t.duration(), None, d.misclassification)
    } else {
        if traces == 0 {
            return Err(Failure::Config("--traces must be at least 1".into()));
        }
        let runs: Vec<_> = (0..traces)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(i);
                let s = simulate_trace(&mut rng, &params)?;
                let d = detect_events(&s.trace, threshold, params.bright_rate, params.dark_rate);
                let csv = if export {
                    let mut b = Vec::new();
                    s.trace.write_csv(&mut b).expect("in-memory write");
                    Some(b)
                } else {
                    None
                };
                Ok::<_, CollisionError>((d, s.events.len(), s.losses, csv))
            })
            .collect::<Result<_, _>>()
            .map_err(runtime)?;
        let mut events = Vec::new();
        let mut losses = Vec::new();
        let mut truth = 0;
        let mut mis: f64 = 0.0;
        for (i, (d, n, l, csv)) in runs.into_iter().enumerate() {
            let offset = i as f64 * params.duration;
            events.extend(d.events.iter().map(|e| DarkEvent { start: e.start + offset, ..*e }));
            losses.extend(l.into_iter().map(|t| t + offset));
            truth += n;
            mis = mis.max(d.misclassification);
            if let Some(w) = &d.warning {
                eprintln!("warning: {w}");
            }
            if let Some(b) = csv {
                write(&cfg.output_dir, &format!("trace_{i}.csv"), &b)?;
            }
        }
        (events, Some(losses), traces as f64 * params.duration, Some(truth), mis)
    };

    let (fit, hist) = fit_histogram(&events, &c.fit_options()).map_err(fit_failure)?;
    let lifetime = match &losses {
        Some(l) if l.len() >= 2 => Some(trap_lifetime_stats(l, observation).map_err(runtime)?),
        Some(_) => {
            notes.push("fewer than 2 ion losses: no lifetime statistics".into());
            None
        }
        None => None,
    };
    let report = CollisionReport {
        seed: trace.is_none().then_some(cfg.seed),
        params_hash: cfg.params_hash(),
        traces: if trace.is_some() { 1 } else { traces },
        observation_s: observation,
        threshold_counts: threshold,
        misclassification,
        detected_events: events.len(),
        true_events,
        fit,
        lifetime,
        notes,
    };
    println!(
        "events {}  first-bin amplitude {:.1} ± {:.1}  SHORT {:.1}%  SHELVED {:.1}%",
        report.detected_events,
        report.fit.amplitude,
        report.fit.amplitude_error,
        100.0 * report.fit.short_fraction,
        100.0 * report.fit.shelved_fraction
    );
    if let Some(l) = &report.lifetime {
        println!("ion losses {}  mean lifetime {:.0} s  KS p-value {:.3}", l.losses, l.mean_lifetime, l.p_value);
    }
    let mut h = Vec::new();
    hist.write_csv(&mut h).map_err(runtime)?;
    write(&cfg.output_dir, "histogram.csv", &h)?;
    write(&cfg.output_dir, "events.csv", &events_csv(&events))?;
    write(&cfg.output_dir, "collisions.json", &json(&report))?;
    Ok(())
}

fn spectrum(common: &Common, start: Option<f64>, stop: Option<f64>, points: Option<usize>) -> Result<(), Failure> {
    let mut cfg = load(common)?;
    if let Some(v) = start {
        cfg.spectrum.start_mhz = v;
    }
    if let Some(v) = stop {
        cfg.spectrum.stop_mhz = v;
    }
    if let Some(v) = points {
        cfg.spectrum.points = v;
    }
    let detunings = cfg.spectrum.detunings()?;
    let pts = fluorescence_spectrum(&cfg.setup()?, &detunings).map_err(runtime)?;
    let mut b = Vec::new();
    write_spectrum_csv(&pts, &mut b).map_err(runtime)?;
    write(&cfg.output_dir, "spectrum.csv", &b)?;
    let peak = pts.iter().max_by(|a, b| a.rate.total_cmp(&b.rate)).expect("≥ 2 points");
    println!("{} points, peak {:.3e} photons/s at {:.2} MHz", pts.len(), peak.rate, peak.detuning / (2.0 * std::f64::consts::PI * 1e6));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().expect("first pool initialisation");
    }
    let r = match &cli.command {
        Command::Simulate { common, seed, cycles, fidelity } => simulate(common, *seed, *cycles, *fidelity),
        Command::Estimate { input, budget: b, sigma_model, out } => {
            let model = match sigma_model {
                SigmaArg::Quadrature => SigmaModel::Quadrature,
                SigmaArg::Linear => SigmaModel::LinearRelative,
            };
            estimate(input, b.as_deref(), model, out.as_deref())
        }
        Command::Budget { common } => budget(common),
        Command::Collisions { common, seed, trace, traces, export_trace } => collisions(common, *seed, trace.as_deref(), *traces, *export_trace),
        Command::Spectrum { common, start_mhz, stop_mhz, points } => spectrum(common, *start_mhz, *stop_mhz, *points),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Config(m) | Failure::Runtime(m) | Failure::Fit(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}
