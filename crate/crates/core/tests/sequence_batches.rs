use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use branchfrac::atomic::D_INDICES;
use branchfrac::chronogram::{Chronogram, Counter};
use branchfrac::detection::DetectorModel;
use branchfrac::obe::{expected_counts, Setup};
use branchfrac::sequence::*;

fn model(fidelity: Fidelity) -> SequenceModel {
    SequenceModel::new(Setup::nominal(), Chronogram::reference(), fidelity).unwrap()
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

#[test]
fn degenerate_requests_rejected() {
    let m = model(Fidelity::Fast);
    let det = DetectorModel::nominal();
    assert!(matches!(run_batch(&m, &det, 1, 0, &BatchOptions::default()), Err(SequenceError::NoCycles)));
    let opts = BatchOptions { block_size: 0, ..Default::default() };
    assert!(matches!(run_batch(&m, &det, 1, 10, &opts), Err(SequenceError::BlockSize)));
    let bad = DetectorModel { efficiency: 0.0, ..det };
    assert!(run_batch(&m, &bad, 1, 10, &BatchOptions::default()).is_err());
}

#[test]
fn result_independent_of_thread_count() {
    let m = model(Fidelity::Fast);
    let det = DetectorModel::nominal().with_efficiency(0.05);
    let opts = BatchOptions { block_size: 7_000, flag_probability: 0.01, drop_flagged: false, ..Default::default() };
    let a = in_pool(1, || run_batch(&m, &det, 42, 50_000, &opts).unwrap());
    let b = in_pool(4, || run_batch(&m, &det, 42, 50_000, &opts).unwrap());
    assert_eq!(a, b);
    assert_eq!(a.diagnostics.blocks, 8);
    let c = run_batch(&m, &det, 43, 50_000, &opts).unwrap();
    assert_ne!(a.record, c.record);
}

#[test]
fn obe_tier_means_follow_expected_counts() {
    let m = model(Fidelity::Obe);
    let e = expected_counts(&m.chronogram, &m.setup, None).unwrap();
    let n = 200_000;
    let r = run_batch(&m, &DetectorModel::transparent(), 5, n, &BatchOptions::default()).unwrap();
    for c in Counter::ALL {
        let (mean, se) = r.diagnostics.emitted_mean(c, n);
        let sigma = se.max((e.get(c) / n as f64).sqrt());
        assert!((mean - e.get(c)).abs() < 4.0 * sigma, "{c:?}: {mean} vs {}", e.get(c));
    }
    // transparent detector: detected == emitted
    assert_eq!(r.record.n_b, r.diagnostics.emitted_sum[Counter::Nb.index()]);
}

#[test]
fn end_of_cycle_shelving_matches_density_matrix() {
    let m = model(Fidelity::Fast);
    let e = expected_counts(&m.chronogram, &m.setup, None).unwrap();
    let shelved = e.phases.last().unwrap().exit.populations(&D_INDICES);
    let n = 200_000;
    let r = run_batch(&m, &DetectorModel::transparent(), 8, n, &BatchOptions::default()).unwrap();
    let f = r.diagnostics.final_d32 as f64 / n as f64;
    let sigma = (shelved * (1.0 - shelved) / n as f64).sqrt().max(1.0 / n as f64);
    assert!((f - shelved).abs() < 4.0 * sigma + 2e-5, "{f} vs {shelved}");
    assert_eq!(r.diagnostics.final_d32 + r.diagnostics.final_ground, n);
}

#[test]
fn entry_state_is_forgotten_within_a_cycle() {
    // phases a and b repump whatever the cycle starts in
    let m = model(Fidelity::Fast);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 20_000;
    let mean = |rng: &mut ChaCha8Rng, s: IonState| {
        let xs: Vec<f64> = (0..n).map(|_| run_cycle(rng, &m, s).emitted[Counter::Nb.index()] as f64).collect();
        let mu = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1) as f64;
        (mu, (var / n as f64).sqrt())
    };
    let (a, sa) = mean(&mut rng, IonState::Ground);
    let (b, sb) = mean(&mut rng, IonState::D32);
    assert!((a - b).abs() < 4.0 * sa.hypot(sb), "{a} {b}");
}

#[test]
fn flagged_cycles_are_dropped() {
    let m = model(Fidelity::Fast);
    let det = DetectorModel::nominal();
    let n = 100_000;
    let opts = BatchOptions { flag_probability: 0.02, ..Default::default() };
    let r = run_batch(&m, &det, 3, n, &opts).unwrap();
    let d = &r.diagnostics;
    assert_eq!(d.flagged, d.dropped);
    assert_eq!(r.record.cycles + d.dropped, n);
    let sigma = (n as f64 * 0.02 * 0.98).sqrt();
    assert!((d.dropped as f64 - 2000.0).abs() < 4.0 * sigma);

    // kept but truncated: fewer photons per cycle on average
    let keep = BatchOptions { flag_probability: 0.5, drop_flagged: false, ..Default::default() };
    let t = run_batch(&m, &DetectorModel::transparent(), 3, 20_000, &keep).unwrap();
    let full = run_batch(&m, &DetectorModel::transparent(), 3, 20_000, &BatchOptions::default()).unwrap();
    assert_eq!(t.record.cycles, 20_000);
    assert!(t.record.n_b < full.record.n_b);
}

#[test]
fn unit_branching_never_shelves() {
    let setup = Setup::nominal();
    let s = setup.with_scheme(branchfrac::atomic::LevelScheme::with_limits(1.0, setup.scheme.tau_p, setup.scheme.tau_d32, setup.scheme.tau_d52).unwrap());
    let m = SequenceModel::new(s, Chronogram::reference(), Fidelity::Fast).unwrap();
    let r = run_batch(&m, &DetectorModel::transparent(), 1, 2_000, &BatchOptions::default()).unwrap();
    assert_eq!(r.record.n_r, 0);
    assert_eq!(r.diagnostics.final_d32, 0);
}
