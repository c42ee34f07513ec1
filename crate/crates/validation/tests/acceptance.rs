//! Acceptance gates. Each criterion prints one `criterion N: PASS|FAIL` line;
//! the process exits nonzero if any selected criterion fails.
//!
//! Positional arguments select criteria by number; no arguments runs all.

use std::time::Instant;

use dope_core::baselines::{dorfman_run, DorfmanConfig};
use dope_core::design::{estimate_mi, exact_mi};
use dope_core::dope::DecisionInterval;
use dope_core::harness::{
    dominates, emit_tables, run_scenario, DominanceMetric, DopeStrategy, MetricsRow, ScenarioConfig, StrategyConfig,
};
use dope_core::model::*;
use dope_core::posterior::{draw_posterior, exact_posterior, gibbs_run, posterior_marginals, GibbsConfig};
use dope_core::rng::stream;
use dope_service::api::{ApiError, SessionConfig, SubmitRequest};
use dope_service::Store;
use rand::Rng;

/// Tolerances, pinned.
const LIKELIHOOD_ULPS: u64 = 2;
const NORMALIZATION_TOL: f64 = 1e-10;
const MI_ABS_TOL: f64 = 0.01;
const MI_HALVING: (f64, f64) = (0.25, 0.75);
const MI_REPLICATES: usize = 30;
const GIBBS_TOL: f64 = 0.02;
const SIGMAS: f64 = 3.0;
const FPR_CEILING: f64 = 0.015;
const DOMINANCE_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const DOMINANCE_REQUIRED: usize = 4;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn ulps_apart(a: f64, b: f64) -> u64 {
    (a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs()
}

fn random_sizes<R: Rng>(rng: &mut R, n: usize, max_cluster: usize) -> Vec<usize> {
    let mut sizes = Vec::new();
    let mut left = n;
    while left > 0 {
        let s = rng.random_range(1..=left.min(max_cluster));
        sizes.push(s);
        left -= s;
    }
    sizes
}

fn criterion_1() -> Verdict {
    let pool = Design::from_lists(&[vec![0, 1, 2, 3]]).unwrap();
    let theta = InfectionState::new(vec![true, false, false, true]);
    let err = TestErrorParams::new(0.2, 0.01).unwrap();
    let p = design_log_likelihood(&pool, &err, &theta, &TestData::new(vec![false])).unwrap().exp();
    let direct = err.negative_probability(2);
    let target = 0.0396;
    let pass = ulps_apart(p, target) <= LIKELIHOOD_ULPS && ulps_apart(direct, target) <= LIKELIHOOD_ULPS;
    Verdict::new(pass, format!("Pr(negative) = {p:.17} (direct {direct:.17}), target {target}"))
}

fn criterion_2() -> Verdict {
    let mut rng = stream(20, &[2]);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(1..=12);
        let spec = PopulationSpec::from_sizes(&random_sizes(&mut rng, n, 5)).unwrap();
        let prior = PriorParams::new(rng.random(), rng.random(), rng.random()).unwrap();
        let err = TestErrorParams::new(rng.random(), rng.random()).unwrap();
        let k = rng.random_range(1..=8);
        let lists: Vec<Vec<usize>> = (0..k)
            .map(|_| {
                let size = rng.random_range(1..=n);
                rand::seq::index::sample(&mut rng, n, size).into_vec()
            })
            .collect();
        let design = Design::from_lists(&lists).unwrap();
        let mut prior_total = 0.0;
        for m in 0..1u64 << n {
            let state = InfectionState::from_mask(m, n);
            prior_total += prior_log_prob(&spec, &prior, &state).unwrap().exp();
            let lik_total: f64 = (0..1u64 << k)
                .map(|d| design_log_likelihood(&design, &err, &state, &TestData::from_mask(d, k)).unwrap().exp())
                .sum();
            worst = worst.max((lik_total - 1.0).abs());
        }
        worst = worst.max((prior_total - 1.0).abs());
    }
    Verdict::new(worst <= NORMALIZATION_TOL, format!("max |sum - 1| = {worst:.3e} over 20 instances"))
}

/// Mutual information of a single pool over one cluster, by enumeration.
fn single_pool_mi(prior: &PriorParams, err: &TestErrorParams, n: usize) -> f64 {
    let h = |p: f64| if p <= 0.0 || p >= 1.0 { 0.0 } else { -p * p.ln() - (1.0 - p) * (1.0 - p).ln() };
    let (mut p_neg, mut conditional) = (0.0, 0.0);
    for m in 0..1u32 << n {
        let primary = m & 1 == 1;
        let q = if primary { prior.p_secondary } else { prior.p_basal };
        let mut w = if primary { prior.p_primary } else { 1.0 - prior.p_primary };
        for i in 1..n {
            w *= if m >> i & 1 == 1 { q } else { 1.0 - q };
        }
        let neg = (1.0 - err.p_false_positive) * err.p_false_negative.powi(m.count_ones() as i32);
        p_neg += w * neg;
        conditional += w * h(neg);
    }
    h(p_neg) - conditional
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn criterion_3() -> Verdict {
    let spec = PopulationSpec::from_sizes(&[3]).unwrap();
    let prior = PriorParams::new(0.2, 0.2, 0.01).unwrap();
    let err = TestErrorParams::new(0.2, 0.01).unwrap();
    let design = Design::from_lists(&[vec![0, 1, 2]]).unwrap();
    let exact = single_pool_mi(&prior, &err, 3);
    let table = exact_posterior(&spec, &prior, &err, &Design::empty(), &TestData::empty()).unwrap();
    let library_exact = exact_mi(&design, &table, &err).unwrap();
    let sizes = [2500usize, 5000, 10_000, 20_000];
    let mut medians = Vec::new();
    let mut abs_at_largest = Vec::new();
    for (li, &l) in sizes.iter().enumerate() {
        let mut signed: Vec<f64> = (0..MI_REPLICATES as u64)
            .map(|rep| {
                let cfg = GibbsConfig { n_samples: l, seed: stream(3, &[li as u64, rep]).random(), ..Default::default() };
                let samples = draw_posterior(&cfg, &Design::empty(), &TestData::empty(), &spec, &prior, &err).unwrap();
                estimate_mi(&design, &samples, &err, &mut stream(3, &[9, li as u64, rep])).unwrap().value - exact
            })
            .collect();
        if l == 20_000 {
            abs_at_largest = signed.iter().map(|e| e.abs()).collect();
        }
        medians.push(median(&mut signed));
    }
    let max_abs = abs_at_largest.iter().cloned().fold(0.0, f64::max);
    let median_abs = median(&mut abs_at_largest);
    let ratios: Vec<f64> = medians.windows(2).map(|w| w[1] / w[0]).collect();
    let halving = ratios.iter().all(|r| (MI_HALVING.0..=MI_HALVING.1).contains(r));
    let oracle_agrees = (library_exact - exact).abs() < 1e-12;
    Verdict::new(
        oracle_agrees && max_abs <= MI_ABS_TOL && halving,
        format!(
            "exact {exact:.6}; L=20000 max |err| {max_abs:.4} (median {median_abs:.4}); median signed err {:?}; doubling ratios {:?} (need {:?})",
            medians.iter().map(|m| format!("{m:+.5}")).collect::<Vec<_>>(),
            ratios.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>(),
            MI_HALVING
        ),
    )
}

fn criterion_4() -> Verdict {
    let mut rng = stream(40, &[]);
    let mut worst: f64 = 0.0;
    for instance in 0..10u64 {
        let spec = PopulationSpec::from_sizes(&random_sizes(&mut rng, 10, 5)).unwrap();
        let prior = PriorParams::new(rng.random_range(0.05..0.5), rng.random_range(0.05..0.5), rng.random_range(0.0..0.1)).unwrap();
        let err = TestErrorParams::new(rng.random_range(0.05..0.3), rng.random_range(0.0..0.05)).unwrap();
        let lists: Vec<Vec<usize>> = (0..3)
            .map(|_| {
                let size = rng.random_range(1..=10);
                rand::seq::index::sample(&mut rng, 10, size).into_vec()
            })
            .collect();
        let design = Design::from_lists(&lists).unwrap();
        let truth = sample_state(&spec, &prior, &mut rng);
        let data = sample_data(&design, &err, &truth, &mut rng);
        let exact = exact_posterior(&spec, &prior, &err, &design, &data).unwrap().marginals();
        let cfg = GibbsConfig { n_samples: 12_000, seed: instance, ..Default::default() };
        let est = posterior_marginals(&gibbs_run(&cfg, &design, &data, &spec, &prior, &err).unwrap());
        worst = exact.iter().zip(&est).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    Verdict::new(worst <= GIBBS_TOL, format!("max |marginal error| = {worst:.4} over 10 instances"))
}

fn desk_model() -> (PopulationSpec, PriorParams) {
    (PopulationSpec::from_sizes(&[2, 3, 5]).unwrap(), PriorParams::new(0.2, 0.2, 0.01).unwrap())
}

fn criterion_5() -> Verdict {
    let (spec, prior) = desk_model();
    let cfg = ScenarioConfig {
        spec,
        prior,
        err: TestErrorParams::perfect(),
        n_populations: 50,
        strategies: vec![StrategyConfig::Dope(DopeStrategy::new(1))],
        interval_grid: vec![DecisionInterval::new(0.01, 0.99).unwrap()],
        mc_samples: 12_000,
        seed: 5,
        workers: None,
    };
    let row = &run_scenario(&cfg).unwrap()[0];
    let errors = (row.fnr * row.n_infected as f64).round() + (row.fpr * row.n_healthy as f64).round();
    Verdict::new(
        errors == 0.0 && row.truncated_runs == 0,
        format!("{errors} misclassifications, {} truncated runs, mean tests {:.2}", row.truncated_runs, row.mean_tests),
    )
}

fn criterion_6() -> Verdict {
    let (n, s, p, reps) = (32usize, 8usize, 0.02, 10_000usize);
    let cfg = DorfmanConfig::new(s).unwrap();
    let mut rng = stream(6, &[]);
    let per_person: Vec<f64> = (0..reps)
        .map(|_| {
            let truth = InfectionState::new((0..n).map(|_| rng.random::<f64>() < p).collect());
            dorfman_run(&truth, &TestErrorParams::perfect(), &cfg, &mut rng).unwrap().tests_used as f64 / n as f64
        })
        .collect();
    let mean = per_person.iter().sum::<f64>() / reps as f64;
    let sd = (per_person.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
    let se = sd / (reps as f64).sqrt();
    let expected = 1.0 / s as f64 + (1.0 - (1.0 - p).powi(s as i32));
    Verdict::new(
        (mean - expected).abs() <= SIGMAS * se,
        format!("tests/person {mean:.5}, closed form {expected:.5}, se {se:.5}"),
    )
}

fn desk_campaigns() -> Vec<(u64, Vec<MetricsRow>)> {
    DOMINANCE_SEEDS
        .iter()
        .map(|&seed| {
            let started = Instant::now();
            let cfg = ScenarioConfig { seed, ..ScenarioConfig::desk_default() };
            let rows = run_scenario(&cfg).unwrap();
            let dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("desk-campaign-seed-{seed}"));
            emit_tables(&rows, &dir).unwrap();
            println!("  desk campaign seed {seed}: {} rows in {:.0?}, tables in {}", rows.len(), started.elapsed(), dir.display());
            (seed, rows)
        })
        .collect()
}

fn dominated_by_dope(rows: &[MetricsRow], baseline: &str) -> usize {
    let Some(b) = rows.iter().find(|r| r.strategy == baseline) else {
        return 0;
    };
    rows.iter().filter(|r| r.is_dope() && dominates(r, b, DominanceMetric::Fnr)).count()
}

fn criterion_7(campaigns: &[(u64, Vec<MetricsRow>)]) -> Verdict {
    let mut held = 0;
    let mut notes = Vec::new();
    for (seed, rows) in campaigns {
        let (d, r) = (dominated_by_dope(rows, "dorfman-5"), dominated_by_dope(rows, "recursive-5"));
        held += (d > 0 && r > 0) as usize;
        notes.push(format!("seed {seed}: {d} vs dorfman-5, {r} vs recursive-5"));
    }
    Verdict::new(
        held >= DOMINANCE_REQUIRED,
        format!("dominance held in {held}/{} seeds ({})", campaigns.len(), notes.join("; ")),
    )
}

fn criterion_8(campaigns: &[(u64, Vec<MetricsRow>)]) -> Verdict {
    let mut violations = Vec::new();
    let mut worst: Option<(f64, String)> = None;
    let mut worst_baseline: f64 = 0.0;
    for (seed, rows) in campaigns {
        for r in rows {
            let slack = r.fpr - (FPR_CEILING + SIGMAS * r.fpr_se);
            if worst.as_ref().is_none_or(|w| slack > w.0) {
                worst = Some((slack, format!("seed {seed} {} fpr {:.4} se {:.4}", r.label(), r.fpr, r.fpr_se)));
            }
            if !r.is_dope() {
                worst_baseline = worst_baseline.max(r.fpr);
            }
            if slack > 0.0 {
                violations.push(format!("seed {seed} {}", r.label()));
            }
        }
    }
    let (_, worst) = worst.unwrap_or_default();
    Verdict::new(
        violations.is_empty(),
        format!(
            "{} rows over the bound; worst: {worst}; max baseline fpr {worst_baseline:.4}{}",
            violations.len(),
            if violations.is_empty() { String::new() } else { format!("; over: {}", violations.join(", ")) }
        ),
    )
}

fn criterion_9() -> Verdict {
    let (spec, _) = desk_model();
    let grid = [0.05, 0.2, 0.4];
    let reps = 20_000;
    let mut worst_z: f64 = 0.0;
    let mut pass = true;
    let mut rng = stream(9, &[]);
    for &pp in &grid {
        for &ps in &grid {
            let prior = PriorParams::new(pp, ps, 0.01).unwrap();
            let fractions: Vec<f64> = (0..reps)
                .map(|_| sample_state(&spec, &prior, &mut rng).infected_count() as f64 / spec.n_individuals() as f64)
                .collect();
            let mean = fractions.iter().sum::<f64>() / reps as f64;
            let sd = (fractions.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
            let secondary = pp * ps + (1.0 - pp) * 0.01;
            let closed: f64 = [2.0, 3.0, 5.0].iter().map(|s| pp + (s - 1.0) * secondary).sum::<f64>() / 10.0;
            let z = (mean - closed).abs() / (sd / (reps as f64).sqrt());
            worst_z = worst_z.max(z);
            pass &= z <= SIGMAS && (expected_prevalence(&spec, &prior) - closed).abs() < 1e-15;
        }
    }
    Verdict::new(pass, format!("9 grid points, {reps} populations each, max |z| = {worst_z:.2}"))
}

fn service_session(seed: u64) -> SessionConfig {
    serde_json::from_value(serde_json::json!({
        "n_individuals": 5, "clusters": [[0, 1], [2, 3, 4]],
        "p_primary": 0.2, "p_secondary": 0.2, "p_basal": 0.01,
        "p_false_negative": 0.2, "p_false_positive": 0.01,
        "k_pools_per_step": 2, "interval": [0.01, 0.99],
        "mc_samples": 2000, "burn_in": 500, "seed": seed
    }))
    .expect("session payload")
}

fn open_store(dir: &std::path::Path) -> Store {
    let (store, failures) = Store::open(dir).expect("data dir");
    assert!(failures.is_empty(), "{failures:?}");
    store
}

async fn service_checks() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let e = |e: ApiError| format!("{} {}", e.status, e.body.message);
    let (id, before) = {
        let store = open_store(dir.path());
        let mut view = store.create(service_session(10)).await.map_err(e)?;
        for results in [[true, false], [false, false], [true, true]] {
            let Some(pending) = view.pending_design else { break };
            view = store
                .submit(&view.session_id, SubmitRequest { round: pending.round, results: results.to_vec() })
                .await
                .map_err(e)?;
        }
        let id = view.session_id.clone();
        (id.clone(), store.get(&id).map_err(e)?)
    };
    let after = open_store(dir.path()).get(&id).map_err(e)?;
    let bits = |m: &[f64]| m.iter().map(|p| p.to_bits()).collect::<Vec<_>>();
    if bits(&before.marginals) != bits(&after.marginals) || before != after {
        return Err(format!("replay differs: {:?} vs {:?}", before.marginals, after.marginals));
    }

    let store = std::sync::Arc::new(open_store(dir.path()));
    let view = store.create(service_session(11)).await.map_err(e)?;
    let request = SubmitRequest { round: 1, results: vec![true, false] };
    let (a, b) = tokio::join!(
        tokio::spawn({
            let (store, id, r) = (store.clone(), view.session_id.clone(), request.clone());
            async move { store.submit(&id, r).await }
        }),
        tokio::spawn({
            let (store, id, r) = (store.clone(), view.session_id.clone(), request);
            async move { store.submit(&id, r).await }
        })
    );
    let mut codes: Vec<u16> = [a, b]
        .into_iter()
        .map(|r| match r.expect("task") {
            Ok(_) => 200,
            Err(err) => err.status.as_u16(),
        })
        .collect();
    codes.sort();
    if codes != [200, 409] {
        return Err(format!("double submit gave {codes:?}"));
    }
    Ok(format!(
        "replayed {} rounds, {} marginals bit-identical; double submit gave {codes:?}",
        before.round,
        before.marginals.len()
    ))
}

fn criterion_10() -> Verdict {
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().expect("runtime");
    match rt.block_on(service_checks()) {
        Ok(detail) => Verdict::new(true, detail),
        Err(detail) => Verdict::new(false, detail),
    }
}

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| selected.is_empty() || selected.contains(&n);
    let mut failures = 0;
    let mut report = |n: u32, run: &mut dyn FnMut() -> Verdict| {
        if !wanted(n) {
            return;
        }
        let started = Instant::now();
        let v = run();
        failures += !v.pass as usize;
        println!(
            "criterion {n}: {} ({:.1?}) {}",
            if v.pass { "PASS" } else { "FAIL" },
            started.elapsed(),
            v.detail
        );
    };
    report(1, &mut criterion_1);
    report(2, &mut criterion_2);
    report(3, &mut criterion_3);
    report(4, &mut criterion_4);
    report(5, &mut criterion_5);
    report(6, &mut criterion_6);
    if wanted(7) || wanted(8) {
        let campaigns = desk_campaigns();
        report(7, &mut || criterion_7(&campaigns));
        report(8, &mut || criterion_8(&campaigns));
    }
    report(9, &mut criterion_9);
    report(10, &mut criterion_10);
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
