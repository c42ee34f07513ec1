//! Simulation campaigns comparing DOPE with the baseline strategies.
//!
//! Every replicate draws a hidden population state from the prior and runs
//! each configured strategy against it. DOPE is run once per replicate along
//! a trajectory long enough to settle every interval of the grid; the outcome
//! under a given interval is read off that trajectory, since the randomness of
//! round `r` does not depend on the interval.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{Baseline, DorfmanConfig, MatrixConfig, RecursiveConfig};
use crate::config::{config_digest, ModelConfig, ScenarioFile, StrategyEntry};
use crate::design::HillClimbConfig;
use crate::dope::{classify, should_stop, DecisionInterval, DopeConfig, DopeEngine, SimulationExecutor};
use crate::error::{DopeError, Result};
use crate::model::{sample_state, Design, InfectionState, PopulationSpec, PriorParams, TestData, TestErrorParams};
use crate::posterior::{binary_entropy, exact_posterior, GibbsConfig, MAX_EXACT_INDIVIDUALS};
use crate::rng::{derive_seed, stream};

const TRUTH_STREAM: u64 = 1;
const BASELINE_STREAM: u64 = 2;
const DOPE_STREAM: u64 = 3;
const EXECUTOR_STREAM: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DopeStrategy {
    pub k_pools_per_step: usize,
    /// `n_samples` is overridden by the scenario's `mc_samples`.
    pub gibbs: GibbsConfig,
    pub hill_climb: HillClimbConfig,
    pub max_rounds: Option<usize>,
}

impl DopeStrategy {
    pub fn new(k_pools_per_step: usize) -> Self {
        Self {
            k_pools_per_step,
            gibbs: GibbsConfig::default(),
            hill_climb: HillClimbConfig::default(),
            max_rounds: None,
        }
    }

    pub fn id(&self) -> String {
        format!("dope-k{}", self.k_pools_per_step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyConfig {
    Dope(DopeStrategy),
    Baseline(Baseline),
}

impl StrategyConfig {
    pub fn id(&self) -> String {
        match self {
            StrategyConfig::Dope(d) => d.id(),
            StrategyConfig::Baseline(b) => b.id(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub spec: PopulationSpec,
    pub prior: PriorParams,
    pub err: TestErrorParams,
    pub n_populations: usize,
    pub strategies: Vec<StrategyConfig>,
    pub interval_grid: Vec<DecisionInterval>,
    /// Posterior samples per DOPE round.
    pub mc_samples: usize,
    pub seed: u64,
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
}

#[derive(Serialize)]
struct DigestView<'a> {
    model: ModelConfig,
    n_populations: usize,
    strategies: &'a [StrategyConfig],
    interval_grid: &'a [DecisionInterval],
    mc_samples: usize,
}

impl ScenarioConfig {
    /// N = 10 in clusters of 2, 3 and 5 with `Pp = Ps = 0.2`, `Pb = 0.01`,
    /// `Pfn = 0.2`, `Pfp = 0.01`; DOPE with one pool per round against
    /// Dorfman (5), recursive (5), matrix (2x5) and separate testing.
    pub fn desk_default() -> Self {
        Self {
            spec: PopulationSpec::from_sizes(&[2, 3, 5]).expect("valid"),
            prior: PriorParams::new(0.2, 0.2, 0.01).expect("valid"),
            err: TestErrorParams::new(0.2, 0.01).expect("valid"),
            n_populations: 100,
            strategies: vec![
                StrategyConfig::Dope(DopeStrategy::new(1)),
                StrategyConfig::Baseline(Baseline::Dorfman(DorfmanConfig { pool_size: 5 })),
                StrategyConfig::Baseline(Baseline::Recursive(RecursiveConfig { initial_pool_size: 5 })),
                StrategyConfig::Baseline(Baseline::Matrix(MatrixConfig { rows: 2, cols: 5 })),
                StrategyConfig::Baseline(Baseline::Separate),
            ],
            interval_grid: DecisionInterval::default_grid(),
            mc_samples: 12_000,
            seed: 0,
            workers: None,
        }
    }

    pub fn from_file(file: &ScenarioFile) -> Result<Self> {
        let (spec, prior, err) = file.model.build()?;
        let strategies = file
            .strategies
            .iter()
            .map(|entry| {
                Ok(match entry.baseline()? {
                    Some(b) => StrategyConfig::Baseline(b),
                    None => {
                        let StrategyEntry::Dope {
                            k_pools_per_step,
                            burn_in,
                            max_thinning,
                            n_restarts,
                            n_perturbations,
                            max_steps,
                            max_rounds,
                        } = *entry
                        else {
                            unreachable!("only DOPE entries lack a baseline")
                        };
                        let mut d = DopeStrategy::new(k_pools_per_step);
                        d.gibbs.burn_in = burn_in.unwrap_or(d.gibbs.burn_in);
                        d.gibbs.max_thinning = max_thinning.unwrap_or(d.gibbs.max_thinning);
                        d.hill_climb.n_restarts = n_restarts.unwrap_or(d.hill_climb.n_restarts);
                        d.hill_climb.n_perturbations = n_perturbations.unwrap_or(d.hill_climb.n_perturbations);
                        d.hill_climb.max_steps = max_steps.unwrap_or(d.hill_climb.max_steps);
                        d.max_rounds = max_rounds;
                        StrategyConfig::Dope(d)
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let interval_grid = match &file.interval_grid {
            Some(g) => g.intervals()?,
            None => DecisionInterval::default_grid(),
        };
        let cfg = Self {
            spec,
            prior,
            err,
            n_populations: file.n_populations,
            strategies,
            interval_grid,
            mc_samples: file.mc_samples,
            seed: file.seed,
            workers: file.workers,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_populations == 0 {
            return Err(DopeError::validation("n_populations", "must be at least 1"));
        }
        if self.strategies.is_empty() {
            return Err(DopeError::validation("strategies", "must not be empty"));
        }
        if self.mc_samples < 2 {
            return Err(DopeError::validation("mc_samples", "must be at least 2"));
        }
        let has_dope = self.strategies.iter().any(|s| matches!(s, StrategyConfig::Dope(_)));
        if has_dope && self.interval_grid.is_empty() {
            return Err(DopeError::validation("interval_grid", "must not be empty"));
        }
        if self.workers == Some(0) {
            return Err(DopeError::validation("workers", "must be at least 1"));
        }
        for s in &self.strategies {
            if let StrategyConfig::Baseline(Baseline::Matrix(m)) = s {
                if m.rows * m.cols != self.spec.n_individuals() {
                    return Err(DopeError::validation(
                        "strategies",
                        format!("matrix {}x{} does not hold {} individuals", m.rows, m.cols, self.spec.n_individuals()),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Digest of everything but the seed and worker count.
    pub fn digest(&self) -> String {
        config_digest(&DigestView {
            model: ModelConfig::from_parts(&self.spec, &self.prior, &self.err),
            n_populations: self.n_populations,
            strategies: &self.strategies,
            interval_grid: &self.interval_grid,
            mc_samples: self.mc_samples,
        })
    }
}

/// Aggregate performance of one strategy (and interval, for DOPE).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub strategy: String,
    pub interval_lower: Option<f64>,
    pub interval_upper: Option<f64>,
    pub mean_tests: f64,
    pub tests_sd: f64,
    pub fnr: f64,
    pub fnr_se: f64,
    pub fpr: f64,
    pub fpr_se: f64,
    /// Mean posterior entropy in nats; a sum of marginal entropies when
    /// `entropy_proxy` is set.
    pub mean_posterior_entropy: Option<f64>,
    pub entropy_proxy: bool,
    /// Realized fraction of infected individuals.
    pub prevalence: f64,
    pub n_populations: usize,
    pub n_infected: usize,
    pub n_healthy: usize,
    pub truncated_runs: usize,
    pub p_primary: f64,
    pub p_secondary: f64,
    pub seed: u64,
    pub config_digest: String,
}

impl MetricsRow {
    pub fn is_dope(&self) -> bool {
        self.strategy.starts_with("dope")
    }

    /// The decision interval of a DOPE row.
    pub fn interval(&self) -> Option<DecisionInterval> {
        match (self.interval_lower, self.interval_upper) {
            (Some(a), Some(b)) => DecisionInterval::new(a, b).ok(),
            _ if self.is_dope() => Some(DecisionInterval::empty()),
            _ => None,
        }
    }

    pub fn label(&self) -> String {
        match self.interval() {
            Some(i) if self.is_dope() => format!("{} {}", self.strategy, i),
            _ => self.strategy.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct RunResult {
    tests: usize,
    false_negatives: usize,
    false_positives: usize,
    entropy: Option<f64>,
    proxy: bool,
    truncated: bool,
}

struct Replicate {
    n_infected: usize,
    n_healthy: usize,
    runs: Vec<RunResult>,
}

fn errors(truth: &InfectionState, classification: &[bool]) -> (usize, usize) {
    truth
        .bits()
        .iter()
        .zip(classification)
        .fold((0, 0), |(fneg, fpos), (&t, &c)| {
            (fneg + (t && !c) as usize, fpos + (!t && c) as usize)
        })
}

fn exact_entropy(cfg: &ScenarioConfig, design: &Design, data: &TestData) -> Result<Option<f64>> {
    if cfg.spec.n_individuals() > MAX_EXACT_INDIVIDUALS {
        return Ok(None);
    }
    Ok(Some(exact_posterior(&cfg.spec, &cfg.prior, &cfg.err, design, data)?.entropy()))
}

fn run_dope(
    cfg: &ScenarioConfig,
    strategy: &DopeStrategy,
    index: usize,
    replicate: usize,
    truth: &InfectionState,
) -> Result<Vec<RunResult>> {
    let path = [index as u64, replicate as u64];
    let config = DopeConfig {
        k_pools_per_step: strategy.k_pools_per_step,
        interval: DecisionInterval::empty(),
        gibbs: GibbsConfig {
            n_samples: cfg.mc_samples,
            ..strategy.gibbs
        },
        hill_climb: strategy.hill_climb,
        max_rounds: strategy.max_rounds,
        seed: derive_seed(cfg.seed, &[DOPE_STREAM, path[0], path[1]]),
    };
    let engine = DopeEngine::new(cfg.spec.clone(), cfg.prior, cfg.err, config)?;
    let max_rounds = engine.max_rounds();
    let mut executor = SimulationExecutor::new(
        truth.clone(),
        cfg.err,
        derive_seed(cfg.seed, &[EXECUTOR_STREAM, path[0], path[1]]),
    );
    let grid = &cfg.interval_grid;
    let trajectory = engine.run_trajectory(&mut executor, max_rounds, |m| {
        grid.iter().all(|i| should_stop(m, i))
    })?;

    let k = strategy.k_pools_per_step;
    let mut entropy_at: BTreeMap<usize, (Option<f64>, bool)> = BTreeMap::new();
    grid.iter()
        .map(|interval| {
            let (round, truncated) = trajectory
                .stop_round(interval, max_rounds)
                .expect("trajectory runs until every interval stops");
            let marginals = &trajectory.marginals[round];
            let (fneg, fpos) = errors(truth, &classify(marginals));
            let (entropy, proxy) = match entropy_at.get(&round) {
                Some(&e) => e,
                None => {
                    let design = Design::new(trajectory.design.pools()[..round * k].to_vec());
                    let data = TestData::new(trajectory.data.results()[..round * k].to_vec());
                    let e = match exact_entropy(cfg, &design, &data)? {
                        Some(h) => (Some(h), false),
                        None => (Some(marginals.iter().map(|&p| binary_entropy(p)).sum()), true),
                    };
                    entropy_at.insert(round, e);
                    e
                }
            };
            Ok(RunResult {
                tests: round * k,
                false_negatives: fneg,
                false_positives: fpos,
                entropy,
                proxy,
                truncated,
            })
        })
        .collect()
}

fn run_replicate(cfg: &ScenarioConfig, replicate: usize) -> Result<Replicate> {
    let truth = sample_state(&cfg.spec, &cfg.prior, &mut stream(cfg.seed, &[TRUTH_STREAM, replicate as u64]));
    let n_infected = truth.infected_count();
    let mut runs = Vec::new();
    for (index, strategy) in cfg.strategies.iter().enumerate() {
        match strategy {
            StrategyConfig::Dope(d) => runs.extend(run_dope(cfg, d, index, replicate, &truth)?),
            StrategyConfig::Baseline(b) => {
                let mut rng = stream(cfg.seed, &[BASELINE_STREAM, index as u64, replicate as u64]);
                let out = b.run(&truth, &cfg.err, &mut rng)?;
                let (fneg, fpos) = errors(&truth, &out.classification);
                let design = Design::from_lists(
                    &out.transcript.iter().flat_map(|r| r.pools.clone()).collect::<Vec<_>>(),
                )?;
                let data = TestData::new(out.transcript.iter().flat_map(|r| r.results.clone()).collect());
                runs.push(RunResult {
                    tests: out.tests_used,
                    false_negatives: fneg,
                    false_positives: fpos,
                    entropy: exact_entropy(cfg, &design, &data)?,
                    proxy: false,
                    truncated: false,
                });
            }
        }
    }
    Ok(Replicate {
        n_infected,
        n_healthy: truth.len() - n_infected,
        runs,
    })
}

fn row_templates(cfg: &ScenarioConfig) -> Vec<(String, Option<DecisionInterval>)> {
    let mut rows = Vec::new();
    for s in &cfg.strategies {
        match s {
            StrategyConfig::Dope(_) => rows.extend(cfg.interval_grid.iter().map(|&i| (s.id(), Some(i)))),
            StrategyConfig::Baseline(_) => rows.push((s.id(), None)),
        }
    }
    rows
}

fn rate(count: usize, denominator: usize) -> (f64, f64) {
    if denominator == 0 {
        return (0.0, 0.0);
    }
    let p = count as f64 / denominator as f64;
    (p, (p * (1.0 - p) / denominator as f64).sqrt())
}

fn aggregate(cfg: &ScenarioConfig, replicates: &[Replicate]) -> Vec<MetricsRow> {
    let n_pop = replicates.len();
    let n_infected: usize = replicates.iter().map(|r| r.n_infected).sum();
    let n_healthy: usize = replicates.iter().map(|r| r.n_healthy).sum();
    let digest = cfg.digest();
    row_templates(cfg)
        .into_iter()
        .enumerate()
        .map(|(j, (strategy, interval))| {
            let runs: Vec<&RunResult> = replicates.iter().map(|r| &r.runs[j]).collect();
            let tests: Vec<f64> = runs.iter().map(|r| r.tests as f64).collect();
            let mean_tests = tests.iter().sum::<f64>() / n_pop as f64;
            let tests_sd = if n_pop > 1 {
                (tests.iter().map(|t| (t - mean_tests).powi(2)).sum::<f64>() / (n_pop - 1) as f64).sqrt()
            } else {
                0.0
            };
            let (fnr, fnr_se) = rate(runs.iter().map(|r| r.false_negatives).sum(), n_infected);
            let (fpr, fpr_se) = rate(runs.iter().map(|r| r.false_positives).sum(), n_healthy);
            let mean_posterior_entropy = runs
                .iter()
                .map(|r| r.entropy)
                .sum::<Option<f64>>()
                .map(|s| s / n_pop as f64);
            let bounds = interval.and_then(|i| i.bounds());
            MetricsRow {
                strategy,
                interval_lower: bounds.map(|b| b.0),
                interval_upper: bounds.map(|b| b.1),
                mean_tests,
                tests_sd,
                fnr,
                fnr_se,
                fpr,
                fpr_se,
                mean_posterior_entropy,
                entropy_proxy: runs.iter().any(|r| r.proxy),
                prevalence: n_infected as f64 / (n_infected + n_healthy) as f64,
                n_populations: n_pop,
                n_infected,
                n_healthy,
                truncated_runs: runs.iter().filter(|r| r.truncated).count(),
                p_primary: cfg.prior.p_primary,
                p_secondary: cfg.prior.p_secondary,
                seed: cfg.seed,
                config_digest: digest.clone(),
            }
        })
        .collect()
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| DopeError::InvalidArgument(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// Simulates `n_populations` replicates and aggregates one row per baseline
/// and one row per (DOPE strategy, interval), in configuration order.
///
/// Error rates pool counts over replicates: FNR divides missed infections by
/// all infected individuals, FPR divides false alarms by all healthy ones.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let replicates = with_workers(cfg.workers, || {
        (0..cfg.n_populations)
            .into_par_iter()
            .map(|p| run_replicate(cfg, p))
            .collect::<Result<Vec<_>>>()
    })??;
    Ok(aggregate(cfg, &replicates))
}

/// One scenario per `(p_primary, p_secondary)` point, rows sorted by realized
/// prevalence.
pub fn prevalence_sweep(base: &ScenarioConfig, grid: &[(f64, f64)]) -> Result<Vec<MetricsRow>> {
    if grid.is_empty() {
        return Err(DopeError::validation("sweep", "grid must not be empty"));
    }
    let mut rows = Vec::new();
    for &(pp, ps) in grid {
        let cfg = ScenarioConfig {
            prior: PriorParams::new(pp, ps, base.prior.p_basal)?,
            ..base.clone()
        };
        rows.extend(run_scenario(&cfg)?);
    }
    rows.sort_by(|a, b| a.prevalence.total_cmp(&b.prevalence));
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DominanceMetric {
    Fnr,
    Entropy,
}

/// Row `dominant` beats row `dominated` on `metric` with no more tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceFinding {
    pub metric: DominanceMetric,
    pub dominant: String,
    pub dominated: String,
    pub dominant_row: usize,
    pub dominated_row: usize,
}

/// `a` has a strictly lower `metric` than `b` and uses at most as many tests.
pub fn dominates(a: &MetricsRow, b: &MetricsRow, metric: DominanceMetric) -> bool {
    let better = match metric {
        DominanceMetric::Fnr => a.fnr < b.fnr,
        DominanceMetric::Entropy => match (a.mean_posterior_entropy, b.mean_posterior_entropy) {
            (Some(x), Some(y)) => x < y,
            _ => false,
        },
    };
    better && a.mean_tests <= b.mean_tests
}

/// Every dominance relation between rows of one scenario.
pub fn dominance_report(rows: &[MetricsRow]) -> Vec<DominanceFinding> {
    let mut findings = Vec::new();
    for metric in [DominanceMetric::Fnr, DominanceMetric::Entropy] {
        for (i, a) in rows.iter().enumerate() {
            for (j, b) in rows.iter().enumerate() {
                if i != j && dominates(a, b, metric) {
                    findings.push(DominanceFinding {
                        metric,
                        dominant: a.label(),
                        dominated: b.label(),
                        dominant_row: i,
                        dominated_row: j,
                    });
                }
            }
        }
    }
    findings
}

/// The DOPE interval with the fewest mean tests among those with FNR below
/// `target_fnr`; ties go to the lower FNR, then to the smaller `(α, β)`.
pub fn select_interval(rows: &[MetricsRow], target_fnr: f64) -> Result<DecisionInterval> {
    let key = |r: &MetricsRow| (r.interval_lower.unwrap_or(f64::NEG_INFINITY), r.interval_upper.unwrap_or(f64::NEG_INFINITY));
    rows.iter()
        .filter(|r| r.is_dope() && r.fnr < target_fnr)
        .min_by(|a, b| {
            a.mean_tests
                .total_cmp(&b.mean_tests)
                .then(a.fnr.total_cmp(&b.fnr))
                .then(key(a).0.total_cmp(&key(b).0))
                .then(key(a).1.total_cmp(&key(b).1))
        })
        .and_then(MetricsRow::interval)
        .ok_or(DopeError::Infeasible { target: target_fnr })
}

#[derive(Debug, Serialize, Deserialize)]
struct TradeoffRow<'a> {
    strategy: &'a str,
    interval_lower: Option<f64>,
    interval_upper: Option<f64>,
    mean_tests: f64,
    fnr: f64,
    mean_posterior_entropy: Option<f64>,
    seed: u64,
    config_digest: &'a str,
}

#[derive(Debug, Serialize, Deserialize)]
struct PrevalenceRow<'a> {
    strategy: &'a str,
    interval_lower: Option<f64>,
    interval_upper: Option<f64>,
    p_primary: f64,
    p_secondary: f64,
    prevalence: f64,
    mean_tests: f64,
    fnr: f64,
    seed: u64,
    config_digest: &'a str,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const TRADEOFF_FILE: &str = "tradeoff.csv";
pub const PREVALENCE_FILE: &str = "prevalence.csv";

fn csv_error(e: csv::Error) -> DopeError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => DopeError::Io(io),
        other => DopeError::Parse(format!("{other:?}")),
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `metrics.csv` (every field), `tradeoff.csv` (tests against FNR and
/// entropy) and `prevalence.csv` (prevalence against tests and FNR) into
/// `dir`, creating it if needed.
pub fn emit_tables(rows: &[MetricsRow], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let paths: Vec<PathBuf> = [METRICS_FILE, TRADEOFF_FILE, PREVALENCE_FILE]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    write_csv(&paths[0], rows.iter())?;
    write_csv(
        &paths[1],
        rows.iter().map(|r| TradeoffRow {
            strategy: &r.strategy,
            interval_lower: r.interval_lower,
            interval_upper: r.interval_upper,
            mean_tests: r.mean_tests,
            fnr: r.fnr,
            mean_posterior_entropy: r.mean_posterior_entropy,
            seed: r.seed,
            config_digest: &r.config_digest,
        }),
    )?;
    write_csv(
        &paths[2],
        rows.iter().map(|r| PrevalenceRow {
            strategy: &r.strategy,
            interval_lower: r.interval_lower,
            interval_upper: r.interval_upper,
            p_primary: r.p_primary,
            p_secondary: r.p_secondary,
            prevalence: r.prevalence,
            mean_tests: r.mean_tests,
            fnr: r.fnr,
            seed: r.seed,
            config_digest: &r.config_digest,
        }),
    )?;
    Ok(paths)
}

/// Reads a `metrics.csv` written by [`emit_tables`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}
