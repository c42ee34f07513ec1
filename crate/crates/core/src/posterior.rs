//! Posterior over infection states: Gibbs sampling with autocorrelation-based
//! thinning, exact enumeration for small populations, marginals and entropy.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DopeError, Result};
use crate::model::{
    log_sum_exp, sample_prior, sample_state, Design, InfectionState, PoolLikelihood,
    PopulationSpec, PriorLogs, PriorParams, Role, TestData, TestErrorParams,
};
use crate::rng::{stream, StreamRng};

/// Largest population the enumeration oracle accepts.
pub const MAX_EXACT_INDIVIDUALS: usize = 20;

/// Window constant for automatic IACT windowing.
pub const IACT_WINDOW_C: f64 = 5.0;

/// A chain is trusted only if it is at least this many IACTs long.
pub const IACT_MIN_LENGTH_FACTOR: f64 = 50.0;

const INIT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GibbsConfig {
    /// Number of thinned samples to keep.
    pub n_samples: usize,
    /// Sweeps discarded before sampling; the IACT is measured on them.
    pub burn_in: usize,
    pub seed: u64,
    pub max_thinning: usize,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        Self {
            n_samples: 12_000,
            burn_in: 2_000,
            seed: 0,
            max_thinning: 100,
        }
    }
}

impl GibbsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(DopeError::validation("n_samples", "must be at least 1"));
        }
        if self.max_thinning == 0 {
            return Err(DopeError::validation("max_thinning", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    /// Integrated autocorrelation time of each coordinate, in sweeps.
    pub iact_per_coordinate: Vec<f64>,
    pub thinning: usize,
    pub burn_in: usize,
    /// Set when the burn-in was too short for a trustworthy estimate; the
    /// thinning then falls back to the configured maximum.
    pub unreliable: bool,
}

impl ChainDiagnostics {
    /// Diagnostics for exactly independent draws.
    pub fn independent(n_individuals: usize) -> Self {
        Self {
            iact_per_coordinate: vec![1.0; n_individuals],
            thinning: 1,
            burn_in: 0,
            unreliable: false,
        }
    }

    /// JSON report for the harness and the service.
    pub fn report(&self) -> String {
        serde_json::to_string_pretty(self).expect("diagnostics serialize")
    }
}

/// Thinned posterior draws, stored one column per individual.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    columns: Vec<Vec<u8>>,
    n_samples: usize,
    diagnostics: ChainDiagnostics,
    design: Design,
    data: TestData,
}

impl PosteriorSamples {
    /// Wraps an explicit list of states (prior draws or a synthetic set).
    pub fn from_states(
        states: &[InfectionState],
        diagnostics: ChainDiagnostics,
        design: Design,
        data: TestData,
    ) -> Result<Self> {
        let n = states
            .first()
            .map(InfectionState::len)
            .ok_or_else(|| DopeError::InvalidArgument("no samples".into()))?;
        if states.iter().any(|s| s.len() != n) {
            return Err(DopeError::InvalidArgument(
                "samples have inconsistent lengths".into(),
            ));
        }
        let columns = (0..n)
            .map(|i| states.iter().map(|s| s.get(i) as u8).collect())
            .collect();
        Ok(Self {
            columns,
            n_samples: states.len(),
            diagnostics,
            design,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.n_samples
    }

    pub fn is_empty(&self) -> bool {
        self.n_samples == 0
    }

    pub fn n_individuals(&self) -> usize {
        self.columns.len()
    }

    /// Indicator of individual `i` across all samples.
    pub fn column(&self, i: usize) -> &[u8] {
        &self.columns[i]
    }

    pub fn state(&self, r: usize) -> InfectionState {
        InfectionState::new(self.columns.iter().map(|c| c[r] == 1).collect())
    }

    pub fn states(&self) -> impl Iterator<Item = InfectionState> + '_ {
        (0..self.n_samples).map(|r| self.state(r))
    }

    pub fn diagnostics(&self) -> &ChainDiagnostics {
        &self.diagnostics
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    pub fn data(&self) -> &TestData {
        &self.data
    }
}

fn check_dimensions(spec: &PopulationSpec, design: &Design, data: &TestData) -> Result<()> {
    if design.len() != data.len() {
        return Err(DopeError::InvalidArgument(format!(
            "design has {} pools but data has {} results",
            design.len(),
            data.len()
        )));
    }
    design.validate(spec.n_individuals(), None)
}

/// Incrementally maintained chain state with the sufficient statistics the
/// full conditionals need: infected count per pool and per cluster.
struct GibbsKernel<'a> {
    spec: &'a PopulationSpec,
    logs: PriorLogs,
    lik: Vec<[f64; 2]>,
    data: &'a [bool],
    pools_of: Vec<Vec<usize>>,
    pool_members: Vec<&'a [usize]>,
    x: Vec<bool>,
    pool_counts: Vec<usize>,
    cluster_counts: Vec<usize>,
}

impl<'a> GibbsKernel<'a> {
    fn new(
        spec: &'a PopulationSpec,
        prior: &PriorParams,
        err: &TestErrorParams,
        design: &'a Design,
        data: &'a TestData,
        init: &InfectionState,
    ) -> Self {
        let n = spec.n_individuals();
        let max_pool = design.pools().iter().map(|p| p.len()).max().unwrap_or(0);
        let mut pools_of = vec![Vec::new(); n];
        for (k, pool) in design.pools().iter().enumerate() {
            for &h in pool.members() {
                pools_of[h].push(k);
            }
        }
        let mut kernel = Self {
            spec,
            logs: PriorLogs::new(prior),
            lik: PoolLikelihood::new(err).table(max_pool),
            data: data.results(),
            pools_of,
            pool_members: design.pools().iter().map(|p| p.members()).collect(),
            x: vec![false; n],
            pool_counts: vec![0; design.len()],
            cluster_counts: vec![0; spec.clusters().len()],
        };
        kernel.reset(init);
        kernel
    }

    fn reset(&mut self, state: &InfectionState) {
        self.x.copy_from_slice(state.bits());
        for (k, members) in self.pool_members.iter().enumerate() {
            self.pool_counts[k] = members.iter().filter(|&&h| self.x[h]).count();
        }
        for (c, cluster) in self.spec.clusters().iter().enumerate() {
            self.cluster_counts[c] = cluster.secondaries().iter().filter(|&&h| self.x[h]).count();
        }
    }

    /// Unnormalized log posterior of the current state.
    fn log_joint(&self) -> f64 {
        let prior: f64 = self
            .spec
            .clusters()
            .iter()
            .enumerate()
            .map(|(c, cl)| {
                self.logs
                    .cluster(self.x[cl.primary()], self.cluster_counts[c], cl.secondaries().len())
            })
            .sum();
        let lik: f64 = self
            .pool_counts
            .iter()
            .zip(self.data)
            .map(|(&c, &d)| self.lik[c][d as usize])
            .sum();
        prior + lik
    }

    /// Log joint (up to the shared factor) with `x_i = 0` and `x_i = 1`.
    fn conditional_terms(&self, i: usize) -> (f64, f64) {
        let (mut l0, mut l1) = match self.spec.role(i) {
            Role::Primary { cluster } => {
                let n_sec = self.spec.clusters()[cluster].secondaries().len();
                let s = self.cluster_counts[cluster];
                (
                    self.logs.cluster(false, s, n_sec),
                    self.logs.cluster(true, s, n_sec),
                )
            }
            Role::Secondary { primary, .. } => {
                if self.x[primary] {
                    (self.logs.ln_not_ps, self.logs.ln_ps)
                } else {
                    (self.logs.ln_not_pb, self.logs.ln_pb)
                }
            }
        };
        let xi = self.x[i] as usize;
        for &k in &self.pools_of[i] {
            let others = self.pool_counts[k] - xi;
            let d = self.data[k] as usize;
            l0 += self.lik[others][d];
            l1 += self.lik[others + 1][d];
        }
        (l0, l1)
    }

    fn conditional(&self, i: usize) -> Result<f64> {
        let (l0, l1) = self.conditional_terms(i);
        probability_from_log_pair(l0, l1).ok_or_else(|| {
            DopeError::InvalidModel(format!(
                "both values of individual {i} are impossible given the rest of the state"
            ))
        })
    }

    fn set(&mut self, i: usize, value: bool) {
        if self.x[i] == value {
            return;
        }
        self.x[i] = value;
        for &k in &self.pools_of[i] {
            if value {
                self.pool_counts[k] += 1;
            } else {
                self.pool_counts[k] -= 1;
            }
        }
        if let Role::Secondary { cluster, .. } = self.spec.role(i) {
            if value {
                self.cluster_counts[cluster] += 1;
            } else {
                self.cluster_counts[cluster] -= 1;
            }
        }
    }

    fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        for i in 0..self.x.len() {
            let p = self.conditional(i)?;
            let v = rng.random::<f64>() < p;
            self.set(i, v);
        }
        Ok(())
    }
}

/// `Pr(x = 1)` from the two unnormalized log-probabilities; `None` if both
/// are impossible.
fn probability_from_log_pair(l0: f64, l1: f64) -> Option<f64> {
    match (l0 == f64::NEG_INFINITY, l1 == f64::NEG_INFINITY) {
        (true, true) => None,
        (false, true) => Some(0.0),
        (true, false) => Some(1.0),
        (false, false) => {
            let d = l1 - l0;
            Some(if d >= 0.0 {
                1.0 / (1.0 + (-d).exp())
            } else {
                let e = d.exp();
                e / (1.0 + e)
            })
        }
    }
}

/// Full conditional `Pr(θ_i = 1 | θ_{-i}, T, d)`. The current value of
/// coordinate `i` in `partial_state` is ignored.
pub fn gibbs_conditional(
    i: usize,
    partial_state: &InfectionState,
    design: &Design,
    data: &TestData,
    spec: &PopulationSpec,
    prior: &PriorParams,
    err: &TestErrorParams,
) -> Result<f64> {
    check_dimensions(spec, design, data)?;
    if partial_state.len() != spec.n_individuals() || i >= spec.n_individuals() {
        return Err(DopeError::InvalidArgument(
            "state or coordinate does not match the population".into(),
        ));
    }
    let mut kernel = GibbsKernel::new(spec, prior, err, design, data, partial_state);
    let feasible = [false, true].into_iter().any(|v| {
        kernel.set(i, v);
        kernel.log_joint() > f64::NEG_INFINITY
    });
    if !feasible {
        return Err(DopeError::InvalidModel(format!(
            "no value of individual {i} is consistent with the rest of the state"
        )));
    }
    kernel.conditional(i)
}

/// Finds a starting state with nonzero posterior mass: prior draws first,
/// then a few structured candidates.
fn initial_state(
    kernel: &mut GibbsKernel<'_>,
    spec: &PopulationSpec,
    prior: &PriorParams,
    design: &Design,
    data: &TestData,
    rng: &mut StreamRng,
) -> Result<InfectionState> {
    for _ in 0..INIT_ATTEMPTS {
        let s = sample_state(spec, prior, rng);
        kernel.reset(&s);
        if kernel.log_joint() > f64::NEG_INFINITY {
            return Ok(s);
        }
    }
    let n = spec.n_individuals();
    let mut cleared = vec![true; n];
    for (pool, &d) in design.pools().iter().zip(data.results()) {
        if !d {
            for &h in pool.members() {
                cleared[h] = false;
            }
        }
    }
    let candidates = [
        InfectionState::new(cleared),
        InfectionState::healthy(n),
        InfectionState::new(vec![true; n]),
    ];
    for s in candidates {
        kernel.reset(&s);
        if kernel.log_joint() > f64::NEG_INFINITY {
            return Ok(s);
        }
    }
    Err(DopeError::InvalidModel(
        "could not find a state consistent with the observed data".into(),
    ))
}

/// Runs a Gibbs chain on `Pr(θ | T, d)`.
///
/// The chain starts from a prior draw, performs `burn_in` systematic sweeps
/// while recording every coordinate, estimates the IACT from that record and
/// then keeps every `thinning`-th state of `thinning * n_samples` sweeps.
pub fn gibbs_run(
    config: &GibbsConfig,
    design: &Design,
    data: &TestData,
    spec: &PopulationSpec,
    prior: &PriorParams,
    err: &TestErrorParams,
) -> Result<PosteriorSamples> {
    config.validate()?;
    check_dimensions(spec, design, data)?;
    let n = spec.n_individuals();
    let mut rng = stream(config.seed, &[]);
    let placeholder = InfectionState::healthy(n);
    let mut kernel = GibbsKernel::new(spec, prior, err, design, data, &placeholder);
    let init = initial_state(&mut kernel, spec, prior, design, data, &mut rng)?;
    kernel.reset(&init);

    let mut series = vec![Vec::with_capacity(config.burn_in); n];
    for _ in 0..config.burn_in {
        kernel.sweep(&mut rng)?;
        for (col, &v) in series.iter_mut().zip(&kernel.x) {
            col.push(v as u8);
        }
    }
    let mut diagnostics = estimate_iact(&series, config.max_thinning);
    diagnostics.burn_in = config.burn_in;
    if diagnostics.unreliable {
        warn!(
            "IACT estimate unreliable after {} burn-in sweeps; thinning by {}",
            config.burn_in, diagnostics.thinning
        );
    }

    let thinning = diagnostics.thinning;
    let mut columns = vec![Vec::with_capacity(config.n_samples); n];
    for _ in 0..config.n_samples {
        for _ in 0..thinning {
            kernel.sweep(&mut rng)?;
        }
        for (col, &v) in columns.iter_mut().zip(&kernel.x) {
            col.push(v as u8);
        }
    }
    Ok(PosteriorSamples {
        columns,
        n_samples: config.n_samples,
        diagnostics,
        design: design.clone(),
        data: data.clone(),
    })
}

/// Posterior draws for `(T, d)`: exact i.i.d. prior draws when nothing has
/// been observed, a thinned Gibbs chain otherwise.
pub fn draw_posterior(
    config: &GibbsConfig,
    design: &Design,
    data: &TestData,
    spec: &PopulationSpec,
    prior: &PriorParams,
    err: &TestErrorParams,
) -> Result<PosteriorSamples> {
    if design.is_empty() && data.is_empty() {
        config.validate()?;
        let mut rng = stream(config.seed, &[]);
        let states = sample_prior(spec, prior, &mut rng, config.n_samples)?;
        PosteriorSamples::from_states(
            &states,
            ChainDiagnostics::independent(spec.n_individuals()),
            Design::empty(),
            TestData::empty(),
        )
    } else {
        gibbs_run(config, design, data, spec, prior, err)
    }
}

/// Integrated autocorrelation time of one series with automatic windowing.
///
/// Returns `None` when no window `M >= c * tau(M)` exists inside the series.
/// Constant series have `tau = 1`.
pub fn integrated_autocorrelation_time(series: &[f64], c: f64) -> Option<f64> {
    let n = series.len();
    if n < 2 {
        return None;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let acov0 = centered.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if acov0 <= 0.0 {
        return Some(1.0);
    }
    let mut tau = 1.0;
    for lag in 1..n {
        let acov = centered[..n - lag]
            .iter()
            .zip(&centered[lag..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n as f64;
        tau += 2.0 * acov / acov0;
        if lag as f64 >= c * tau {
            return Some(tau.max(1.0));
        }
    }
    None
}

/// IACT per coordinate and the resulting thinning factor.
pub fn estimate_iact(series: &[Vec<u8>], max_thinning: usize) -> ChainDiagnostics {
    let max_thinning = max_thinning.max(1);
    let mut unreliable = false;
    let iact: Vec<f64> = series
        .iter()
        .map(|col| {
            let values: Vec<f64> = col.iter().map(|&v| v as f64).collect();
            match integrated_autocorrelation_time(&values, IACT_WINDOW_C) {
                Some(tau) if values.len() as f64 >= IACT_MIN_LENGTH_FACTOR * tau => tau,
                Some(tau) => {
                    unreliable = true;
                    tau.min(max_thinning as f64)
                }
                None => {
                    unreliable = true;
                    max_thinning as f64
                }
            }
        })
        .collect();
    let thinning = if unreliable {
        max_thinning
    } else {
        iact.iter()
            .map(|t| t.ceil() as usize)
            .max()
            .unwrap_or(1)
            .clamp(1, max_thinning)
    };
    ChainDiagnostics {
        iact_per_coordinate: iact,
        thinning,
        burn_in: series.first().map_or(0, Vec::len),
        unreliable,
    }
}

/// Sample mean of each coordinate.
pub fn posterior_marginals(samples: &PosteriorSamples) -> Vec<f64> {
    let l = samples.len() as f64;
    samples
        .columns
        .iter()
        .map(|c| c.iter().map(|&v| v as u32).sum::<u32>() as f64 / l)
        .collect()
}

/// Full distribution over all `2^N` states, indexed by bit mask
/// (bit `i` is individual `i`).
#[derive(Debug, Clone, PartialEq)]
pub struct ExactPosterior {
    n_individuals: usize,
    probs: Vec<f64>,
    log_evidence: f64,
}

impl ExactPosterior {
    /// Wraps an arbitrary normalized table (for example a prior).
    pub fn from_probabilities(n_individuals: usize, probs: Vec<f64>) -> Result<Self> {
        if n_individuals > MAX_EXACT_INDIVIDUALS || probs.len() != 1 << n_individuals {
            return Err(DopeError::InvalidArgument(
                "table size does not match 2^N".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (total - 1.0).abs() > 1e-9 {
            return Err(DopeError::InvalidArgument(
                "table is not a probability distribution".into(),
            ));
        }
        Ok(Self {
            n_individuals,
            probs,
            log_evidence: 0.0,
        })
    }

    pub fn n_individuals(&self) -> usize {
        self.n_individuals
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, state: &InfectionState) -> f64 {
        let mask = state
            .bits()
            .iter()
            .enumerate()
            .fold(0usize, |m, (i, &b)| m | (b as usize) << i);
        self.probs[mask]
    }

    /// `ln Pr(d | T)`.
    pub fn log_evidence(&self) -> f64 {
        self.log_evidence
    }

    pub fn evidence(&self) -> f64 {
        self.log_evidence.exp()
    }

    pub fn marginals(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n_individuals];
        for (mask, &p) in self.probs.iter().enumerate() {
            for (i, mi) in m.iter_mut().enumerate() {
                if mask >> i & 1 == 1 {
                    *mi += p;
                }
            }
        }
        m
    }

    /// Joint Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }
}

/// Enumerates `Pr(θ | T, d)` over every state. Refuses populations above
/// [`MAX_EXACT_INDIVIDUALS`].
pub fn exact_posterior(
    spec: &PopulationSpec,
    prior: &PriorParams,
    err: &TestErrorParams,
    design: &Design,
    data: &TestData,
) -> Result<ExactPosterior> {
    let n = spec.n_individuals();
    if n > MAX_EXACT_INDIVIDUALS {
        return Err(DopeError::BudgetExceeded(format!(
            "exact posterior needs N <= {MAX_EXACT_INDIVIDUALS}, got {n}"
        )));
    }
    check_dimensions(spec, design, data)?;
    let logs = PriorLogs::new(prior);
    let max_pool = design.pools().iter().map(|p| p.len()).max().unwrap_or(0);
    let lik = PoolLikelihood::new(err).table(max_pool);
    let pool_masks: Vec<u32> = design
        .pools()
        .iter()
        .map(|p| p.members().iter().fold(0u32, |m, &h| m | 1 << h))
        .collect();
    let cluster_masks: Vec<(u32, u32, usize)> = spec
        .clusters()
        .iter()
        .map(|c| {
            let sec = c.secondaries().iter().fold(0u32, |m, &h| m | 1 << h);
            (1u32 << c.primary(), sec, c.secondaries().len())
        })
        .collect();

    let log_joint: Vec<f64> = (0..1u32 << n)
        .map(|mask| {
            let prior: f64 = cluster_masks
                .iter()
                .map(|&(pm, sm, ns)| {
                    logs.cluster(mask & pm != 0, (mask & sm).count_ones() as usize, ns)
                })
                .sum();
            if prior == f64::NEG_INFINITY {
                return prior;
            }
            prior
                + pool_masks
                    .iter()
                    .zip(data.results())
                    .map(|(&pm, &d)| lik[(mask & pm).count_ones() as usize][d as usize])
                    .sum::<f64>()
        })
        .collect();
    let log_evidence = log_sum_exp(&log_joint);
    if log_evidence == f64::NEG_INFINITY {
        return Err(DopeError::InvalidModel(
            "observed data have zero probability under the model".into(),
        ));
    }
    let probs = log_joint
        .iter()
        .map(|&l| (l - log_evidence).exp())
        .collect();
    Ok(ExactPosterior {
        n_individuals: n,
        probs,
        log_evidence,
    })
}

/// Entropy of a posterior representation.
pub enum EntropySource<'a> {
    Exact(&'a ExactPosterior),
    Samples(&'a PosteriorSamples),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorEntropy {
    pub nats: f64,
    /// True when the value is the sum of marginal entropies, an upper bound
    /// on the joint entropy rather than the joint entropy itself.
    pub upper_bound_proxy: bool,
}

pub fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        0.0
    } else {
        -(p * p.ln() + (1.0 - p) * (-p).ln_1p())
    }
}

pub fn posterior_entropy(source: EntropySource<'_>) -> PosteriorEntropy {
    match source {
        EntropySource::Exact(table) => PosteriorEntropy {
            nats: table.entropy(),
            upper_bound_proxy: false,
        },
        EntropySource::Samples(samples) => PosteriorEntropy {
            nats: posterior_marginals(samples)
                .into_iter()
                .map(binary_entropy)
                .sum(),
            upper_bound_proxy: true,
        },
    }
}
