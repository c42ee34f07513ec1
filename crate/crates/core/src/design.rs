//! Mutual information between infection states and pooled outcomes, and the
//! hill-climbing search for the `K`-pool design that maximizes it.
//!
//! The Monte-Carlo estimator draws one outcome vector `Y_k` per posterior
//! sample `η_k` and averages `ln Pr(Y_k | η_k) - ln mean_r Pr(Y_k | η_r)`.
//! The likelihood of a pool depends on a sample only through its infected
//! count, so every evaluation works on a [`PoolCountMatrix`].
//!
//! Two evaluation routes produce the same number: [`estimate_mi`] visits all
//! `L^2` sample pairs, while [`estimate_mi_grouped`] merges samples with equal
//! count vectors and outcomes with equal bit patterns before summing. The
//! search uses the grouped route.

use std::collections::HashMap;
use std::hash::Hash;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DopeError, Result};
use crate::model::{Design, Pool, PoolLikelihood, PopulationSpec, TestErrorParams, DEFAULT_POOL_CAP};
use crate::posterior::{ExactPosterior, PosteriorSamples};
use crate::rng::{stream, StreamRng};

/// Enumeration budget of [`exact_mi`].
pub const MAX_EXACT_MI_INDIVIDUALS: usize = 16;
pub const MAX_EXACT_MI_POOLS: usize = 12;

const PERTURB_ATTEMPTS: usize = 100;
const DENSE_KEY_LIMIT: u64 = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MIEstimate {
    /// Estimated mutual information in nats.
    pub value: f64,
    pub n_samples: usize,
    /// Standard error of the outer average; a rough spread indicator only.
    pub se_hint: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HillClimbConfig {
    pub n_restarts: usize,
    /// Neighbors scored per step.
    pub n_perturbations: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Pool-size cap; `None` disables it.
    pub pool_cap: Option<usize>,
}

impl Default for HillClimbConfig {
    fn default() -> Self {
        Self {
            n_restarts: 10,
            n_perturbations: 32,
            max_steps: 200,
            seed: 0,
            pool_cap: Some(DEFAULT_POOL_CAP),
        }
    }
}

impl HillClimbConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("n_restarts", self.n_restarts),
            ("n_perturbations", self.n_perturbations),
            ("max_steps", self.max_steps),
        ] {
            if v == 0 {
                return Err(DopeError::validation(field, "must be at least 1"));
            }
        }
        if self.pool_cap == Some(0) {
            return Err(DopeError::validation("pool_cap", "must be at least 1"));
        }
        Ok(())
    }
}

/// Infected count of every pool under every sample (one column per pool).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolCountMatrix {
    n_samples: usize,
    columns: Vec<Vec<u16>>,
    pool_sizes: Vec<usize>,
}

impl PoolCountMatrix {
    pub fn new(design: &Design, samples: &PosteriorSamples) -> Self {
        Self {
            n_samples: samples.len(),
            columns: design
                .pools()
                .iter()
                .map(|p| pool_count_column(samples, p))
                .collect(),
            pool_sizes: design.pools().iter().map(Pool::len).collect(),
        }
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_pools(&self) -> usize {
        self.columns.len()
    }

    /// Infected members of pool `pool` under sample `sample`.
    pub fn count(&self, sample: usize, pool: usize) -> u16 {
        self.columns[pool][sample]
    }

    pub fn column(&self, pool: usize) -> &[u16] {
        &self.columns[pool]
    }

    fn column_refs(&self) -> Vec<&[u16]> {
        self.columns.iter().map(Vec::as_slice).collect()
    }
}

fn pool_count_column(samples: &PosteriorSamples, pool: &Pool) -> Vec<u16> {
    let mut counts = vec![0u16; samples.len()];
    for &h in pool.members() {
        for (c, &v) in counts.iter_mut().zip(samples.column(h)) {
            *c += v as u16;
        }
    }
    counts
}

/// Uniform variates that fix the simulated outcomes: `Y_kj = 1` iff
/// `u_kj >= Pr(negative | count_kj)`. Sharing them between candidate designs
/// gives common random numbers.
#[derive(Debug, Clone)]
pub struct OutcomeDraws {
    n_pools: usize,
    uniforms: Vec<f64>,
}

impl OutcomeDraws {
    /// Draws `u_kj` sample by sample; stored pool-major.
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, n_samples: usize, n_pools: usize) -> Self {
        let mut uniforms = vec![0.0; n_samples * n_pools];
        for k in 0..n_samples {
            for j in 0..n_pools {
                uniforms[j * n_samples + k] = rng.random();
            }
        }
        Self { n_pools, uniforms }
    }

    fn pool(&self, pool: usize) -> &[f64] {
        let l = self.uniforms.len() / self.n_pools.max(1);
        &self.uniforms[pool * l..(pool + 1) * l]
    }

    #[inline]
    fn get(&self, sample: usize, pool: usize) -> f64 {
        let l = self.uniforms.len() / self.n_pools;
        self.uniforms[pool * l + sample]
    }
}

/// Scores designs against a fixed sample set and fixed outcome draws.
struct MiEvaluator<'a> {
    samples: &'a PosteriorSamples,
    /// `table[c] = [ln Pr(neg | c), ln Pr(pos | c)]`.
    table: Vec<[f64; 2]>,
    negative: Vec<f64>,
    draws: &'a OutcomeDraws,
}

impl<'a> MiEvaluator<'a> {
    fn new(
        samples: &'a PosteriorSamples,
        err: &TestErrorParams,
        max_pool: usize,
        draws: &'a OutcomeDraws,
    ) -> Self {
        Self {
            samples,
            table: PoolLikelihood::new(err).table(max_pool),
            negative: (0..=max_pool).map(|c| err.negative_probability(c)).collect(),
            draws,
        }
    }

    #[inline]
    fn outcome(&self, sample: usize, pool: usize, count: u16) -> bool {
        self.draws.get(sample, pool) >= self.negative[count as usize]
    }

    fn outcomes(&self, columns: &[&[u16]]) -> Vec<Vec<bool>> {
        columns
            .iter()
            .enumerate()
            .map(|(j, col)| {
                col.iter()
                    .enumerate()
                    .map(|(k, &c)| self.outcome(k, j, c))
                    .collect()
            })
            .collect()
    }

    /// Literal double sum over all sample pairs.
    fn pairwise(&self, columns: &[&[u16]]) -> MIEstimate {
        let l = self.samples.len();
        if columns.is_empty() {
            return zero_estimate(l);
        }
        let y = self.outcomes(columns);
        let ln_l = (l as f64).ln();
        let mut inner = vec![0.0; l];
        let mut terms = Vec::with_capacity(l);
        for k in 0..l {
            let own: f64 = columns
                .iter()
                .zip(&y)
                .map(|(col, yj)| self.table[col[k] as usize][yj[k] as usize])
                .sum();
            for (r, slot) in inner.iter_mut().enumerate() {
                *slot = columns
                    .iter()
                    .zip(&y)
                    .map(|(col, yj)| self.table[col[r] as usize][yj[k] as usize])
                    .sum();
            }
            let evidence = crate::model::log_sum_exp(&inner) - ln_l;
            terms.push(own - evidence);
        }
        summarize(&terms)
    }

    /// Same estimator with samples grouped by count vector and outcomes
    /// grouped by bit pattern.
    fn grouped(&self, columns: &[&[u16]], pool_sizes: &[usize]) -> MIEstimate {
        let l = self.samples.len();
        if columns.is_empty() {
            return zero_estimate(l);
        }
        let k_pools = columns.len();
        let span = mixed_radix(pool_sizes.iter().map(|&s| s as u64 + 1));
        let Some(span) = span.filter(|_| k_pools <= 64) else {
            return self.grouped_general(columns, pool_sizes);
        };

        let y_span = 1u64 << k_pools.min(63);
        if span.saturating_mul(y_span) > DENSE_KEY_LIMIT {
            return self.grouped_general(columns, pool_sizes);
        }
        let (span, y_span) = (span as usize, y_span as usize);

        // Every term depends on the sample only through (count vector,
        // outcome pattern), so one joint histogram carries the estimator.
        let uniforms: Vec<&[f64]> = (0..k_pools).map(|j| self.draws.pool(j)).collect();
        let mut hist = vec![0u32; span * y_span];
        for k in 0..l {
            let (mut ckey, mut ykey, mut mult) = (0usize, 0usize, 1usize);
            for (j, (col, &size)) in columns.iter().zip(pool_sizes).enumerate() {
                let c = col[k] as usize;
                ckey += c * mult;
                ykey |= ((uniforms[j][k] >= self.negative[c]) as usize) << j;
                mult *= size + 1;
            }
            hist[ckey * y_span + ykey] += 1;
        }

        let decode = |key: usize| -> Vec<usize> {
            let mut rest = key;
            pool_sizes
                .iter()
                .map(|&s| {
                    let c = rest % (s + 1);
                    rest /= s + 1;
                    c
                })
                .collect()
        };
        let log_lik = |counts: &[usize], y: usize| -> f64 {
            counts
                .iter()
                .enumerate()
                .map(|(j, &c)| self.table[c][y >> j & 1])
                .sum()
        };
        // Occupied count vectors with their log-weights.
        let reps: Vec<(usize, f64, Vec<usize>)> = (0..span)
            .filter_map(|c| {
                let w: u32 = hist[c * y_span..(c + 1) * y_span].iter().sum();
                (w > 0).then(|| (c, (w as f64).ln(), decode(c)))
            })
            .collect();
        let ln_l = (l as f64).ln();
        let mut buf = vec![0.0; reps.len()];
        let mut evidence = vec![f64::NAN; y_span];
        for (y, ev) in evidence.iter_mut().enumerate() {
            if !reps.iter().any(|(c, _, _)| hist[c * y_span + y] > 0) {
                continue;
            }
            for (slot, (_, lw, counts)) in buf.iter_mut().zip(&reps) {
                *slot = lw + log_lik(counts, y);
            }
            *ev = crate::model::log_sum_exp(&buf) - ln_l;
        }

        let cells: Vec<(f64, f64)> = reps
            .iter()
            .flat_map(|(c, _, counts)| {
                let (evidence, hist) = (&evidence, &hist);
                (0..y_span).filter_map(move |y| {
                    let n = hist[c * y_span + y];
                    (n > 0).then(|| (n as f64, log_lik(counts, y) - evidence[y]))
                })
            })
            .collect();
        let mean = cells.iter().map(|(n, t)| n * t).sum::<f64>() / l as f64;
        let var = cells.iter().map(|(n, t)| n * (t - mean).powi(2)).sum::<f64>() / (l as f64 - 1.0).max(1.0);
        MIEstimate {
            value: mean,
            n_samples: l,
            se_hint: (var / l as f64).sqrt(),
        }
    }

    /// Grouped evaluation for designs whose keys do not fit in a `u64`.
    fn grouped_general(&self, columns: &[&[u16]], pool_sizes: &[usize]) -> MIEstimate {
        let l = self.samples.len();
        if columns.is_empty() {
            return zero_estimate(l);
        }
        let k_pools = columns.len();
        let y = self.outcomes(columns);

        let count_groups = match mixed_radix(pool_sizes.iter().map(|&s| s as u64 + 1)) {
            Some(_) => {
                let radix: Vec<u64> = pool_sizes.iter().map(|&s| s as u64 + 1).collect();
                let keys = (0..l).map(|r| {
                    columns
                        .iter()
                        .zip(&radix)
                        .rev()
                        .fold(0u64, |acc, (col, &b)| acc * b + col[r] as u64)
                });
                group_u64(keys, mixed_radix(radix.iter().copied()).unwrap_or(u64::MAX))
            }
            None => group_hashed((0..l).map(|r| columns.iter().map(|c| c[r]).collect::<Vec<_>>())),
        };
        let outcome_groups = if k_pools <= 64 {
            let keys = (0..l).map(|k| {
                y.iter()
                    .enumerate()
                    .fold(0u64, |acc, (j, yj)| acc | (yj[k] as u64) << j)
            });
            let span = if k_pools < 64 { 1u64 << k_pools } else { u64::MAX };
            group_u64(keys, span)
        } else {
            group_hashed((0..l).map(|k| y.iter().map(|yj| yj[k]).collect::<Vec<_>>()))
        };

        let ln_weights: Vec<f64> = count_groups
            .sizes
            .iter()
            .map(|&w| (w as f64).ln())
            .collect();
        let ln_l = (l as f64).ln();
        let mut buf = vec![0.0; count_groups.first.len()];
        let evidence: Vec<f64> = outcome_groups
            .first
            .iter()
            .map(|&k| {
                for ((slot, &r), lw) in buf.iter_mut().zip(&count_groups.first).zip(&ln_weights) {
                    *slot = lw
                        + columns
                            .iter()
                            .zip(&y)
                            .map(|(col, yj)| self.table[col[r] as usize][yj[k] as usize])
                            .sum::<f64>();
                }
                crate::model::log_sum_exp(&buf) - ln_l
            })
            .collect();

        let terms: Vec<f64> = (0..l)
            .map(|k| {
                let own: f64 = columns
                    .iter()
                    .zip(&y)
                    .map(|(col, yj)| self.table[col[k] as usize][yj[k] as usize])
                    .sum();
                own - evidence[outcome_groups.ids[k] as usize]
            })
            .collect();
        summarize(&terms)
    }
}

fn zero_estimate(l: usize) -> MIEstimate {
    MIEstimate {
        value: 0.0,
        n_samples: l,
        se_hint: 0.0,
    }
}

fn summarize(terms: &[f64]) -> MIEstimate {
    let l = terms.len() as f64;
    let mean = terms.iter().sum::<f64>() / l;
    let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (l - 1.0).max(1.0);
    MIEstimate {
        value: mean,
        n_samples: terms.len(),
        se_hint: (var / l).sqrt(),
    }
}

/// Product of the radices if it fits in a `u64`.
fn mixed_radix(radices: impl Iterator<Item = u64>) -> Option<u64> {
    radices.fold(Some(1u64), |acc, b| acc.and_then(|a| a.checked_mul(b)))
}

struct Groups {
    /// Group id of every element.
    ids: Vec<u32>,
    /// Index of the first element of every group.
    first: Vec<usize>,
    sizes: Vec<usize>,
}

impl Groups {
    fn with_capacity(n: usize) -> Self {
        Self {
            ids: Vec::with_capacity(n),
            first: Vec::new(),
            sizes: Vec::new(),
        }
    }

    fn assign(&mut self, slot: &mut u32, index: usize) {
        if *slot == u32::MAX {
            *slot = self.first.len() as u32;
            self.first.push(index);
            self.sizes.push(0);
        }
        self.sizes[*slot as usize] += 1;
        self.ids.push(*slot);
    }
}

fn group_u64(keys: impl ExactSizeIterator<Item = u64>, span: u64) -> Groups {
    let mut groups = Groups::with_capacity(keys.len());
    if span <= DENSE_KEY_LIMIT {
        let mut table = vec![u32::MAX; span as usize];
        for (i, key) in keys.enumerate() {
            groups.assign(&mut table[key as usize], i);
        }
    } else {
        let mut table: HashMap<u64, u32> = HashMap::new();
        for (i, key) in keys.enumerate() {
            groups.assign(table.entry(key).or_insert(u32::MAX), i);
        }
    }
    groups
}

fn group_hashed<K: Hash + Eq>(keys: impl ExactSizeIterator<Item = K>) -> Groups {
    let mut groups = Groups::with_capacity(keys.len());
    let mut table: HashMap<K, u32> = HashMap::new();
    for (i, key) in keys.enumerate() {
        groups.assign(table.entry(key).or_insert(u32::MAX), i);
    }
    groups
}

fn check_estimator_input(samples: &PosteriorSamples, candidate: &Design) -> Result<()> {
    if samples.len() < 2 {
        return Err(DopeError::InvalidArgument(
            "mutual information needs at least 2 samples".into(),
        ));
    }
    candidate.validate(samples.n_individuals(), None)
}

fn max_pool_len(design: &Design) -> usize {
    design.pools().iter().map(Pool::len).max().unwrap_or(0)
}

/// Nested Monte-Carlo estimate of `I(θ; d | T)` by the literal `O(L^2 K)`
/// double sum.
pub fn estimate_mi<R: Rng + ?Sized>(
    candidate: &Design,
    samples: &PosteriorSamples,
    err: &TestErrorParams,
    rng: &mut R,
) -> Result<MIEstimate> {
    check_estimator_input(samples, candidate)?;
    let draws = OutcomeDraws::draw(rng, samples.len(), candidate.len());
    let counts = PoolCountMatrix::new(candidate, samples);
    Ok(MiEvaluator::new(samples, err, max_pool_len(candidate), &draws).pairwise(&counts.column_refs()))
}

/// The estimator of [`estimate_mi`] computed by grouping identical count
/// vectors and identical outcome patterns. Consumes the same random numbers,
/// so both functions agree up to floating-point summation order.
pub fn estimate_mi_grouped<R: Rng + ?Sized>(
    candidate: &Design,
    samples: &PosteriorSamples,
    err: &TestErrorParams,
    rng: &mut R,
) -> Result<MIEstimate> {
    check_estimator_input(samples, candidate)?;
    let draws = OutcomeDraws::draw(rng, samples.len(), candidate.len());
    let counts = PoolCountMatrix::new(candidate, samples);
    Ok(MiEvaluator::new(samples, err, max_pool_len(candidate), &draws)
        .grouped(&counts.column_refs(), &counts.pool_sizes))
}

/// Exact `I(θ; d | T)` by summing over every state and every outcome vector.
pub fn exact_mi(
    candidate: &Design,
    distribution: &ExactPosterior,
    err: &TestErrorParams,
) -> Result<f64> {
    let n = distribution.n_individuals();
    let k = candidate.len();
    if n > MAX_EXACT_MI_INDIVIDUALS || k > MAX_EXACT_MI_POOLS {
        return Err(DopeError::BudgetExceeded(format!(
            "exact MI needs N <= {MAX_EXACT_MI_INDIVIDUALS} and K <= {MAX_EXACT_MI_POOLS}, got N = {n}, K = {k}"
        )));
    }
    candidate.validate(n, None)?;
    let pool_masks: Vec<u32> = candidate
        .pools()
        .iter()
        .map(|p| p.members().iter().fold(0u32, |m, &h| m | 1 << h))
        .collect();
    let n_outcomes = 1usize << k;
    let mut marginal = vec![0.0; n_outcomes];
    let mut conditional_neg_entropy = 0.0;
    let mut lik = vec![0.0; n_outcomes];
    for (mask, &p) in distribution.probs().iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        lik[0] = 1.0;
        for (j, &pm) in pool_masks.iter().enumerate() {
            let q = err.negative_probability((mask as u32 & pm).count_ones() as usize);
            let half = 1usize << j;
            for d in 0..half {
                let base = lik[d];
                lik[d] = base * q;
                lik[d + half] = base * (1.0 - q);
            }
        }
        for (d, &l) in lik.iter().enumerate() {
            if l > 0.0 {
                conditional_neg_entropy += p * l * l.ln();
                marginal[d] += p * l;
            }
        }
    }
    let marginal_neg_entropy: f64 = marginal
        .iter()
        .filter(|&&m| m > 0.0)
        .map(|&m| m * m.ln())
        .sum();
    Ok((conditional_neg_entropy - marginal_neg_entropy).max(0.0))
}

/// Atomic neighborhood moves on a design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Move {
    /// Add an absent individual to a pool.
    Add,
    /// Remove a member from a pool with at least two members.
    Remove,
    /// Replace a member by an absent individual.
    Swap,
}

fn effective_cap(n: usize, cap: Option<usize>) -> usize {
    cap.map_or(n, |c| c.min(n)).max(1)
}

fn pick_absent<R: Rng + ?Sized>(pool: &Pool, n: usize, rng: &mut R) -> usize {
    let absent = n - pool.len();
    let mut target = rng.random_range(0..absent);
    for h in 0..n {
        if !pool.contains(h) {
            if target == 0 {
                return h;
            }
            target -= 1;
        }
    }
    unreachable!("pool has fewer members than the population")
}

/// Draws one legal move: the pool index, the replacement pool and the move
/// kind. `None` when every attempt was illegal.
fn propose_move<R: Rng + ?Sized>(
    design: &Design,
    n: usize,
    cap: Option<usize>,
    rng: &mut R,
) -> Option<(usize, Pool, Move)> {
    if design.is_empty() {
        return None;
    }
    let limit = effective_cap(n, cap);
    for _ in 0..PERTURB_ATTEMPTS {
        let kind = match rng.random_range(0..3) {
            0 => Move::Add,
            1 => Move::Remove,
            _ => Move::Swap,
        };
        let j = rng.random_range(0..design.len());
        let pool = &design.pools()[j];
        let legal = match kind {
            Move::Add => pool.len() < limit,
            Move::Remove => pool.len() >= 2,
            Move::Swap => pool.len() < n,
        };
        if !legal {
            continue;
        }
        let mut members = pool.members().to_vec();
        match kind {
            Move::Add => members.push(pick_absent(pool, n, rng)),
            Move::Remove => {
                members.remove(rng.random_range(0..members.len()));
            }
            Move::Swap => {
                let incoming = pick_absent(pool, n, rng);
                let out = rng.random_range(0..members.len());
                members[out] = incoming;
            }
        }
        let pool = Pool::new(members).expect("moves keep pools nonempty");
        return Some((j, pool, kind));
    }
    None
}

/// Applies one random legal move; also reports which move was applied.
pub fn perturb_with_move<R: Rng + ?Sized>(
    design: &Design,
    spec: &PopulationSpec,
    cap: Option<usize>,
    rng: &mut R,
) -> (Design, Option<Move>) {
    match propose_move(design, spec.n_individuals(), cap, rng) {
        Some((j, pool, kind)) => {
            let mut next = design.clone();
            next.pools_mut()[j] = pool;
            (next, Some(kind))
        }
        None => (design.clone(), None),
    }
}

/// Applies one random legal move under the default pool-size cap.
pub fn perturb<R: Rng + ?Sized>(design: &Design, spec: &PopulationSpec, rng: &mut R) -> Design {
    perturb_with_move(design, spec, Some(DEFAULT_POOL_CAP), rng).0
}

/// `k` pools, each of uniform size in `1..=min(N, cap)` with members drawn
/// without replacement.
pub fn random_design<R: Rng + ?Sized>(k: usize, n: usize, cap: Option<usize>, rng: &mut R) -> Design {
    let limit = effective_cap(n, cap);
    Design::new(
        (0..k)
            .map(|_| {
                let size = rng.random_range(1..=limit);
                Pool::new(index::sample(rng, n, size).into_vec()).expect("nonempty")
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub best_neighbor_value: f64,
    pub accepted: bool,
    pub pool_index: Option<usize>,
    pub kind: Option<Move>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartTrace {
    pub initial_value: f64,
    pub final_value: f64,
    pub steps: Vec<TraceStep>,
}

/// Per-restart record of a design search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub restarts: Vec<RestartTrace>,
    pub chosen_restart: usize,
}

impl SearchTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

#[derive(Debug, Clone)]
pub struct DesignSearch {
    pub design: Design,
    pub estimate: MIEstimate,
    pub trace: SearchTrace,
}

fn climb(
    evaluator: &MiEvaluator<'_>,
    k: usize,
    n: usize,
    hc: &HillClimbConfig,
    mut rng: StreamRng,
) -> (Design, Vec<Vec<u16>>, MIEstimate, RestartTrace) {
    let samples = evaluator.samples;
    let mut design = random_design(k, n, hc.pool_cap, &mut rng);
    let mut columns: Vec<Vec<u16>> = design
        .pools()
        .iter()
        .map(|p| pool_count_column(samples, p))
        .collect();
    let score = |cols: &[&[u16]], design_sizes: &[usize]| evaluator.grouped(cols, design_sizes);
    let sizes = |d: &Design| d.pools().iter().map(Pool::len).collect::<Vec<_>>();

    let refs: Vec<&[u16]> = columns.iter().map(Vec::as_slice).collect();
    let mut current = score(&refs, &sizes(&design));
    let mut trace = RestartTrace {
        initial_value: current.value,
        final_value: current.value,
        steps: Vec::new(),
    };

    for _ in 0..hc.max_steps {
        let mut best: Option<(usize, Pool, Vec<u16>, MIEstimate, Move)> = None;
        for _ in 0..hc.n_perturbations {
            let Some((j, pool, kind)) = propose_move(&design, n, hc.pool_cap, &mut rng) else {
                continue;
            };
            let column = pool_count_column(samples, &pool);
            let mut refs: Vec<&[u16]> = columns.iter().map(Vec::as_slice).collect();
            refs[j] = &column;
            let mut pool_sizes = sizes(&design);
            pool_sizes[j] = pool.len();
            let estimate = score(&refs, &pool_sizes);
            if best.as_ref().is_none_or(|b| estimate.value > b.3.value) {
                best = Some((j, pool, column, estimate, kind));
            }
        }
        match best {
            Some((j, pool, column, estimate, kind)) if estimate.value > current.value => {
                design.pools_mut()[j] = pool;
                columns[j] = column;
                current = estimate;
                trace.steps.push(TraceStep {
                    best_neighbor_value: estimate.value,
                    accepted: true,
                    pool_index: Some(j),
                    kind: Some(kind),
                });
            }
            other => {
                trace.steps.push(TraceStep {
                    best_neighbor_value: other.as_ref().map_or(f64::NAN, |b| b.3.value),
                    accepted: false,
                    pool_index: other.as_ref().map(|b| b.0),
                    kind: other.as_ref().map(|b| b.4),
                });
                break;
            }
        }
    }
    trace.final_value = current.value;
    (design, columns, current, trace)
}

/// Searches for the `k`-pool design with the largest estimated mutual
/// information over `samples`.
///
/// Every candidate of the search is scored with the same outcome draws, so
/// scores are directly comparable within a step, across steps and across
/// restarts. Restarts run in parallel with independent streams; the result
/// does not depend on the number of worker threads.
pub fn optimal_design(
    k: usize,
    samples: &PosteriorSamples,
    err: &TestErrorParams,
    spec: &PopulationSpec,
    hc: &HillClimbConfig,
) -> Result<DesignSearch> {
    if k == 0 {
        return Err(DopeError::validation("k_pools_per_step", "must be at least 1"));
    }
    hc.validate()?;
    let n = spec.n_individuals();
    if samples.n_individuals() != n {
        return Err(DopeError::InvalidArgument(
            "samples do not match the population".into(),
        ));
    }
    if samples.len() < 2 {
        return Err(DopeError::InvalidArgument(
            "design search needs at least 2 samples".into(),
        ));
    }
    let draws = OutcomeDraws::draw(&mut stream(hc.seed, &[0]), samples.len(), k);
    let max_pool = effective_cap(n, hc.pool_cap);
    let evaluator = MiEvaluator::new(samples, err, max_pool, &draws);

    let results: Vec<_> = (0..hc.n_restarts)
        .into_par_iter()
        .map(|r| climb(&evaluator, k, n, hc, stream(hc.seed, &[1, r as u64])))
        .collect();

    let mut chosen = 0;
    for (i, res) in results.iter().enumerate() {
        if res.2.value > results[chosen].2.value {
            chosen = i;
        }
    }
    let mut restarts = Vec::with_capacity(results.len());
    let mut best = None;
    for (i, (design, _, estimate, trace)) in results.into_iter().enumerate() {
        if i == chosen {
            best = Some((design, estimate));
        }
        restarts.push(trace);
    }
    let (design, estimate) = best.expect("at least one restart");
    Ok(DesignSearch {
        design,
        estimate,
        trace: SearchTrace {
            restarts,
            chosen_restart: chosen,
        },
    })
}

/// Scores a fixed design with the outcome draws an [`optimal_design`] call
/// with the same `seed` uses, so the value is comparable with the search's
/// own scores.
pub fn score_design(
    design: &Design,
    samples: &PosteriorSamples,
    err: &TestErrorParams,
    seed: u64,
) -> Result<MIEstimate> {
    check_estimator_input(samples, design)?;
    let draws = OutcomeDraws::draw(&mut stream(seed, &[0]), samples.len(), design.len());
    let counts = PoolCountMatrix::new(design, samples);
    Ok(MiEvaluator::new(samples, err, max_pool_len(design), &draws)
        .grouped(&counts.column_refs(), &counts.pool_sizes))
}
