//! Cluster prior, pooled-test likelihood and forward samplers.
//!
//! Every probability is handled in log space. A probability of exactly zero
//! is represented by `f64::NEG_INFINITY` and propagates through sums as
//! expected.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DopeError, Result};

/// Largest number of samples that may be mixed into one reaction.
pub const DEFAULT_POOL_CAP: usize = 32;

/// A connectivity group: one primary individual plus its secondaries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cluster {
    primary: usize,
    secondaries: Vec<usize>,
}

impl Cluster {
    pub fn new(primary: usize, secondaries: Vec<usize>) -> Result<Self> {
        let mut seen = secondaries.clone();
        seen.push(primary);
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(DopeError::validation(
                "clusters",
                format!("cluster with primary {primary} repeats an individual"),
            ));
        }
        Ok(Self {
            primary,
            secondaries,
        })
    }

    /// Builds a cluster from a member list whose first entry is the primary.
    pub fn from_members(members: &[usize]) -> Result<Self> {
        match members.split_first() {
            Some((&primary, rest)) => Self::new(primary, rest.to_vec()),
            None => Err(DopeError::validation("clusters", "empty cluster")),
        }
    }

    pub fn primary(&self) -> usize {
        self.primary
    }

    pub fn secondaries(&self) -> &[usize] {
        &self.secondaries
    }

    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.primary).chain(self.secondaries.iter().copied())
    }

    pub fn len(&self) -> usize {
        1 + self.secondaries.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Position of an individual inside the cluster structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Primary { cluster: usize },
    Secondary { cluster: usize, primary: usize },
}

/// A population partitioned into disjoint clusters covering `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PopulationSpec {
    n_individuals: usize,
    clusters: Vec<Cluster>,
    roles: Vec<Role>,
}

impl PopulationSpec {
    pub fn new(n_individuals: usize, clusters: Vec<Cluster>) -> Result<Self> {
        if n_individuals == 0 {
            return Err(DopeError::validation("n_individuals", "must be positive"));
        }
        let mut roles: Vec<Option<Role>> = vec![None; n_individuals];
        for (c, cluster) in clusters.iter().enumerate() {
            for (pos, h) in cluster.members().enumerate() {
                let slot = roles.get_mut(h).ok_or_else(|| {
                    DopeError::validation(
                        "clusters",
                        format!("individual {h} is outside 0..{n_individuals}"),
                    )
                })?;
                if slot.is_some() {
                    return Err(DopeError::validation(
                        "clusters",
                        format!("individual {h} belongs to more than one cluster"),
                    ));
                }
                *slot = Some(if pos == 0 {
                    Role::Primary { cluster: c }
                } else {
                    Role::Secondary {
                        cluster: c,
                        primary: cluster.primary,
                    }
                });
            }
        }
        let roles = roles
            .into_iter()
            .enumerate()
            .map(|(h, r)| {
                r.ok_or_else(|| {
                    DopeError::validation("clusters", format!("individual {h} is in no cluster"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n_individuals,
            clusters,
            roles,
        })
    }

    /// Builds a spec from member lists (first index of each list is the primary).
    pub fn from_member_lists(n_individuals: usize, lists: &[Vec<usize>]) -> Result<Self> {
        let clusters = lists
            .iter()
            .map(|m| Cluster::from_members(m))
            .collect::<Result<Vec<_>>>()?;
        Self::new(n_individuals, clusters)
    }

    /// Consecutive clusters of the given sizes: `[2, 3]` gives `{0,1}`, `{2,3,4}`.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        let mut next = 0;
        let mut lists = Vec::with_capacity(sizes.len());
        for &s in sizes {
            lists.push((next..next + s).collect::<Vec<_>>());
            next += s;
        }
        Self::from_member_lists(next, &lists)
    }

    /// Every individual in its own single-member cluster.
    pub fn independent(n: usize) -> Result<Self> {
        Self::from_sizes(&vec![1; n])
    }

    pub fn n_individuals(&self) -> usize {
        self.n_individuals
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn role(&self, individual: usize) -> Role {
        self.roles[individual]
    }

    pub fn member_lists(&self) -> Vec<Vec<usize>> {
        self.clusters.iter().map(|c| c.members().collect()).collect()
    }
}

fn check_probability(field: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(DopeError::validation(
            field,
            format!("{p} is not a probability in [0, 1]"),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorParams {
    pub p_primary: f64,
    pub p_secondary: f64,
    pub p_basal: f64,
}

impl PriorParams {
    pub fn new(p_primary: f64, p_secondary: f64, p_basal: f64) -> Result<Self> {
        let p = Self {
            p_primary,
            p_secondary,
            p_basal,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_probability("p_primary", self.p_primary)?;
        check_probability("p_secondary", self.p_secondary)?;
        check_probability("p_basal", self.p_basal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestErrorParams {
    /// Probability that amplification fails for one infected sample.
    pub p_false_negative: f64,
    /// Probability of an erroneous amplification in a pool.
    pub p_false_positive: f64,
}

impl TestErrorParams {
    pub fn new(p_false_negative: f64, p_false_positive: f64) -> Result<Self> {
        let e = Self {
            p_false_negative,
            p_false_positive,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn perfect() -> Self {
        Self {
            p_false_negative: 0.0,
            p_false_positive: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_probability("p_false_negative", self.p_false_negative)?;
        check_probability("p_false_positive", self.p_false_positive)
    }

    /// Probability of a negative result for a pool with `infected` infected members.
    pub fn negative_probability(&self, infected: usize) -> f64 {
        (1.0 - self.p_false_positive) * self.p_false_negative.powi(infected as i32)
    }
}

/// Binary infection vector over the population.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InfectionState(Vec<bool>);

impl InfectionState {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn healthy(n: usize) -> Self {
        Self(vec![false; n])
    }

    /// State whose bit `i` is bit `i` of `mask`.
    pub fn from_mask(mask: u64, n: usize) -> Self {
        Self((0..n).map(|i| mask >> i & 1 == 1).collect())
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn set(&mut self, i: usize, value: bool) {
        self.0[i] = value;
    }

    pub fn infected_count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if self.0.len() == n {
            Ok(())
        } else {
            Err(DopeError::InvalidArgument(format!(
                "state has {} entries, population has {n}",
                self.0.len()
            )))
        }
    }
}

/// A nonempty set of individuals tested in one reaction. Members are kept sorted.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Pool {
    members: Vec<usize>,
}

impl Pool {
    pub fn new(mut members: Vec<usize>) -> Result<Self> {
        members.sort_unstable();
        members.dedup();
        if members.is_empty() {
            return Err(DopeError::InvalidArgument("pool must be nonempty".into()));
        }
        Ok(Self { members })
    }

    pub fn singleton(i: usize) -> Self {
        Self { members: vec![i] }
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.members.binary_search(&i).is_ok()
    }

    /// Checks membership bounds and, when `cap` is set, the pool-size cap.
    pub fn validate(&self, n_individuals: usize, cap: Option<usize>) -> Result<()> {
        if let Some(&last) = self.members.last() {
            if last >= n_individuals {
                return Err(DopeError::InvalidArgument(format!(
                    "pool member {last} is outside 0..{n_individuals}"
                )));
            }
        }
        match cap {
            Some(cap) if self.members.len() > cap => Err(DopeError::InvalidArgument(format!(
                "pool of {} samples exceeds the cap of {cap}",
                self.members.len()
            ))),
            _ => Ok(()),
        }
    }

    pub fn infected_count(&self, state: &InfectionState) -> usize {
        self.members.iter().filter(|&&h| state.get(h)).count()
    }
}

impl TryFrom<Vec<usize>> for Pool {
    type Error = DopeError;

    fn try_from(members: Vec<usize>) -> Result<Self> {
        Pool::new(members)
    }
}

impl From<Pool> for Vec<usize> {
    fn from(pool: Pool) -> Self {
        pool.members
    }
}

/// Ordered collection of pools. Repeated pools are allowed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Design {
    pools: Vec<Pool>,
}

impl Design {
    pub fn new(pools: Vec<Pool>) -> Self {
        Self { pools }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_lists(lists: &[Vec<usize>]) -> Result<Self> {
        Ok(Self::new(
            lists
                .iter()
                .map(|l| Pool::new(l.clone()))
                .collect::<Result<_>>()?,
        ))
    }

    pub fn pools(&self) -> &[Pool] {
        &self.pools
    }

    pub fn pools_mut(&mut self) -> &mut [Pool] {
        &mut self.pools
    }

    pub fn len(&self) -> usize {
        self.pools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pools.is_empty()
    }

    pub fn push(&mut self, pool: Pool) {
        self.pools.push(pool);
    }

    pub fn extend(&mut self, other: &Design) {
        self.pools.extend(other.pools.iter().cloned());
    }

    pub fn validate(&self, n_individuals: usize, cap: Option<usize>) -> Result<()> {
        self.pools
            .iter()
            .try_for_each(|p| p.validate(n_individuals, cap))
    }

    pub fn to_lists(&self) -> Vec<Vec<usize>> {
        self.pools.iter().map(|p| p.members.clone()).collect()
    }
}

/// Observed pooled results; `true` is a positive reaction.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TestData {
    results: Vec<bool>,
}

impl TestData {
    pub fn new(results: Vec<bool>) -> Self {
        Self { results }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn results(&self) -> &[bool] {
        &self.results
    }

    pub fn len(&self) -> usize {
        self.results.len()
    }

    pub fn is_empty(&self) -> bool {
        self.results.is_empty()
    }

    pub fn extend(&mut self, other: &TestData) {
        self.results.extend_from_slice(&other.results);
    }

    /// Data vector whose bit `k` is bit `k` of `mask`.
    pub fn from_mask(mask: u64, len: usize) -> Self {
        Self::new((0..len).map(|k| mask >> k & 1 == 1).collect())
    }
}

/// `k * ln(p)` with the convention `0 * ln(0) = 0`.
#[inline]
pub(crate) fn mul_ln(k: usize, ln_p: f64) -> f64 {
    if k == 0 {
        0.0
    } else {
        k as f64 * ln_p
    }
}

/// Log-sum-exp of a slice; `-inf` for an empty slice or all `-inf` terms.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Precomputed logarithms of the prior factors.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PriorLogs {
    pub ln_pp: f64,
    pub ln_not_pp: f64,
    pub ln_ps: f64,
    pub ln_not_ps: f64,
    pub ln_pb: f64,
    pub ln_not_pb: f64,
}

impl PriorLogs {
    pub fn new(p: &PriorParams) -> Self {
        Self {
            ln_pp: p.p_primary.ln(),
            ln_not_pp: (-p.p_primary).ln_1p(),
            ln_ps: p.p_secondary.ln(),
            ln_not_ps: (-p.p_secondary).ln_1p(),
            ln_pb: p.p_basal.ln(),
            ln_not_pb: (-p.p_basal).ln_1p(),
        }
    }

    /// Log-probability of one cluster given its primary bit and the number of
    /// infected among `n_secondaries` secondaries.
    #[inline]
    pub fn cluster(&self, primary: bool, infected: usize, n_secondaries: usize) -> f64 {
        let healthy = n_secondaries - infected;
        if primary {
            self.ln_pp + mul_ln(infected, self.ln_ps) + mul_ln(healthy, self.ln_not_ps)
        } else {
            self.ln_not_pp + mul_ln(infected, self.ln_pb) + mul_ln(healthy, self.ln_not_pb)
        }
    }
}

/// Log-likelihood of one pooled outcome as a function of the infected count.
#[derive(Debug, Clone)]
pub struct PoolLikelihood {
    ln_not_fp: f64,
    ln_fn: f64,
}

impl PoolLikelihood {
    pub fn new(err: &TestErrorParams) -> Self {
        Self {
            ln_not_fp: (-err.p_false_positive).ln_1p(),
            ln_fn: err.p_false_negative.ln(),
        }
    }

    /// `ln Pr(negative | c infected)`.
    #[inline]
    pub fn ln_negative(&self, infected: usize) -> f64 {
        self.ln_not_fp + mul_ln(infected, self.ln_fn)
    }

    /// `ln Pr(positive | c infected)`, the log of the complement.
    #[inline]
    pub fn ln_positive(&self, infected: usize) -> f64 {
        let ln_neg = self.ln_negative(infected);
        if ln_neg == f64::NEG_INFINITY {
            0.0
        } else {
            // ln(1 - e^x), accurate for x near 0 and for x very negative.
            if ln_neg > -std::f64::consts::LN_2 {
                (-ln_neg.exp_m1()).ln()
            } else {
                (-ln_neg.exp()).ln_1p()
            }
        }
    }

    #[inline]
    pub fn ln_result(&self, positive: bool, infected: usize) -> f64 {
        if positive {
            self.ln_positive(infected)
        } else {
            self.ln_negative(infected)
        }
    }

    /// Table of `(ln_negative(c), ln_positive(c))` for `c = 0..=max_count`.
    pub fn table(&self, max_count: usize) -> Vec<[f64; 2]> {
        (0..=max_count)
            .map(|c| [self.ln_negative(c), self.ln_positive(c)])
            .collect()
    }
}

/// Log prior probability of a full infection state.
pub fn prior_log_prob(
    spec: &PopulationSpec,
    prior: &PriorParams,
    state: &InfectionState,
) -> Result<f64> {
    state.check_len(spec.n_individuals())?;
    let logs = PriorLogs::new(prior);
    Ok(spec
        .clusters()
        .iter()
        .map(|c| {
            let infected = c.secondaries().iter().filter(|&&h| state.get(h)).count();
            logs.cluster(state.get(c.primary()), infected, c.secondaries().len())
        })
        .sum())
}

/// Draws one state from the cluster prior.
pub fn sample_state<R: Rng + ?Sized>(
    spec: &PopulationSpec,
    prior: &PriorParams,
    rng: &mut R,
) -> InfectionState {
    let mut bits = vec![false; spec.n_individuals()];
    for cluster in spec.clusters() {
        let primary = rng.random::<f64>() < prior.p_primary;
        bits[cluster.primary()] = primary;
        let p = if primary {
            prior.p_secondary
        } else {
            prior.p_basal
        };
        for &h in cluster.secondaries() {
            bits[h] = rng.random::<f64>() < p;
        }
    }
    InfectionState(bits)
}

/// Draws `count` i.i.d. states from the cluster prior.
pub fn sample_prior<R: Rng + ?Sized>(
    spec: &PopulationSpec,
    prior: &PriorParams,
    rng: &mut R,
    count: usize,
) -> Result<Vec<InfectionState>> {
    if count == 0 {
        return Err(DopeError::InvalidArgument(
            "sample count must be at least 1".into(),
        ));
    }
    Ok((0..count).map(|_| sample_state(spec, prior, rng)).collect())
}

/// Fraction of infected individuals expected under the prior.
pub fn expected_prevalence(spec: &PopulationSpec, prior: &PriorParams) -> f64 {
    let per_secondary =
        prior.p_primary * prior.p_secondary + (1.0 - prior.p_primary) * prior.p_basal;
    let total: f64 = spec
        .clusters()
        .iter()
        .map(|c| prior.p_primary + c.secondaries().len() as f64 * per_secondary)
        .sum();
    total / spec.n_individuals() as f64
}

pub fn pool_log_likelihood(
    pool: &Pool,
    err: &TestErrorParams,
    state: &InfectionState,
    result: bool,
) -> f64 {
    PoolLikelihood::new(err).ln_result(result, pool.infected_count(state))
}

pub fn design_log_likelihood(
    design: &Design,
    err: &TestErrorParams,
    state: &InfectionState,
    data: &TestData,
) -> Result<f64> {
    if design.len() != data.len() {
        return Err(DopeError::InvalidArgument(format!(
            "design has {} pools but data has {} results",
            design.len(),
            data.len()
        )));
    }
    let lik = PoolLikelihood::new(err);
    Ok(design
        .pools()
        .iter()
        .zip(data.results())
        .map(|(pool, &d)| lik.ln_result(d, pool.infected_count(state)))
        .sum())
}

/// Simulates pooled outcomes for `design` under the true `state`.
pub fn sample_data<R: Rng + ?Sized>(
    design: &Design,
    err: &TestErrorParams,
    state: &InfectionState,
    rng: &mut R,
) -> TestData {
    TestData::new(
        design
            .pools()
            .iter()
            .map(|pool| {
                let negative = err.negative_probability(pool.infected_count(state));
                rng.random::<f64>() >= negative
            })
            .collect(),
    )
}
