//! The sequential DOPE loop: propose `K` pools, observe their results,
//! update the posterior and repeat until every marginal leaves the decision
//! interval.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::design::{optimal_design, DesignSearch, HillClimbConfig};
use crate::error::{DopeError, Result};
use crate::model::{sample_data, Design, InfectionState, PopulationSpec, PriorParams, TestData, TestErrorParams};
use crate::posterior::{draw_posterior, posterior_marginals, GibbsConfig, PosteriorSamples};
use crate::rng::{derive_seed, stream};
use crate::transcript::TranscriptRecord;

const GIBBS_STREAM: u64 = 1;
const DESIGN_STREAM: u64 = 2;
const EXECUTOR_STREAM: u64 = 3;

/// Band of marginals considered undecided. The empty interval never holds
/// any marginal, which gives nonsequential mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Option<[f64; 2]>", into = "Option<[f64; 2]>")]
pub struct DecisionInterval(Option<(f64, f64)>);

impl DecisionInterval {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lower) || !(0.0..=1.0).contains(&upper) || lower >= upper {
            return Err(DopeError::validation(
                "interval",
                format!("need 0 <= lower < upper <= 1, got [{lower}, {upper}]"),
            ));
        }
        Ok(Self(Some((lower, upper))))
    }

    pub fn empty() -> Self {
        Self(None)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_none()
    }

    pub fn bounds(&self) -> Option<(f64, f64)> {
        self.0
    }

    pub fn contains(&self, p: f64) -> bool {
        self.0.is_some_and(|(a, b)| a <= p && p <= b)
    }

    /// The default grid: lower bounds 0.01..=0.15 by 0.01 crossed with upper
    /// bounds 0.30..=0.95 by 0.05.
    pub fn default_grid() -> Vec<Self> {
        let mut grid = Vec::new();
        for a in 1..=15 {
            for b in 6..=19 {
                grid.push(Self(Some((a as f64 / 100.0, b as f64 * 5.0 / 100.0))));
            }
        }
        grid
    }
}

impl TryFrom<Option<[f64; 2]>> for DecisionInterval {
    type Error = DopeError;

    fn try_from(v: Option<[f64; 2]>) -> Result<Self> {
        match v {
            None => Ok(Self::empty()),
            Some([a, b]) => Self::new(a, b),
        }
    }
}

impl From<DecisionInterval> for Option<[f64; 2]> {
    fn from(i: DecisionInterval) -> Self {
        i.0.map(|(a, b)| [a, b])
    }
}

impl std::fmt::Display for DecisionInterval {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.0 {
            None => write!(f, "empty"),
            Some((a, b)) => write!(f, "[{a},{b}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DopeConfig {
    pub k_pools_per_step: usize,
    pub interval: DecisionInterval,
    pub gibbs: GibbsConfig,
    pub hill_climb: HillClimbConfig,
    /// Defaults to `ceil(10 N / K)`.
    pub max_rounds: Option<usize>,
    pub seed: u64,
}

impl Default for DopeConfig {
    fn default() -> Self {
        Self {
            k_pools_per_step: 1,
            interval: DecisionInterval::new(0.05, 0.5).expect("valid"),
            gibbs: GibbsConfig::default(),
            hill_climb: HillClimbConfig::default(),
            max_rounds: None,
            seed: 0,
        }
    }
}

impl DopeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_pools_per_step == 0 {
            return Err(DopeError::validation("k_pools_per_step", "must be at least 1"));
        }
        if self.max_rounds == Some(0) {
            return Err(DopeError::validation("max_rounds", "must be at least 1"));
        }
        self.gibbs.validate()?;
        self.hill_climb.validate()
    }

    pub fn max_rounds_for(&self, n_individuals: usize) -> usize {
        self.max_rounds
            .unwrap_or_else(|| (10 * n_individuals).div_ceil(self.k_pools_per_step).max(1))
    }
}

/// Accumulated experiment and its current posterior summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionState {
    pub design: Design,
    pub data: TestData,
    pub marginals: Vec<f64>,
    /// Completed rounds.
    pub round: usize,
    pub stopped: bool,
    /// Stopped by the round cap with marginals still inside the interval.
    pub truncated: bool,
    pub classification: Option<Vec<bool>>,
    #[serde(skip)]
    samples: Option<Arc<PosteriorSamples>>,
}

impl PartialEq for SessionState {
    fn eq(&self, other: &Self) -> bool {
        self.design == other.design
            && self.data == other.data
            && self.marginals == other.marginals
            && self.round == other.round
            && self.stopped == other.stopped
            && self.truncated == other.truncated
            && self.classification == other.classification
    }
}

impl SessionState {
    pub fn tests_used(&self) -> usize {
        self.design.len()
    }

    /// Posterior samples behind the current marginals, if still cached.
    pub fn samples(&self) -> Option<&PosteriorSamples> {
        self.samples.as_deref()
    }
}

/// `true` iff no marginal lies inside the interval.
pub fn should_stop(marginals: &[f64], interval: &DecisionInterval) -> bool {
    !marginals.iter().any(|&p| interval.contains(p))
}

/// Infected iff the marginal is strictly above one half.
pub fn classify(marginals: &[f64]) -> Vec<bool> {
    marginals.iter().map(|&p| p > 0.5).collect()
}

/// Answers a design with one result per pool.
pub trait TestExecutor {
    fn execute(&mut self, round: usize, design: &Design) -> Result<TestData>;
}

/// Simulated laboratory with a hidden true state.
pub struct SimulationExecutor {
    truth: InfectionState,
    err: TestErrorParams,
    seed: u64,
}

impl SimulationExecutor {
    pub fn new(truth: InfectionState, err: TestErrorParams, seed: u64) -> Self {
        Self { truth, err, seed }
    }

    pub fn truth(&self) -> &InfectionState {
        &self.truth
    }
}

impl TestExecutor for SimulationExecutor {
    fn execute(&mut self, round: usize, design: &Design) -> Result<TestData> {
        let mut rng = stream(self.seed, &[EXECUTOR_STREAM, round as u64]);
        Ok(sample_data(design, &self.err, &self.truth, &mut rng))
    }
}

#[derive(Debug, Clone)]
pub struct DopeOutcome {
    pub classification: Vec<bool>,
    pub tests_used: usize,
    pub rounds: usize,
    pub truncated: bool,
    pub state: SessionState,
    pub transcript: Vec<TranscriptRecord>,
}

/// Marginals after every round of an uncapped run; see
/// [`DopeEngine::run_trajectory`].
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// `marginals[r]` holds the marginals after `r` completed rounds.
    pub marginals: Vec<Vec<f64>>,
    pub k_pools_per_step: usize,
    /// All pools tested, `k_pools_per_step` per round.
    pub design: Design,
    pub data: TestData,
}

impl Trajectory {
    /// The round at which a run with `interval` and `max_rounds` stops, with
    /// its truncation flag. `None` if the trajectory is too short to tell.
    pub fn stop_round(&self, interval: &DecisionInterval, max_rounds: usize) -> Option<(usize, bool)> {
        for r in 1..self.marginals.len() {
            if should_stop(&self.marginals[r], interval) {
                return Some((r, false));
            }
            if r >= max_rounds {
                return Some((r, true));
            }
        }
        None
    }
}

/// Runs the loop for one population under one configuration.
#[derive(Debug, Clone)]
pub struct DopeEngine {
    spec: PopulationSpec,
    prior: PriorParams,
    err: TestErrorParams,
    config: DopeConfig,
}

impl DopeEngine {
    pub fn new(spec: PopulationSpec, prior: PriorParams, err: TestErrorParams, config: DopeConfig) -> Result<Self> {
        prior.validate()?;
        err.validate()?;
        config.validate()?;
        Ok(Self {
            spec,
            prior,
            err,
            config,
        })
    }

    pub fn spec(&self) -> &PopulationSpec {
        &self.spec
    }

    pub fn prior(&self) -> &PriorParams {
        &self.prior
    }

    pub fn err(&self) -> &TestErrorParams {
        &self.err
    }

    pub fn config(&self) -> &DopeConfig {
        &self.config
    }

    pub fn max_rounds(&self) -> usize {
        self.config.max_rounds_for(self.spec.n_individuals())
    }

    fn samples_for(&self, design: &Design, data: &TestData, round: usize) -> Result<PosteriorSamples> {
        let gibbs = GibbsConfig {
            seed: derive_seed(self.config.seed, &[GIBBS_STREAM, round as u64]),
            ..self.config.gibbs
        };
        draw_posterior(&gibbs, design, data, &self.spec, &self.prior, &self.err)
    }

    /// Session before any test: prior marginals, round zero.
    pub fn initial_state(&self) -> Result<SessionState> {
        let samples = self.samples_for(&Design::empty(), &TestData::empty(), 0)?;
        Ok(SessionState {
            design: Design::empty(),
            data: TestData::empty(),
            marginals: posterior_marginals(&samples),
            round: 0,
            stopped: false,
            truncated: false,
            classification: None,
            samples: Some(Arc::new(samples)),
        })
    }

    /// Next `K` pools for the session. Refreshes the marginals from the same
    /// samples the design search uses.
    pub fn propose(&self, state: &mut SessionState) -> Result<DesignSearch> {
        if state.stopped {
            return Err(DopeError::InvalidArgument("session has stopped".into()));
        }
        let samples = match &state.samples {
            Some(s) => Arc::clone(s),
            None => {
                let s = Arc::new(self.samples_for(&state.design, &state.data, state.round)?);
                state.samples = Some(Arc::clone(&s));
                s
            }
        };
        state.marginals = posterior_marginals(&samples);
        let hc = HillClimbConfig {
            seed: derive_seed(self.config.seed, &[DESIGN_STREAM, state.round as u64]),
            ..self.config.hill_climb
        };
        optimal_design(self.config.k_pools_per_step, &samples, &self.err, &self.spec, &hc)
    }

    /// Appends one round of results without applying the stopping rule.
    pub fn ingest_unchecked(&self, state: &SessionState, new_design: &Design, new_data: &TestData) -> Result<SessionState> {
        if new_design.len() != new_data.len() {
            return Err(DopeError::InvalidArgument(format!(
                "{} pools but {} results",
                new_design.len(),
                new_data.len()
            )));
        }
        new_design.validate(self.spec.n_individuals(), None)?;
        if new_design.is_empty() {
            return Ok(state.clone());
        }
        let mut design = state.design.clone();
        design.extend(new_design);
        let mut data = state.data.clone();
        data.extend(new_data);
        let round = state.round + 1;
        let samples = self.samples_for(&design, &data, round)?;
        Ok(SessionState {
            design,
            data,
            marginals: posterior_marginals(&samples),
            round,
            stopped: false,
            truncated: false,
            classification: None,
            samples: Some(Arc::new(samples)),
        })
    }

    /// Appends one round of results, refreshes the marginals and applies the
    /// stopping rule and round cap.
    pub fn ingest(&self, state: &SessionState, new_design: &Design, new_data: &TestData) -> Result<SessionState> {
        if state.stopped {
            return Err(DopeError::InvalidArgument("session has stopped".into()));
        }
        if new_design.is_empty() && new_data.is_empty() {
            return Ok(state.clone());
        }
        let mut next = self.ingest_unchecked(state, new_design, new_data)?;
        if should_stop(&next.marginals, &self.config.interval) {
            next.stopped = true;
        } else if next.round >= self.max_rounds() {
            next.stopped = true;
            next.truncated = true;
        }
        if next.stopped {
            next.classification = Some(classify(&next.marginals));
        }
        Ok(next)
    }

    /// Ends the session early and classifies from the current marginals.
    pub fn abort(&self, state: &SessionState) -> SessionState {
        let mut next = state.clone();
        next.stopped = true;
        next.classification = Some(classify(&next.marginals));
        next
    }

    /// Runs the full loop against `executor`.
    pub fn run<E: TestExecutor + ?Sized>(&self, executor: &mut E) -> Result<DopeOutcome> {
        let mut state = self.initial_state()?;
        let mut transcript = Vec::new();
        while !state.stopped {
            let search = self.propose(&mut state)?;
            let data = executor.execute(state.round, &search.design)?;
            state = self.ingest(&state, &search.design, &data)?;
            transcript.push(TranscriptRecord::new(
                state.round,
                &search.design,
                &data,
                state.marginals.clone(),
                state.stopped,
            ));
        }
        Ok(DopeOutcome {
            classification: state.classification.clone().expect("stopped sessions classify"),
            tests_used: state.tests_used(),
            rounds: state.round,
            truncated: state.truncated,
            state,
            transcript,
        })
    }

    /// Runs the loop ignoring the configured interval until `done` holds for
    /// the marginals after a round, or `max_rounds` rounds have run.
    ///
    /// Round `r` draws its randomness from streams keyed by `r` only, so the
    /// first `r` rounds of this trajectory coincide with those of [`run`]
    /// under any interval.
    ///
    /// [`run`]: DopeEngine::run
    pub fn run_trajectory<E, F>(&self, executor: &mut E, max_rounds: usize, mut done: F) -> Result<Trajectory>
    where
        E: TestExecutor + ?Sized,
        F: FnMut(&[f64]) -> bool,
    {
        let mut state = self.initial_state()?;
        let mut marginals = vec![state.marginals.clone()];
        while state.round < max_rounds {
            let search = self.propose(&mut state)?;
            let data = executor.execute(state.round, &search.design)?;
            state = self.ingest_unchecked(&state, &search.design, &data)?;
            marginals.push(state.marginals.clone());
            if done(&state.marginals) {
                break;
            }
        }
        Ok(Trajectory {
            marginals,
            k_pools_per_step: self.config.k_pools_per_step,
            design: state.design,
            data: state.data,
        })
    }
}

/// Draws a hidden population state and runs DOPE on it.
pub fn simulate_population<R: Rng + ?Sized>(engine: &DopeEngine, executor_seed: u64, rng: &mut R) -> Result<(InfectionState, DopeOutcome)> {
    let truth = crate::model::sample_state(engine.spec(), engine.prior(), rng);
    let mut exec = SimulationExecutor::new(truth.clone(), *engine.err(), executor_seed);
    Ok((truth, engine.run(&mut exec)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_engine(interval: DecisionInterval, k: usize) -> DopeEngine {
        let spec = PopulationSpec::independent(2).unwrap();
        let prior = PriorParams::new(0.5, 0.5, 0.5).unwrap();
        let cfg = DopeConfig {
            k_pools_per_step: k,
            interval,
            gibbs: GibbsConfig {
                n_samples: 2000,
                burn_in: 500,
                ..Default::default()
            },
            hill_climb: HillClimbConfig {
                n_restarts: 3,
                ..Default::default()
            },
            max_rounds: None,
            seed: 7,
        };
        DopeEngine::new(spec, prior, TestErrorParams::perfect(), cfg).unwrap()
    }

    #[test]
    fn stopping_rule_examples() {
        let i = DecisionInterval::new(0.1, 0.9).unwrap();
        assert!(should_stop(&[0.05, 0.95], &i));
        assert!(!should_stop(&[0.5, 0.95], &i));
        assert!(should_stop(&[0.5, 0.2], &DecisionInterval::empty()));
        assert!(i.contains(0.1) && i.contains(0.9));
    }

    #[test]
    fn classification_examples() {
        assert_eq!(classify(&[0.2, 0.8]), vec![false, true]);
        assert_eq!(classify(&[0.5]), vec![false]);
        assert_eq!(classify(&[1.0, 1.0]), vec![true, true]);
    }

    #[test]
    fn interval_validation_and_serde() {
        assert!(DecisionInterval::new(0.2, 0.1).is_err());
        assert!(DecisionInterval::new(0.2, 0.2).is_err());
        assert!(DecisionInterval::new(-0.1, 0.5).is_err());
        let i = DecisionInterval::new(0.01, 0.95).unwrap();
        assert_eq!(serde_json::to_string(&i).unwrap(), "[0.01,0.95]");
        assert_eq!(serde_json::to_string(&DecisionInterval::empty()).unwrap(), "null");
        let back: DecisionInterval = serde_json::from_str("[0.01,0.95]").unwrap();
        assert_eq!(back, i);
        assert!(serde_json::from_str::<DecisionInterval>("[0.5,0.4]").is_err());
        assert_eq!(DecisionInterval::default_grid().len(), 15 * 14);
    }

    #[test]
    fn default_round_cap() {
        let cfg = DopeConfig {
            k_pools_per_step: 3,
            ..Default::default()
        };
        assert_eq!(cfg.max_rounds_for(10), 34);
        assert_eq!(DopeConfig::default().max_rounds_for(10), 100);
    }

    #[test]
    fn nonsequential_mode_runs_one_round() {
        let engine = small_engine(DecisionInterval::empty(), 3);
        let truth = InfectionState::new(vec![true, false]);
        let mut exec = SimulationExecutor::new(truth, TestErrorParams::perfect(), 1);
        let out = engine.run(&mut exec).unwrap();
        assert_eq!((out.rounds, out.tests_used), (1, 3));
        assert!(!out.truncated);
    }

    #[test]
    fn zero_pool_ingest_is_identity() {
        let engine = small_engine(DecisionInterval::new(0.01, 0.99).unwrap(), 1);
        let state = engine.initial_state().unwrap();
        let next = engine.ingest(&state, &Design::empty(), &TestData::empty()).unwrap();
        assert_eq!(next, state);
    }

    #[test]
    fn ingest_rejects_length_mismatch() {
        let engine = small_engine(DecisionInterval::new(0.01, 0.99).unwrap(), 1);
        let state = engine.initial_state().unwrap();
        let d = Design::from_lists(&[vec![0]]).unwrap();
        assert!(matches!(
            engine.ingest(&state, &d, &TestData::new(vec![true, false])),
            Err(DopeError::InvalidArgument(_))
        ));
    }

    #[test]
    fn trajectory_stop_round() {
        let t = Trajectory {
            marginals: vec![vec![0.5], vec![0.5], vec![0.95], vec![0.999]],
            k_pools_per_step: 1,
            design: Design::empty(),
            data: TestData::empty(),
        };
        let i = DecisionInterval::new(0.1, 0.9).unwrap();
        assert_eq!(t.stop_round(&i, 10), Some((2, false)));
        assert_eq!(t.stop_round(&i, 1), Some((1, true)));
        assert_eq!(t.stop_round(&DecisionInterval::empty(), 10), Some((1, false)));
        let j = DecisionInterval::new(0.1, 0.9999).unwrap();
        assert_eq!(t.stop_round(&j, 10), None);
    }
}
