//! TOML configuration files.
//!
//! A model file holds the population and its parameters:
//!
//! ```toml
//! n_individuals = 5
//! clusters = [[0, 1], [2, 3, 4]]
//! p_primary = 0.2
//! p_secondary = 0.2
//! p_basal = 0.01
//! p_false_negative = 0.2
//! p_false_positive = 0.01
//! ```
//!
//! The first index of every cluster is its primary member. Scenario files add
//! replicate counts, strategies, a decision-interval grid and an optional
//! connectivity sweep on top of the same keys.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{Baseline, DorfmanConfig, MatrixConfig, RecursiveConfig};
use crate::dope::DecisionInterval;
use crate::error::{DopeError, Result};
use crate::model::{PopulationSpec, PriorParams, TestErrorParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_individuals: usize,
    pub clusters: Vec<Vec<usize>>,
    pub p_primary: f64,
    pub p_secondary: f64,
    pub p_basal: f64,
    pub p_false_negative: f64,
    pub p_false_positive: f64,
}

impl ModelConfig {
    pub fn from_parts(spec: &PopulationSpec, prior: &PriorParams, err: &TestErrorParams) -> Self {
        Self {
            n_individuals: spec.n_individuals(),
            clusters: spec.member_lists(),
            p_primary: prior.p_primary,
            p_secondary: prior.p_secondary,
            p_basal: prior.p_basal,
            p_false_negative: err.p_false_negative,
            p_false_positive: err.p_false_positive,
        }
    }

    pub fn prior(&self) -> Result<PriorParams> {
        PriorParams::new(self.p_primary, self.p_secondary, self.p_basal)
    }

    pub fn err(&self) -> Result<TestErrorParams> {
        TestErrorParams::new(self.p_false_negative, self.p_false_positive)
    }

    pub fn spec(&self) -> Result<PopulationSpec> {
        PopulationSpec::from_member_lists(self.n_individuals, &self.clusters)
    }

    /// Validates every field and builds the model objects.
    pub fn build(&self) -> Result<(PopulationSpec, PriorParams, TestErrorParams)> {
        let prior = self.prior()?;
        let err = self.err()?;
        Ok((self.spec()?, prior, err))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DopeError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }
}

/// One strategy entry of a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategyEntry {
    Dope {
        #[serde(default = "one")]
        k_pools_per_step: usize,
        #[serde(default)]
        burn_in: Option<usize>,
        #[serde(default)]
        max_thinning: Option<usize>,
        #[serde(default)]
        n_restarts: Option<usize>,
        #[serde(default)]
        n_perturbations: Option<usize>,
        #[serde(default)]
        max_steps: Option<usize>,
        #[serde(default)]
        max_rounds: Option<usize>,
    },
    Dorfman {
        pool_size: usize,
    },
    Recursive {
        initial_pool_size: usize,
    },
    Matrix {
        rows: usize,
        cols: usize,
    },
    Separate,
}

fn one() -> usize {
    1
}

impl StrategyEntry {
    pub fn dope(k_pools_per_step: usize) -> Self {
        StrategyEntry::Dope {
            k_pools_per_step,
            burn_in: None,
            max_thinning: None,
            n_restarts: None,
            n_perturbations: None,
            max_steps: None,
            max_rounds: None,
        }
    }

    /// The baseline this entry describes, or `None` for DOPE.
    pub fn baseline(&self) -> Result<Option<Baseline>> {
        Ok(match *self {
            StrategyEntry::Dope { .. } => None,
            StrategyEntry::Dorfman { pool_size } => Some(Baseline::Dorfman(DorfmanConfig::new(pool_size)?)),
            StrategyEntry::Recursive { initial_pool_size } => {
                Some(Baseline::Recursive(RecursiveConfig::new(initial_pool_size)?))
            }
            StrategyEntry::Matrix { rows, cols } => Some(Baseline::Matrix(MatrixConfig::new(rows, cols)?)),
            StrategyEntry::Separate => Some(Baseline::Separate),
        })
    }
}

/// Decision intervals as the cross product of lower and upper bounds, plus
/// optional explicit extra intervals (`[]` for the empty interval).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntervalGridEntry {
    #[serde(default)]
    pub lower: Vec<f64>,
    #[serde(default)]
    pub upper: Vec<f64>,
    #[serde(default)]
    pub extra: Vec<Vec<f64>>,
}

impl IntervalGridEntry {
    pub fn intervals(&self) -> Result<Vec<DecisionInterval>> {
        let mut grid = Vec::new();
        for &a in &self.lower {
            for &b in &self.upper {
                grid.push(DecisionInterval::new(a, b)?);
            }
        }
        for e in &self.extra {
            grid.push(match e.as_slice() {
                [] => DecisionInterval::empty(),
                &[a, b] => DecisionInterval::new(a, b)?,
                _ => {
                    return Err(DopeError::validation(
                        "interval_grid.extra",
                        "entries must be [] or [lower, upper]",
                    ))
                }
            });
        }
        Ok(grid)
    }
}

/// Connectivity grid: every `(p_primary, p_secondary)` pair is one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub p_primary: Vec<f64>,
    pub p_secondary: Vec<f64>,
}

impl SweepEntry {
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.p_primary
            .iter()
            .flat_map(|&pp| self.p_secondary.iter().map(move |&ps| (pp, ps)))
            .collect()
    }
}

/// Scenario (and sweep) file: model keys plus simulation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    #[serde(flatten)]
    pub model: ModelConfig,
    pub n_populations: usize,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub workers: Option<usize>,
    pub strategies: Vec<StrategyEntry>,
    /// Defaults to the standard grid of [`DecisionInterval::default_grid`].
    #[serde(default)]
    pub interval_grid: Option<IntervalGridEntry>,
    #[serde(default)]
    pub sweep: Option<SweepEntry>,
}

fn default_mc_samples() -> usize {
    12_000
}

impl ScenarioFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DopeError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// Hex SHA-256 of the canonical JSON form of `value`, truncated to 16 digits.
pub fn config_digest<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    let mut hex = hex::encode(Sha256::digest(&json));
    hex.truncate(16);
    hex
}
