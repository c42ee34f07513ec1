//! Reference pooling strategies: Dorfman, recursive halving, matrix and
//! separate testing. Every test goes through [`sample_data`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DopeError, Result};
use crate::model::{sample_data, Design, InfectionState, Pool, TestErrorParams, DEFAULT_POOL_CAP};
use crate::transcript::TranscriptRecord;

fn check_size(field: &str, size: usize) -> Result<()> {
    if size == 0 || size > DEFAULT_POOL_CAP {
        return Err(DopeError::validation(
            field,
            format!("must be in 1..={DEFAULT_POOL_CAP}, got {size}"),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DorfmanConfig {
    pub pool_size: usize,
}

impl DorfmanConfig {
    pub fn new(pool_size: usize) -> Result<Self> {
        check_size("pool_size", pool_size)?;
        Ok(Self { pool_size })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecursiveConfig {
    pub initial_pool_size: usize,
}

impl RecursiveConfig {
    pub fn new(initial_pool_size: usize) -> Result<Self> {
        check_size("initial_pool_size", initial_pool_size)?;
        Ok(Self { initial_pool_size })
    }
}

/// `rows x cols` grid; individual `i` sits at row `i / cols`, column `i % cols`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixConfig {
    pub rows: usize,
    pub cols: usize,
}

impl MatrixConfig {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        check_size("rows", rows)?;
        check_size("cols", cols)?;
        Ok(Self { rows, cols })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyOutcome {
    pub classification: Vec<bool>,
    pub tests_used: usize,
    /// One record per test.
    pub transcript: Vec<TranscriptRecord>,
}

/// Runs single-pool tests and keeps the transcript.
struct Lab<'a, R: ?Sized> {
    truth: &'a InfectionState,
    err: &'a TestErrorParams,
    rng: &'a mut R,
    transcript: Vec<TranscriptRecord>,
}

impl<'a, R: Rng + ?Sized> Lab<'a, R> {
    fn new(truth: &'a InfectionState, err: &'a TestErrorParams, rng: &'a mut R) -> Self {
        Self {
            truth,
            err,
            rng,
            transcript: Vec::new(),
        }
    }

    fn test(&mut self, stage: usize, members: Vec<usize>) -> bool {
        let design = Design::new(vec![Pool::new(members).expect("pools are nonempty")]);
        let data = sample_data(&design, self.err, self.truth, self.rng);
        let positive = data.results()[0];
        self.transcript
            .push(TranscriptRecord::new(stage, &design, &data, Vec::new(), false));
        positive
    }

    fn finish(mut self, classification: Vec<bool>) -> StrategyOutcome {
        if let Some(last) = self.transcript.last_mut() {
            last.stopped = true;
        }
        StrategyOutcome {
            classification,
            tests_used: self.transcript.len(),
            transcript: self.transcript,
        }
    }
}

fn consecutive_blocks(n: usize, size: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(size).map(move |s| (s..(s + size).min(n)).collect())
}

/// Consecutive pools of `pool_size`; members of positive pools are retested
/// one by one and classified by their own result.
pub fn dorfman_run<R: Rng + ?Sized>(
    truth: &InfectionState,
    err: &TestErrorParams,
    cfg: &DorfmanConfig,
    rng: &mut R,
) -> Result<StrategyOutcome> {
    check_size("pool_size", cfg.pool_size)?;
    let n = truth.len();
    let mut lab = Lab::new(truth, err, rng);
    let positives: Vec<Vec<usize>> = consecutive_blocks(n, cfg.pool_size)
        .filter_map(|pool| lab.test(1, pool.clone()).then_some(pool))
        .collect();
    let mut classification = vec![false; n];
    for pool in positives {
        for h in pool {
            classification[h] = lab.test(2, vec![h]);
        }
    }
    Ok(lab.finish(classification))
}

fn recurse<R: Rng + ?Sized>(lab: &mut Lab<'_, R>, depth: usize, members: Vec<usize>, out: &mut [bool]) {
    let positive = lab.test(depth, members.clone());
    if !positive {
        return;
    }
    if members.len() == 1 {
        out[members[0]] = true;
        return;
    }
    let mid = members.len().div_ceil(2);
    let (left, right) = members.split_at(mid);
    recurse(lab, depth + 1, left.to_vec(), out);
    recurse(lab, depth + 1, right.to_vec(), out);
}

/// Binary splitting of positive pools, larger half first, until singletons.
pub fn recursive_run<R: Rng + ?Sized>(
    truth: &InfectionState,
    err: &TestErrorParams,
    cfg: &RecursiveConfig,
    rng: &mut R,
) -> Result<StrategyOutcome> {
    check_size("initial_pool_size", cfg.initial_pool_size)?;
    let n = truth.len();
    let mut lab = Lab::new(truth, err, rng);
    let mut classification = vec![false; n];
    for pool in consecutive_blocks(n, cfg.initial_pool_size) {
        recurse(&mut lab, 1, pool, &mut classification);
    }
    Ok(lab.finish(classification))
}

/// Row and column pools, then individual tests at every positive row and
/// positive column intersection.
pub fn matrix_run<R: Rng + ?Sized>(
    truth: &InfectionState,
    err: &TestErrorParams,
    cfg: &MatrixConfig,
    rng: &mut R,
) -> Result<StrategyOutcome> {
    check_size("rows", cfg.rows)?;
    check_size("cols", cfg.cols)?;
    let n = truth.len();
    if cfg.rows * cfg.cols != n {
        return Err(DopeError::InvalidArgument(format!(
            "{}x{} matrix does not hold {n} individuals",
            cfg.rows, cfg.cols
        )));
    }
    let mut lab = Lab::new(truth, err, rng);
    let rows: Vec<bool> = (0..cfg.rows)
        .map(|r| lab.test(1, (0..cfg.cols).map(|c| r * cfg.cols + c).collect()))
        .collect();
    let cols: Vec<bool> = (0..cfg.cols)
        .map(|c| lab.test(1, (0..cfg.rows).map(|r| r * cfg.cols + c).collect()))
        .collect();
    let mut classification = vec![false; n];
    for (h, slot) in classification.iter_mut().enumerate() {
        if rows[h / cfg.cols] && cols[h % cfg.cols] {
            *slot = lab.test(2, vec![h]);
        }
    }
    Ok(lab.finish(classification))
}

/// One individual test per person.
pub fn separate_run<R: Rng + ?Sized>(truth: &InfectionState, err: &TestErrorParams, rng: &mut R) -> StrategyOutcome {
    let mut lab = Lab::new(truth, err, rng);
    let classification = (0..truth.len()).map(|h| lab.test(1, vec![h])).collect();
    lab.finish(classification)
}

/// A configured baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Baseline {
    Dorfman(DorfmanConfig),
    Recursive(RecursiveConfig),
    Matrix(MatrixConfig),
    Separate,
}

impl Baseline {
    pub fn id(&self) -> String {
        match self {
            Baseline::Dorfman(c) => format!("dorfman-{}", c.pool_size),
            Baseline::Recursive(c) => format!("recursive-{}", c.initial_pool_size),
            Baseline::Matrix(c) => format!("matrix-{}x{}", c.rows, c.cols),
            Baseline::Separate => "separate".into(),
        }
    }

    pub fn run<R: Rng + ?Sized>(&self, truth: &InfectionState, err: &TestErrorParams, rng: &mut R) -> Result<StrategyOutcome> {
        match self {
            Baseline::Dorfman(c) => dorfman_run(truth, err, c, rng),
            Baseline::Recursive(c) => recursive_run(truth, err, c, rng),
            Baseline::Matrix(c) => matrix_run(truth, err, c, rng),
            Baseline::Separate => Ok(separate_run(truth, err, rng)),
        }
    }
}
