//! Append-only JSON-lines transcript shared by DOPE sessions and the baseline
//! strategies.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{DopeError, Result};
use crate::model::{Design, TestData};

/// One round of testing: the pools tested, their results and (for DOPE) the
/// posterior marginals after ingesting them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub round: usize,
    pub pools: Vec<Vec<usize>>,
    pub results: Vec<bool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub marginals: Vec<f64>,
    pub stopped: bool,
}

impl TranscriptRecord {
    pub fn new(round: usize, design: &Design, data: &TestData, marginals: Vec<f64>, stopped: bool) -> Self {
        Self {
            round,
            pools: design.to_lists(),
            results: data.results().to_vec(),
            marginals,
            stopped,
        }
    }

    pub fn n_tests(&self) -> usize {
        self.pools.len()
    }
}

pub fn write_jsonl<W: Write>(records: &[TranscriptRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| DopeError::Parse(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<TranscriptRecord>> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line)
                .map_err(|e| DopeError::Parse(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(records)
}
