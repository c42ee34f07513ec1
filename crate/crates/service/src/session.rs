//! Session state as a fold over its event log.
//!
//! Commands (`created`, `results`, `aborted`) carry operator input. The
//! other events (`proposed`, `stopped`) are recomputed on replay and must
//! match the log exactly, marginals included.

use dope_core::dope::{DopeEngine, SessionState};
use dope_core::model::{Design, TestData};
use serde::{Deserialize, Serialize};

use crate::api::{ApiError, PendingDesign, SessionConfig, SessionStatus, SessionView};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        session_id: String,
        at_ms: u64,
        config: SessionConfig,
    },
    /// Pools for round `round`, chosen from `marginals`.
    Proposed {
        round: usize,
        pools: Vec<Vec<usize>>,
        marginals: Vec<f64>,
    },
    Results {
        round: usize,
        results: Vec<bool>,
        at_ms: u64,
    },
    Stopped {
        round: usize,
        marginals: Vec<f64>,
        classification: Vec<bool>,
        truncated: bool,
    },
    Aborted {
        round: usize,
        classification: Vec<bool>,
        at_ms: u64,
    },
}

impl Event {
    fn at_ms(&self) -> Option<u64> {
        match self {
            Event::Created { at_ms, .. } | Event::Results { at_ms, .. } | Event::Aborted { at_ms, .. } => Some(*at_ms),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SessionCore {
    pub id: String,
    pub config: SessionConfig,
    engine: DopeEngine,
    state: SessionState,
    pending: Option<Design>,
    aborted: bool,
    events: Vec<Event>,
    created_at_ms: u64,
    updated_at_ms: u64,
}

impl SessionCore {
    /// New session with its first proposal; returns the events to log.
    pub fn create(id: String, config: SessionConfig, at_ms: u64) -> Result<(Self, Vec<Event>), ApiError> {
        let engine = config.engine()?;
        let state = engine.initial_state()?;
        let mut core = Self {
            id: id.clone(),
            config: config.clone(),
            engine,
            state,
            pending: None,
            aborted: false,
            events: Vec::new(),
            created_at_ms: at_ms,
            updated_at_ms: at_ms,
        };
        let mut new = vec![Event::Created {
            session_id: id,
            at_ms,
            config,
        }];
        new.push(core.propose()?);
        core.events.extend(new.iter().cloned());
        Ok((core, new))
    }

    fn propose(&mut self) -> Result<Event, ApiError> {
        let search = self.engine.propose(&mut self.state)?;
        let event = Event::Proposed {
            round: self.state.round + 1,
            pools: search.design.to_lists(),
            marginals: self.state.marginals.clone(),
        };
        self.pending = Some(search.design);
        Ok(event)
    }

    /// Round number the pending design belongs to.
    pub fn pending_round(&self) -> Option<usize> {
        self.pending.as_ref().map(|_| self.state.round + 1)
    }

    /// Checks a submission without touching the state.
    pub fn check_submit(&self, round: usize, results: &[bool]) -> Result<(), ApiError> {
        let Some(expected) = self.pending_round() else {
            return Err(ApiError::conflict("session has no pending design"));
        };
        if round != expected {
            return Err(ApiError::conflict(format!("pending design is for round {expected}, not {round}")));
        }
        let k = self.pending.as_ref().map_or(0, Design::len);
        if results.len() != k {
            return Err(ApiError::validation("results", format!("expected {k} results, got {}", results.len())));
        }
        Ok(())
    }

    /// Applies results for the pending design and proposes the next one
    /// unless the session stops.
    pub fn submit(&mut self, round: usize, results: Vec<bool>, at_ms: u64) -> Result<Vec<Event>, ApiError> {
        self.check_submit(round, &results)?;
        let design = self.pending.take().expect("checked");
        let data = TestData::new(results.clone());
        let state = match self.engine.ingest(&self.state, &design, &data) {
            Ok(s) => s,
            Err(e) => {
                self.pending = Some(design);
                return Err(e.into());
            }
        };
        self.state = state;
        self.updated_at_ms = at_ms;
        let mut new = vec![Event::Results { round, results, at_ms }];
        if self.state.stopped {
            new.push(Event::Stopped {
                round: self.state.round,
                marginals: self.state.marginals.clone(),
                classification: self.state.classification.clone().expect("stopped sessions classify"),
                truncated: self.state.truncated,
            });
        } else {
            new.push(self.propose()?);
        }
        self.events.extend(new.iter().cloned());
        Ok(new)
    }

    /// Stops the session and classifies from the current marginals.
    pub fn abort(&mut self, at_ms: u64) -> Result<Vec<Event>, ApiError> {
        if self.state.stopped {
            return Err(ApiError::conflict("session has already stopped"));
        }
        self.state = self.engine.abort(&self.state);
        self.pending = None;
        self.aborted = true;
        self.updated_at_ms = at_ms;
        let new = vec![Event::Aborted {
            round: self.state.round,
            classification: self.state.classification.clone().expect("aborted sessions classify"),
            at_ms,
        }];
        self.events.extend(new.iter().cloned());
        Ok(new)
    }

    /// Rebuilds a session from its log, recomputing every derived event.
    pub fn replay(log: &[Event]) -> Result<Self, String> {
        let Some(Event::Created { session_id, at_ms, config }) = log.first() else {
            return Err("log does not start with a created event".into());
        };
        let (mut core, _) = Self::create(session_id.clone(), config.clone(), *at_ms).map_err(|e| e.body.message)?;
        let mut at = core.events.len();
        while at < log.len() {
            match &log[at] {
                Event::Results { round, results, at_ms } => core.submit(*round, results.clone(), *at_ms),
                Event::Aborted { at_ms, .. } => core.abort(*at_ms),
                other => return Err(format!("unexpected event at line {}: {other:?}", at + 1)),
            }
            .map_err(|e| format!("line {}: {}", at + 1, e.body.message))?;
            let produced = &core.events[at..];
            if log.len() < core.events.len() || produced != &log[at..core.events.len()] {
                return Err(format!("replay diverges from the log at line {}", at + 1));
            }
            at = core.events.len();
        }
        if core.events != log {
            return Err("replay diverges from the log".into());
        }
        core.updated_at_ms = log.iter().filter_map(Event::at_ms).max().unwrap_or(core.created_at_ms);
        Ok(core)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn view(&self, status: Option<SessionStatus>) -> SessionView {
        let status = status.unwrap_or(if self.state.stopped {
            SessionStatus::Stopped
        } else {
            SessionStatus::AwaitingResults
        });
        SessionView {
            session_id: self.id.clone(),
            status,
            n_individuals: self.engine.spec().n_individuals(),
            k_pools_per_step: self.config.k_pools_per_step,
            interval: self.config.interval,
            round: self.state.round,
            tests_used: self.state.tests_used(),
            marginals: self.state.marginals.clone(),
            pending_design: self.pending.as_ref().map(|d| PendingDesign {
                round: self.state.round + 1,
                pools: d.to_lists(),
            }),
            classification: self.state.classification.clone(),
            stopped: self.state.stopped,
            truncated: self.state.truncated,
            aborted: self.aborted,
            created_at_ms: self.created_at_ms,
            updated_at_ms: self.updated_at_ms,
            transcript: None,
        }
    }
}
