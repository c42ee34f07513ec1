//! Wire types of the `/v1` API.

use std::collections::BTreeMap;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use dope_core::config::ModelConfig;
use dope_core::design::HillClimbConfig;
use dope_core::dope::{DecisionInterval, DopeConfig, DopeEngine};
use dope_core::error::DopeError;
use dope_core::posterior::GibbsConfig;
use serde::{Deserialize, Serialize};

fn one() -> usize {
    1
}

fn default_interval() -> Option<[f64; 2]> {
    Some([0.05, 0.5])
}

fn default_mc_samples() -> usize {
    GibbsConfig::default().n_samples
}

/// Body of `POST /v1/sessions`. Model keys are the same as in a scenario
/// file; `interval: null` selects nonsequential mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(default = "one")]
    pub k_pools_per_step: usize,
    #[serde(default = "default_interval")]
    pub interval: Option<[f64; 2]>,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_thinning: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_restarts: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_perturbations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_rounds: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Keys matched by nothing above; any entry is rejected.
    #[serde(flatten, default, skip_serializing_if = "BTreeMap::is_empty")]
    pub unknown: BTreeMap<String, serde_json::Value>,
}

impl SessionConfig {
    pub fn engine(&self) -> Result<DopeEngine, DopeError> {
        if let Some(key) = self.unknown.keys().next() {
            return Err(DopeError::Validation {
                field: key.clone(),
                message: "unknown field".into(),
            });
        }
        let (spec, prior, err) = self.model.build()?;
        if self.mc_samples < 2 {
            return Err(DopeError::Validation {
                field: "mc_samples".into(),
                message: "must be at least 2".into(),
            });
        }
        let interval = DecisionInterval::try_from(self.interval)?;
        let gibbs = GibbsConfig::default();
        let hc = HillClimbConfig::default();
        let config = DopeConfig {
            k_pools_per_step: self.k_pools_per_step,
            interval,
            gibbs: GibbsConfig {
                n_samples: self.mc_samples,
                burn_in: self.burn_in.unwrap_or(gibbs.burn_in),
                max_thinning: self.max_thinning.unwrap_or(gibbs.max_thinning),
                ..gibbs
            },
            hill_climb: HillClimbConfig {
                n_restarts: self.n_restarts.unwrap_or(hc.n_restarts),
                n_perturbations: self.n_perturbations.unwrap_or(hc.n_perturbations),
                max_steps: self.max_steps.unwrap_or(hc.max_steps),
                ..hc
            },
            max_rounds: self.max_rounds,
            seed: self.seed,
        };
        DopeEngine::new(spec, prior, err, config)
    }
}

/// Body of `POST /v1/sessions/{id}/results`: one outcome per pending pool,
/// in pool order, for round `round`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitRequest {
    pub round: usize,
    pub results: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingDesign {
    pub round: usize,
    pub pools: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    AwaitingResults,
    Computing,
    Stopped,
}

/// Snapshot of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub status: SessionStatus,
    pub n_individuals: usize,
    pub k_pools_per_step: usize,
    pub interval: Option<[f64; 2]>,
    /// Completed rounds.
    pub round: usize,
    pub tests_used: usize,
    pub marginals: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending_design: Option<PendingDesign>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<Vec<bool>>,
    pub stopped: bool,
    pub truncated: bool,
    pub aborted: bool,
    pub created_at_ms: u64,
    pub updated_at_ms: u64,
    /// The event log; present on `GET /v1/sessions/{id}` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<Vec<crate::session::Event>>,
}

/// Response of a results submission: exactly one of `next_design` and
/// `classification` is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub session_id: String,
    pub round: usize,
    pub tests_used: usize,
    pub marginals: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_design: Option<PendingDesign>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<Vec<bool>>,
    pub truncated: bool,
}

impl From<&SessionView> for SubmitResponse {
    fn from(v: &SessionView) -> Self {
        Self {
            session_id: v.session_id.clone(),
            round: v.round,
            tests_used: v.tests_used,
            marginals: v.marginals.clone(),
            next_design: v.pending_design.clone(),
            classification: v.classification.clone(),
            truncated: v.truncated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub status: SessionStatus,
    pub n_individuals: usize,
    pub round: usize,
    pub tests_used: usize,
    pub created_at_ms: u64,
    pub updated_at_ms: u64,
}

impl From<&SessionView> for SessionSummary {
    fn from(v: &SessionView) -> Self {
        Self {
            session_id: v.session_id.clone(),
            status: v.status,
            n_individuals: v.n_individuals,
            round: v.round,
            tests_used: v.tests_used,
            created_at_ms: v.created_at_ms,
            updated_at_ms: v.updated_at_ms,
        }
    }
}

/// Error body `{code, message, field?}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
                field: None,
            },
        }
    }

    pub fn with_field(mut self, field: impl Into<String>) -> Self {
        self.body.field = Some(field.into());
        self
    }

    pub fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("no session {id}"))
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }

    pub fn validation(field: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation_error", message).with_field(field)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    /// Maps a body parse failure; serde names the offending key in backticks.
    pub fn from_json(e: &serde_json::Error) -> Self {
        use serde_json::error::Category;
        let message = e.to_string();
        match e.classify() {
            Category::Data => {
                let field = ["unknown field `", "missing field `"]
                    .iter()
                    .find_map(|p| message.strip_prefix(p))
                    .and_then(|rest| rest.split('`').next())
                    .map(str::to_owned);
                let err = Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation_error", message);
                match field {
                    Some(f) => err.with_field(f),
                    None => err,
                }
            }
            _ => Self::new(StatusCode::BAD_REQUEST, "invalid_json", message),
        }
    }
}

impl From<DopeError> for ApiError {
    fn from(e: DopeError) -> Self {
        match e {
            DopeError::Validation { field, message } => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation_error", format!("invalid {field}: {message}")).with_field(field)
            }
            DopeError::InvalidArgument(m) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation_error", m),
            DopeError::InvalidModel(m) => Self::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "inconsistent_results",
                format!("results are impossible under the model: {m}"),
            ),
            other => Self::internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BODY: &str = r#"{
        "n_individuals": 3, "clusters": [[0, 1], [2]],
        "p_primary": 0.2, "p_secondary": 0.3, "p_basal": 0.01,
        "p_false_negative": 0.1, "p_false_positive": 0.01
    }"#;

    #[test]
    fn defaults_fill_dope_settings() {
        let cfg: SessionConfig = serde_json::from_str(BODY).unwrap();
        assert_eq!(cfg.k_pools_per_step, 1);
        assert_eq!(cfg.interval, Some([0.05, 0.5]));
        assert_eq!(cfg.mc_samples, 12_000);
        let engine = cfg.engine().unwrap();
        assert_eq!(engine.config().gibbs.burn_in, 2000);
        let back: SessionConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn null_interval_is_nonsequential() {
        let text = BODY.replace("\"n_individuals\"", "\"interval\": null, \"n_individuals\"");
        let cfg: SessionConfig = serde_json::from_str(&text).unwrap();
        assert!(cfg.engine().unwrap().config().interval.is_empty());
    }

    #[test]
    fn unknown_and_invalid_fields_are_named() {
        let text = BODY.replace("\"n_individuals\"", "\"bogus\": 1, \"n_individuals\"");
        let cfg: SessionConfig = serde_json::from_str(&text).unwrap();
        let e = ApiError::from(cfg.engine().unwrap_err());
        assert_eq!((e.status, e.body.field.as_deref()), (StatusCode::UNPROCESSABLE_ENTITY, Some("bogus")));
        let cfg: SessionConfig = serde_json::from_str(&BODY.replace("0.2", "1.2")).unwrap();
        let e = ApiError::from(cfg.engine().unwrap_err());
        assert_eq!(e.body.field.as_deref(), Some("p_primary"));
        let cfg: SessionConfig = serde_json::from_str(&BODY.replace("\"n_individuals\"", "\"interval\": [0.6, 0.2], \"n_individuals\"")).unwrap();
        assert_eq!(ApiError::from(cfg.engine().unwrap_err()).body.field.as_deref(), Some("interval"));
        let e = ApiError::from_json(&serde_json::from_str::<SessionConfig>("{").unwrap_err());
        assert_eq!(e.status, StatusCode::BAD_REQUEST);
    }
}
