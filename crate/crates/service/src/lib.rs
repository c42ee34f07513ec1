//! Live DOPE sessions over a JSON HTTP API.
//!
//! | method | path | |
//! |---|---|---|
//! | `POST` | `/v1/sessions` | create; returns the first proposal |
//! | `GET` | `/v1/sessions` | list |
//! | `GET` | `/v1/sessions/{id}` | snapshot with the event log as `transcript` |
//! | `POST` | `/v1/sessions/{id}/results` | `{"round", "results"}` for the pending pools |
//! | `POST` | `/v1/sessions/{id}/abort` | stop and classify from current marginals |
//! | `GET` | `/v1/sessions/{id}/log` | raw JSONL event log |
//!
//! Every session is a file `<DOPE_DATA_DIR>/<id>.jsonl`. On startup each log
//! is replayed through the engine; sessions whose recomputed events differ
//! from the log are refused.

pub mod api;
pub mod routes;
pub mod session;
pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;

pub use routes::router;
pub use store::Store;

pub const DEFAULT_BIND_ADDR: &str = "127.0.0.1:8080";
pub const DEFAULT_DATA_DIR: &str = "dope-data";

/// Settings read from `DOPE_DATA_DIR`, `DOPE_BIND_ADDR` and `DOPE_WORKERS`.
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub bind_addr: SocketAddr,
    pub workers: Option<usize>,
}

impl ServiceConfig {
    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, String> {
        let data_dir = get("DOPE_DATA_DIR").unwrap_or_else(|| DEFAULT_DATA_DIR.into()).into();
        let addr = get("DOPE_BIND_ADDR").unwrap_or_else(|| DEFAULT_BIND_ADDR.into());
        let bind_addr = addr.parse().map_err(|e| format!("DOPE_BIND_ADDR={addr}: {e}"))?;
        let workers = match get("DOPE_WORKERS") {
            None => None,
            Some(w) => match w.parse::<usize>() {
                Ok(n) if n > 0 => Some(n),
                _ => return Err(format!("DOPE_WORKERS={w}: expected a positive integer")),
            },
        };
        Ok(Self {
            data_dir,
            bind_addr,
            workers,
        })
    }

    pub fn from_env() -> Result<Self, String> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }
}
