//! Acceptance criteria for the workspace live in `tests/acceptance.rs`.
//!
//! ```text
//! cargo test -p dope-validation --test acceptance
//! cargo test -p dope-validation --test acceptance -- 3 7
//! ```
