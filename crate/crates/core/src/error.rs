use thiserror::Error;

#[derive(Debug, Error)]
pub enum DopeError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A configuration value violates its invariant; `field` names the
    /// offending configuration key.
    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },

    /// The conditioning data are impossible under the model (every state has
    /// zero posterior mass along the queried direction).
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("enumeration budget exceeded: {0}")]
    BudgetExceeded(String),

    #[error("no decision interval reaches a false-negative rate below {target}")]
    Infeasible { target: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DopeError {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        DopeError::Validation {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, DopeError>;
