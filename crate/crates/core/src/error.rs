use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsupported Renyi order {0}: only integer orders >= 2 are supported")]
    UnsupportedOrder(f64),

    #[error("unknown privacy group `{0}`")]
    UnknownGroup(String),

    #[error("calibration failed{}: {reason}", group_suffix(.group))]
    Calibration {
        group: Option<String>,
        reason: String,
    },

    #[error("infeasible privacy spec: group `{group}` needs a sample rate above 1")]
    Infeasible { group: String },

    #[error("training failed at step {step}: {reason}")]
    Training { step: u64, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn group_suffix(group: &Option<String>) -> String {
    match group {
        Some(g) => format!(" for group `{g}`"),
        None => String::new(),
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
