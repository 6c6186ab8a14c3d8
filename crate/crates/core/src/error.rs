use thiserror::Error;

/// Errors produced anywhere in the lab.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("patch assignment infeasible: {needed} patches needed but only {available} available")]
    Assignment { needed: usize, available: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("training diverged at iteration {iteration} (loss = {loss})")]
    Divergence { iteration: usize, loss: f64 },

    #[error("label {label} out of range for {k} classes")]
    Label { label: usize, k: usize },

    #[error("degenerate candidate set for feature (class {class}, slot {slot}): initial score {score}; re-seed the initialization")]
    Degenerate { class: usize, slot: usize, score: f64 },

    #[error("missing generative metadata: {0}")]
    Metadata(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unknown acceptance suite `{name}`; valid suites: {valid}")]
    UnknownSuite { name: String, valid: String },

    #[error("output directory {0} already exists (pass --overwrite or choose another path)")]
    OutputExists(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn dim_check(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(LabError::Dimension(format!(
            "{what}: expected {expected}, got {got}"
        )));
    }
    Ok(())
}
