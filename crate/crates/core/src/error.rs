use thiserror::Error;

/// Errors produced by the estimators, model fits and data loaders.
#[derive(Debug, Error)]
pub enum Error {
    /// Input outside the domain of an operation (too few treatments, negative variance, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Design parameters that violate a block-design identity.
    #[error("infeasible design: {0}")]
    Infeasible(String),

    /// The treatment/block incidence splits into several connected components.
    #[error("disconnected design: treatments fall into {} components: {}", .components.len(), format_components(.components))]
    Disconnected { components: Vec<Vec<String>> },

    /// A linear system that should be positive definite was not.
    #[error("singular system: {0}")]
    Singular(String),

    /// Randomized layout search ran out of budget.
    #[error(
        "layout search exhausted its budget of {budget} nodes after {restarts} restarts; supply a layout file instead"
    )]
    SearchExhausted { budget: u64, restarts: u32 },

    /// Malformed input record, with 1-based line number.
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unknown team label `{0}`")]
    UnknownTeam(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

fn format_components(components: &[Vec<String>]) -> String {
    components
        .iter()
        .map(|c| format!("{{{}}}", c.join(",")))
        .collect::<Vec<_>>()
        .join(" ")
}

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
