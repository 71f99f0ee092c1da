use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("resume mismatch at {path}: expected config hash {expected:016x}, found {found:016x}")]
    ResumeMismatch { path: String, expected: u64, found: u64 },
    #[error("io: {0}")]
    Io(String),
    #[error("schema: {0}")]
    Schema(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error(transparent)]
    Node(#[from] collafuse::nodes::NodeError),
    #[error(transparent)]
    Metrics(#[from] collafuse::metrics::MetricsError),
    #[error(transparent)]
    Data(#[from] collafuse::data::DataError),
    #[error(transparent)]
    Model(#[from] collafuse::denoiser::ModelError),
}

impl CliError {
    /// Stable identifier used in the machine-readable error report.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::ResumeMismatch { .. } => "resume_mismatch",
            CliError::Io(_) => "io",
            CliError::Schema(_) => "schema",
            CliError::Missing(_) => "missing_artifact",
            CliError::Node(_) => "node",
            CliError::Metrics(_) => "metrics",
            CliError::Data(_) => "data",
            CliError::Model(_) => "model",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::ResumeMismatch { .. } => 3,
            _ => 1,
        }
    }

    /// `{"error":{"kind":...,"message":...}}`
    pub fn report(&self) -> String {
        serde_json::json!({ "error": { "kind": self.kind(), "message": self.to_string() } }).to_string()
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
