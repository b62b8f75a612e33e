use std::fmt;

use stcopula::eval::EvalError;
use stcopula::ingest::IngestError;
use stcopula::pipeline::PipelineError;

/// A failure reported as one `Category: message` line.
#[derive(Debug)]
pub enum CliError {
    Pipeline(PipelineError),
    /// A stage ran before one it reads from.
    Dependency { stage: &'static str, missing: String },
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Pipeline(PipelineError::Config(msg.into()))
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Pipeline(PipelineError::Data(msg.into()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Pipeline(e) => e.exit_code(),
            CliError::Dependency { .. } => 2,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Pipeline(e) => e.category(),
            CliError::Dependency { .. } => "DependencyError",
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let message = match self {
            CliError::Pipeline(e) => e.message().to_string(),
            CliError::Dependency { stage, missing } => {
                format!("stage `{stage}` has not been run (missing {missing})")
            }
        };
        // Keep the report on one line whatever the underlying error says.
        write!(f, "{}: {}", self.category(), message.replace('\n', " "))
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::Pipeline(e)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Pipeline(e.into())
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(format!("i/o: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::data(format!("json: {e}"))
    }
}
