use excap::ExcapError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric divergence: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<ExcapError> for CliError {
    fn from(e: ExcapError) -> Self {
        let msg = e.to_string();
        match e {
            ExcapError::Config(_) | ExcapError::Dimension(_) => CliError::Config(msg),
            ExcapError::Divergence(_) => CliError::Numeric(msg),
            ExcapError::Parse { .. }
            | ExcapError::Invalid { .. }
            | ExcapError::Undefined(_)
            | ExcapError::Io(_)
            | ExcapError::Json(_)
            | ExcapError::Csv(_) => CliError::Data(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
