use sdeawb_core::AwbError;
use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("{0}")]
    Usage(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("data: {0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] AwbError),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(AwbError::Io(e))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(AwbError::Csv(e))
    }
}

impl CliError {
    /// 1 usage or config, 2 numerical, 3 data.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Data(_) => 3,
            CliError::Core(e) => match e {
                AwbError::InvalidArgument(_) => 1,
                AwbError::NonFinite(_)
                | AwbError::Domain { .. }
                | AwbError::ShapeMismatch { .. }
                | AwbError::InvalidTensor(_) => 2,
                AwbError::InputTooSmall { .. }
                | AwbError::Parse { .. }
                | AwbError::MissingColumn { .. }
                | AwbError::DuplicateId { .. }
                | AwbError::Image { .. }
                | AwbError::Checkpoint(_)
                | AwbError::Dataset(_)
                | AwbError::Io(_)
                | AwbError::Csv(_) => 3,
            },
        }
    }
}
