use trajval::LabError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Integrity(_) => 3,
            Self::Numeric(_) => 4,
            Self::Io(_) => 1,
        }
    }
}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        match e {
            LabError::Config(_)
            | LabError::Dimension(_)
            | LabError::TooManyPlayers { .. }
            | LabError::EmptyDataset
            | LabError::EmptyCoalition => Self::Config(e.to_string()),
            LabError::IdMismatch(_) | LabError::MissingNoise { .. } => {
                Self::Integrity(e.to_string())
            }
            _ => Self::Numeric(e.to_string()),
        }
    }
}
