use thiserror::Error;

/// Failure of a subcommand, carrying the process exit code it maps to.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, arguments or input files.
    #[error("{0}")]
    Config(String),

    #[error("simulation failed: {0}")]
    Simulation(isnet_core::Error),

    #[error("estimation failed: {0}")]
    Estimation(isnet_core::Error),

    /// The estimate was written but the solver did not converge.
    #[error("estimation did not converge (residual norm {residual_norm:e})")]
    NotConverged { residual_norm: f64 },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Simulation(_) => 3,
            CliError::Estimation(_) | CliError::NotConverged { .. } => 4,
        }
    }

    pub fn config(e: impl std::fmt::Display) -> Self {
        CliError::Config(e.to_string())
    }

    /// Input problems map to [`CliError::Config`]; anything else to the
    /// stage's own variant.
    pub fn from_core(e: isnet_core::Error, stage: fn(isnet_core::Error) -> CliError) -> Self {
        use isnet_core::Error as E;
        match e {
            E::DimensionMismatch { .. }
            | E::InvalidParameter(_)
            | E::InvalidBeta { .. }
            | E::UnanchoredBeta { .. }
            | E::NotSampleable(_)
            | E::InsufficientData { .. }
            | E::Format(_)
            | E::Io(_)
            | E::Json(_)
            | E::Csv(_) => CliError::Config(e.to_string()),
            other => stage(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
