//! Command implementations behind the `crowdagg` binary, exposed as a
//! library so integration tests can call the same code paths the binary
//! runs.

pub mod args;
pub mod commands;
pub mod io;

/// Command failures, classified by exit code: 2 for configuration, 3 for
/// file and parse problems, 4 for numerical failures. Clap reports its
/// own usage errors with code 2 before any command runs.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

/// Library errors split by origin: bad configuration is a usage error,
/// structurally bad data is a file problem, and a failed factorization or
/// a diverged fit is numerical.
impl From<crowdagg::Error> for CliError {
    fn from(err: crowdagg::Error) -> CliError {
        match err {
            crowdagg::Error::InvalidConfig(_) => CliError::Usage(err.to_string()),
            crowdagg::Error::InvalidData(_)
            | crowdagg::Error::IndexOutOfRange { .. }
            | crowdagg::Error::DimensionMismatch { .. } => CliError::Io(err.to_string()),
            crowdagg::Error::NotPositiveDefinite { .. } | crowdagg::Error::NonFinite(_) => {
                CliError::Numerical(err.to_string())
            }
        }
    }
}
