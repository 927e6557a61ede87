//! Error type of the experiment driver and its exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error(transparent)]
    Core(#[from] spiked_core::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => CliError::Io(io),
            other => CliError::Io(std::io::Error::other(format!("{other:?}"))),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(std::io::Error::other(e))
    }
}

impl CliError {
    /// 2 for invalid input, 3 for numerical failure, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        use spiked_core::Error as E;
        match self {
            CliError::Validation(_) => 2,
            CliError::Core(E::InvalidArgument(_) | E::Unknown { .. } | E::Parse(_)) => 2,
            CliError::Core(E::Io(_)) | CliError::Io(_) => 1,
            CliError::Core(_) => 3,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Validation("x".into()).exit_code(), 2);
        assert_eq!(
            CliError::Core(spiked_core::Error::Parse("x".into())).exit_code(),
            2
        );
        assert_eq!(
            CliError::Core(spiked_core::Error::Numerical("x".into())).exit_code(),
            3
        );
        assert_eq!(
            CliError::Core(spiked_core::Error::OutsideRange { s: 1.0, sup: 0.5 }).exit_code(),
            3
        );
        assert_eq!(CliError::Io(std::io::Error::other("x")).exit_code(), 1);
    }
}
