use la_transformer::Error;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_CHECK: u8 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] Error),

    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    /// 1 usage or config, 2 data (including runtime failures on that data), 3 failed check.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::CheckFailed(_) => EXIT_CHECK,
            CliError::Core(Error::Config(_) | Error::Naming(_) | Error::Geometry(_) | Error::Optimizer(_)) => {
                EXIT_USAGE
            }
            CliError::Core(_) => EXIT_DATA,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(CliError::Core(Error::Config(vec!["bad".into()])).exit_code(), 1);
        assert_eq!(CliError::Core(Error::Parse("a.jpg".into())).exit_code(), 2);
        assert_eq!(CliError::Core(Error::Truncated("x".into())).exit_code(), 2);
        assert_eq!(CliError::Core(Error::NoValidGallery { query: 0 }).exit_code(), 2);
        assert_eq!(CliError::CheckFailed("x".into()).exit_code(), 3);
    }
}
