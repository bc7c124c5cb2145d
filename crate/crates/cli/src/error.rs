use std::fmt;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(stochctl::Error),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Core(stochctl::Error::InvalidArgument(_)) => 1,
            CliError::Core(stochctl::Error::BudgetExceeded { .. }) => 3,
            _ => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "invalid config: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<stochctl::Error> for CliError {
    fn from(e: stochctl::Error) -> Self {
        CliError::Core(e)
    }
}

pub fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}
