use std::fmt;

/// Failure classes with their process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Some result is outside its tolerance (exit 1).
    Tolerance(String),
    /// Bad flags, config file, or paths (exit 2).
    Config(String),
    /// The solver failed (exit 3).
    Solver(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Tolerance(_) => 1,
            CliError::Config(_) => 2,
            CliError::Solver(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Tolerance(m) => write!(f, "tolerance failure: {m}"),
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Solver(m) => write!(f, "solver failure: {m}"),
        }
    }
}

impl From<diff_ilqr::Error> for CliError {
    fn from(e: diff_ilqr::Error) -> Self {
        match e {
            diff_ilqr::Error::Config(m) => CliError::Config(m),
            e if e.is_solver_failure() => CliError::Solver(e.to_string()),
            e => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(e.to_string())
    }
}
