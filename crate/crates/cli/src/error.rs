use std::fmt;
use std::process::ExitCode;

use nbellman::grid::GridError;
use nbellman::mc::McError;
use nbellman::problem::ProblemError;
use nbellman::registry::RegistryError;
use nbellman::solver::SolveError;
use nbellman::verify::VerifyError;

/// Failure classes, one per exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Validation,
    Convergence,
    Property,
}

impl Kind {
    pub fn code(self) -> u8 {
        match self {
            Kind::Config => 2,
            Kind::Validation => 3,
            Kind::Convergence => 4,
            Kind::Property => 5,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            kind: Kind::Config,
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        CliError {
            kind: Kind::Validation,
            message: message.into(),
        }
    }

    pub fn property(message: impl Into<String>) -> Self {
        CliError {
            kind: Kind::Property,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.kind.code())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = match self.kind {
            Kind::Config => "configuration error",
            Kind::Validation => "validation failed",
            Kind::Convergence => "solver did not converge",
            Kind::Property => "property check failed",
        };
        write!(f, "{label}: {}", self.message)
    }
}

impl From<ProblemError> for CliError {
    fn from(e: ProblemError) -> Self {
        match e {
            ProblemError::Eval(_) => CliError::validation(format!("[finite-eval] {e}")),
            _ => CliError::config(e.to_string()),
        }
    }
}

impl From<RegistryError> for CliError {
    fn from(e: RegistryError) -> Self {
        match e {
            RegistryError::Problem(p) => p.into(),
            _ => CliError::config(e.to_string()),
        }
    }
}

impl From<GridError> for CliError {
    fn from(e: GridError) -> Self {
        match e {
            GridError::Eval(_) => CliError::validation(format!("[finite-eval] {e}")),
            _ => CliError::config(e.to_string()),
        }
    }
}

impl From<SolveError> for CliError {
    fn from(e: SolveError) -> Self {
        let kind = match &e {
            SolveError::Config(_) => Kind::Config,
            SolveError::Grid(GridError::Eval(_)) => Kind::Validation,
            SolveError::Grid(_) => Kind::Config,
            SolveError::Assumption { .. } | SolveError::Eval(_) => Kind::Validation,
            SolveError::Convergence { .. } | SolveError::Divergence { .. } => Kind::Convergence,
        };
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<McError> for CliError {
    fn from(e: McError) -> Self {
        let kind = match &e {
            McError::Config(_) | McError::Policy(_) => Kind::Config,
            McError::Problem(ProblemError::Eval(_)) => Kind::Validation,
            McError::Problem(_) => Kind::Config,
            McError::NonPsd { .. } | McError::NonFinite { .. } | McError::Eval(_) => Kind::Validation,
        };
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<VerifyError> for CliError {
    fn from(e: VerifyError) -> Self {
        match e {
            VerifyError::Solve(s) => s.into(),
            VerifyError::Grid(g) => g.into(),
            _ => CliError::config(e.to_string()),
        }
    }
}

pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::config(format!("{}: {e}", path.display()))
}
