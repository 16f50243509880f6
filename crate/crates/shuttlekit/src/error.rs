use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad inputs: arguments, config, file contents. Exit code 2.
    Validation,
    /// The computation itself failed: infeasible step, non-convergence,
    /// degenerate likelihood, escaped ion. Exit code 3.
    Numerical,
    /// I/O and serialization problems. Exit code 1.
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("position ({0}, {1}, {2}) m outside grid bounds")]
    OutOfBounds(f64, f64, f64),

    #[error("parse error in {path:?}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("infeasible step {step}: electrode {electrode} reachable box is empty ({lo:.6} > {hi:.6} V)")]
    InfeasibleStep {
        step: usize,
        electrode: usize,
        lo: f64,
        hi: f64,
    },

    #[error("voltage bound violated at step {step}, electrode {electrode}: {value:.6} V outside [{lo}, {hi}] V")]
    BoundViolation {
        step: usize,
        electrode: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("singular input: {0}")]
    Singular(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unidentifiable model: {0}")]
    Unidentifiable(String),

    #[error("degenerate likelihood: {0}")]
    DegenerateLikelihood(String),

    #[error("no threshold pair meets the objective; Pareto frontier (t_dark, t_bright, p_bb, p_db, discard): {frontier:?}")]
    NoFeasibleThresholds { frontier: Vec<(u32, u32, f64, f64, f64)> },

    #[error("ion escaped probe bounds at t = {time:.3e} s, position ({x:.3e}, {y:.3e}, {z:.3e}) m")]
    IonEscaped { time: f64, x: f64, y: f64, z: f64 },

    #[error("did not converge: {0}")]
    NonConvergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            InvalidArgument(_) | OutOfBounds(..) | Parse { .. } | Singular(_)
            | InsufficientData(_) | Unidentifiable(_) => ErrorClass::Validation,
            InfeasibleStep { .. }
            | BoundViolation { .. }
            | DegenerateLikelihood(_)
            | NoFeasibleThresholds { .. }
            | IonEscaped { .. }
            | NonConvergence(_) => ErrorClass::Numerical,
            Io(_) | Json(_) | Csv(_) => ErrorClass::Io,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.class() {
            ErrorClass::Validation => 2,
            ErrorClass::Numerical => 3,
            ErrorClass::Io => 1,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
