use std::fmt;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// A single reason a matrix fails to be a stable-conservative generator.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NonFinite { row: usize, col: usize },
    NegativeOffDiagonal { row: usize, col: usize, value: f64 },
    PositiveDiagonal { row: usize, value: f64 },
    NonzeroRowSum { row: usize, sum: f64 },
    NonAbsorbingLastRow { col: usize, value: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // 1-based indices in messages, matching rating numbering.
        match *self {
            Violation::NonFinite { row, col } => {
                write!(f, "entry ({},{}) is not finite", row + 1, col + 1)
            }
            Violation::NegativeOffDiagonal { row, col, value } => write!(
                f,
                "off-diagonal entry ({},{}) is negative: {value:e}",
                row + 1,
                col + 1
            ),
            Violation::PositiveDiagonal { row, value } => {
                write!(f, "diagonal entry ({0},{0}) is positive: {value:e}", row + 1)
            }
            Violation::NonzeroRowSum { row, sum } => {
                write!(f, "row {} sums to {sum:e} instead of 0", row + 1)
            }
            Violation::NonAbsorbingLastRow { col, value } => write!(
                f,
                "last row is not absorbing: entry {} is {value:e}",
                col + 1
            ),
        }
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("dimension mismatch: {0}")]
    DimensionError(String),

    #[error("matrix logarithm undefined: eigenvalue {0:e} is (numerically) zero")]
    LogUndefined(f64),

    #[error("matrix logarithm failed: {0}")]
    LogFailed(String),

    #[error("not a generator matrix: {}", join_violations(.0))]
    InvalidGenerator(Vec<Violation>),

    #[error("not a transition matrix: {0}")]
    InvalidTransitionMatrix(String),

    #[error("invalid observation set: {0}")]
    InvalidObservations(String),

    #[error("rating {0} is the absorbing state")]
    AbsorbingStateQuery(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "generator misspecified: observed transition {}->{} has model probability {prob:e}",
        .from + 1, .to + 1
    )]
    MisspecifiedGenerator { from: usize, to: usize, prob: f64 },

    #[error("expected holding time of state {} is zero while jumps are expected", .0 + 1)]
    ZeroHoldingTime(usize),

    #[error("pair ({},{}) is not an allowed pair", .0 + 1, .1 + 1)]
    DisallowedPair(usize, usize),

    #[error("information matrix is singular (condition number {0:e})")]
    SingularInformation(f64),

    #[error(
        "rejection sampling budget of {attempts} attempts exceeded for endpoints {}->{}",
        .from + 1, .to + 1
    )]
    RejectionBudgetExceeded { from: usize, to: usize, attempts: u64 },

    #[error("time budget exceeded: {0}")]
    TimeBudgetExceeded(String),

    #[error("true probability of default for rating {} is zero", .0 + 1)]
    ZeroTruePd(usize),
}
