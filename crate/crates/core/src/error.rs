use thiserror::Error;

use crate::model::FactorId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("state has length {got}, model has {expected} variables")]
    StateLength { expected: usize, got: usize },

    #[error("variable {var} has state {state}, cardinality is {cardinality}")]
    StateOutOfRange {
        var: usize,
        state: usize,
        cardinality: usize,
    },

    #[error("unknown variable {0}")]
    UnknownVariable(usize),

    #[error("unknown factor {0}")]
    UnknownFactor(FactorId),

    #[error("factor {factor}: {reason}")]
    InvalidFactor { factor: FactorId, reason: String },

    #[error("invalid table: {0}")]
    InvalidTable(String),

    #[error("invalid variable: {0}")]
    InvalidVariable(String),

    #[error("infeasible model request: {0}")]
    Infeasible(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("factor {0} is not of Swendsen-Wang form (equal-diagonal Potts with positive coupling)")]
    NotSwendsenWang(FactorId),

    #[error("unsupported dual representation: {0}")]
    Unsupported(String),

    #[error("retained factor set contains a cycle through factor {0}")]
    CyclicPartition(FactorId),

    #[error("cluster containing variable {0} has empty support")]
    EmptySupport(usize),

    #[error("state space of {states} exceeds enumeration cap {cap}")]
    TooLarge { states: f64, cap: u64 },

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
}
