use thiserror::Error;

use crate::UserId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("cell ({cx}, {cy}) outside a {side}x{side} grid")]
    CellOutOfRange { cx: u32, cy: u32, side: u32 },
    #[error("z-value {0} outside the curve domain")]
    ZOutOfRange(u64),
    #[error("timestamp {0} is not on the label grid")]
    NotALabel(f64),
    #[error("{field} value {value} does not fit in {bits} bits")]
    FieldOverflow { field: &'static str, value: u64, bits: u32 },
    #[error("sequence value {0} cannot be quantized")]
    BadSequenceValue(f64),
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("user {owner} already has a policy covering viewer {viewer}")]
    DuplicatePairPolicy { owner: UserId, viewer: UserId },
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("entry (key {key}, uid {uid}) already indexed")]
    DuplicateEntry { key: u64, uid: UserId },
    #[error("entry (key {key}, uid {uid}) not found")]
    MissingEntry { key: u64, uid: UserId },
    #[error("time partition {tid} still holds entries labelled {held}, cannot accept label {incoming}")]
    PartitionConflict { tid: u32, held: f64, incoming: f64 },
    #[error("user {0} has no sequence value")]
    NoSequenceValue(UserId),
    #[error("operation needs a {expected} index")]
    WrongIndex { expected: &'static str },
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("infeasible workload: {0}")]
    Infeasible(String),
    #[error("singular cost-model fit: {0}")]
    SingularFit(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
