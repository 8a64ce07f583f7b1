use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: missing file")]
    MissingFile { path: PathBuf },
    #[error("{path}: malformed manifest: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("{file}: expected {expected} rows, found {found}")]
    RowCount { file: String, expected: usize, found: usize },
    #[error("{file}: row {row}: expected {expected} columns, found {found}")]
    ColumnCount { file: String, row: usize, expected: usize, found: usize },
    #[error("{file}: row {row}, column {col}: non-numeric cell {cell:?}")]
    NonNumeric { file: String, row: usize, col: usize, cell: String },
    #[error("{file}: row {row}, column {col}: negative count {value}")]
    NegativeCount { file: String, row: usize, col: usize, value: f64 },
    #[error("{file}: row {row}, column {col}: non-finite value")]
    NonFiniteCell { file: String, row: usize, col: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("dataset does not match model: {0}")]
    Mismatch(String),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFiniteLoss { epoch: usize, detail: String },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("dataset fingerprint mismatch: checkpoint has {expected}, dataset has {found}")]
    Fingerprint { expected: String, found: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
}
