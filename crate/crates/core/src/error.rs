use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the clustering library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("parse error in {path} (line {line}): {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("row {row} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        row: usize,
        expected: usize,
        got: usize,
    },

    #[error("duplicate utterance id {id:?}")]
    DuplicateId { id: String },

    #[error("row {row} ({id:?}) has zero norm; cosine is undefined")]
    ZeroNorm { row: usize, id: String },

    #[error("utterance id {id:?} is not present in the embedding set")]
    UnknownId { id: String },

    #[error("label file {path} is empty")]
    EmptyLabels { path: PathBuf },

    #[error("descriptor {name} undefined: needs at least 2 classes, got {classes}")]
    DescriptorUndefined { name: &'static str, classes: usize },

    #[error("k = {k} must be positive and smaller than the sample count {n}")]
    InvalidK { k: usize, n: usize },

    #[error("knee selection needs at least 3 candidates, got {0}")]
    TooFewCandidates(usize),

    #[error("graph has zero total edge weight; flow is undefined")]
    ZeroTotalWeight,

    #[error("partition covers {partition} nodes but the graph has {graph}")]
    PartitionSizeMismatch { partition: usize, graph: usize },

    #[error("node {node} carries flow but is unassigned in the partition")]
    UncoveredNode { node: usize },

    #[error("partition has no assigned samples")]
    EmptyPartition,

    #[error("cluster id {cluster} out of range (partition has {clusters} clusters)")]
    InvalidCluster { cluster: usize, clusters: usize },

    #[error("sub-center training requires at least 2 clusters, got {0}")]
    SingleCluster(usize),

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("model was trained for {model} classes but the partition has {partition}")]
    ClassCountMismatch { model: usize, partition: usize },

    #[error("dominance threshold tau = {0} must lie in (0, 1]")]
    InvalidTau(f64),

    #[error("merge schedule start {start} must exceed the final threshold {cmd}")]
    InvalidSchedule { start: f64, cmd: f64 },

    #[error("merge schedule needs at least 1 step")]
    EmptySchedule,

    #[error("{name} = {value} is outside [0, 1]")]
    InvalidRate { name: &'static str, value: f64 },

    #[error("requested {requested} {what}, but only {available} are available")]
    InsufficientSamples {
        what: &'static str,
        requested: usize,
        available: usize,
    },

    #[error("ground truth does not cover node {node} ({id:?})")]
    MissingTruth { node: usize, id: String },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
