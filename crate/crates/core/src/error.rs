use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("channel must have at most 15 paths, got {0}")]
    PathCount(usize),
    #[error("flat channel vector must have 60 entries, got {0}")]
    FlatLength(usize),
    #[error("non-finite value in channel data")]
    NonFinite,
    #[error("invalid multipath component: {0}")]
    InvalidMpc(String),
    #[error("distance must be positive and finite, got {0}")]
    InvalidDistance(f64),
    #[error("components are not sorted by descending gain")]
    Unsorted,
    #[error("expected an unnormalized vector")]
    NormalizedInput,
    #[error("expected a normalized vector")]
    UnnormalizedInput,
    #[error("normalization range for feature {0} is empty")]
    DegenerateStats(usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("record {record}: expected {expected} columns, got {got}")]
    ColumnCount { record: usize, expected: usize, got: usize },
    #[error("record {record}: bad header, expected `{expected}` got `{got}`")]
    Header {
        record: usize,
        expected: String,
        got: String,
    },
    #[error("record {record}: {source}")]
    Invalid {
        record: usize,
        #[source]
        source: ChannelError,
    },
    #[error("record {record}: cannot parse `{value}` as a number")]
    Parse { record: usize, value: String },
}

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("empty profile: no strictly positive power")]
    EmptyProfile,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate design: all distances are equal")]
    DegenerateDesign,
    #[error("grid mismatch between compared profiles")]
    GridMismatch,
    #[error("band csv: {0}")]
    Csv(String),
    #[error("channel {id}: {source}")]
    Channel {
        id: String,
        #[source]
        source: Box<StatsError>,
    },
    #[error(transparent)]
    ChannelData(#[from] ChannelError),
}

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid simulator configuration: {0}")]
    Config(String),
    #[error("correlation matrix is not positive semidefinite (min eigenvalue {0})")]
    NotPsd(f64),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

#[derive(Debug, Error, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: [usize; 3],
        rhs: [usize; 3],
    },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("non-finite value first produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter structure mismatch: {0}")]
    Structure(String),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint file is truncated")]
    Truncated,
    #[error("checkpoint content hash mismatch")]
    HashMismatch,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("non-finite {what} in {phase} at epoch {epoch}")]
    NonFinite {
        phase: &'static str,
        what: String,
        epoch: u64,
    },
    #[error("fine-tuning requires a pretrained checkpoint")]
    NotPretrained,
    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),
}
