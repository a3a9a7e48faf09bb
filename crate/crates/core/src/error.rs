use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    // ---- tensors and the tape ----
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor of shape {shape:?} needs {expected} values, got {actual}")]
    BadTensorLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("backward called on a value that was not recorded by this tape")]
    BackwardBeforeForward,
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    // ---- cortical tables and graphs ----
    #[error("{path}: missing required column `{column}`")]
    MissingColumn { path: String, column: String },
    #[error("line {line}: subject {subject} ({hemisphere}) repeats roi_index {roi}")]
    DuplicateRoi {
        line: usize,
        subject: String,
        hemisphere: String,
        roi: usize,
    },
    #[error("line {line}: subject {subject} has non-finite value in `{column}`")]
    NonFiniteValue {
        line: usize,
        subject: String,
        column: String,
    },
    #[error("line {line}: subject {subject} has non-positive cortical_thickness {value}")]
    NonPositiveThickness {
        line: usize,
        subject: String,
        value: f64,
    },
    #[error("subject {subject} ({hemisphere}) has {count} ROI rows, expected {expected}")]
    WrongRoiCount {
        subject: String,
        hemisphere: String,
        count: usize,
        expected: usize,
    },
    #[error("line {line}: {message}")]
    MalformedRow { line: usize, message: String },
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("subject {subject} ({hemisphere}) not present")]
    SubjectNotFound { subject: String, hemisphere: String },
    #[error("node value {value} at index {index} is negative or non-finite")]
    InvalidNodeValue { index: usize, value: f64 },
    #[error("metric `{0}` is constant over the fitting subjects")]
    DegenerateMetric(String),
    #[error("scaler has no entry for metric `{0}`")]
    ScalerMissingMetric(String),

    // ---- diffusion, training, sampling ----
    #[error("timestep {t} outside [1, {steps}]")]
    TimestepOutOfRange { t: usize, steps: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (timesteps {timesteps:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        timesteps: Vec<usize>,
    },
    #[error("numeric failure: {0}")]
    Numeric(String),

    // ---- checkpoints ----
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint tensor `{name}` has shape {found:?}, expected {expected:?}")]
    CheckpointShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint is missing tensor `{0}`")]
    CheckpointMissingTensor(String),
    #[error("checkpoint metadata: {0}")]
    CheckpointMeta(String),

    // ---- io ----
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Coarse grouping used for process exit codes and C error codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            NonFiniteLoss { .. } | Numeric(_) => ErrorClass::Numeric,
            InvalidArgument(_) | UnknownMetric(_) | TimestepOutOfRange { .. } => ErrorClass::Usage,
            _ => ErrorClass::Data,
        }
    }
}
