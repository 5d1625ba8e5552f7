use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot read WAV file {path}: {reason}")]
    Wav { path: PathBuf, reason: String },

    #[error("unsupported WAV encoding in {path}: fmt code {format_code}, {bits} bits, {channels} channel(s)")]
    UnsupportedEncoding {
        path: PathBuf,
        format_code: u16,
        bits: u16,
        channels: u16,
    },

    #[error("WAV file {0} has an empty data chunk")]
    EmptyAudio(PathBuf),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{op}: shape mismatch, {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter {0} has no gradient")]
    MissingGradient(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("external encoder not found while running `{program}` (template: {template}); install it, set {env_var}, or use the builtin engine")]
    EncoderMissing {
        program: String,
        template: String,
        env_var: &'static str,
    },

    #[error("external encoder `{command}` exited with {status}: {stderr}")]
    EncoderFailed {
        command: String,
        status: String,
        stderr: String,
    },

    #[error("codec augmentation failed for {id} ({path}): {source}")]
    Augment {
        id: String,
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged: loss is NaN at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
