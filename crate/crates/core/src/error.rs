use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at layer {layer} ({kind}): {detail}")]
    Shape {
        layer: usize,
        kind: &'static str,
        detail: String,
    },

    #[error("tensor shape {shape:?} does not match data length {len}")]
    TensorLength { shape: Vec<usize>, len: usize },

    #[error("backward called without a cached forward pass")]
    BackwardBeforeForward,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("class {class:?} contains no readable images")]
    EmptyClass { class: String },

    #[error("no class subdirectories under {0}")]
    EmptyDirectory(PathBuf),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("action index {0} out of range [0, 8192)")]
    InvalidAction(usize),

    #[error("step called on a finished episode")]
    EpisodeFinished,

    #[error("classifier rejected {attempts} consecutive candidate images; too weak to attack")]
    ClassifierTooWeak { attempts: usize },

    #[error("unknown scenario {0:?}; expected one of: black-box, true-distribution, randomized-others, correct-only")]
    UnknownScenario(String),

    #[error("inconsistent data: {0}")]
    Inconsistent(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
