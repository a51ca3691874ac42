use thiserror::Error;

pub type Result<T> = std::result::Result<T, MbevError>;

#[derive(Debug, Error)]
pub enum MbevError {
    #[error("adjacent views do not overlap: hfov {hfov_deg}° <= spacing {spacing_deg}°")]
    NoOverlap { hfov_deg: f64, spacing_deg: f64 },
    #[error("view index {0} compared with itself")]
    SameView(usize),
    #[error("invalid rig: {0}")]
    InvalidRig(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("scene sampling gave up after {attempts} attempts")]
    SamplingExhausted { attempts: usize },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("file truncated while reading {0}")]
    TruncatedFile(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("k = {0} is outside 0..=5")]
    KOutOfRange(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("view {0} is not masked under this pattern")]
    ViewNotMasked(usize),
    #[error("every view is masked; no context left to reconstruct from")]
    NoContext,
    #[error("no view is masked; reconstruction must be bypassed")]
    NothingToReconstruct,
    #[error("missing tensor {0:?} in checkpoint")]
    MissingTensor(String),
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
}
