use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("non-finite gradient encountered in parameter group {0}")]
    NonFiniteGradient(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("slot {slot} exceeds the horizon of {horizon} slots")]
    SlotOverflow { slot: usize, horizon: usize },

    #[error("ratio {ratio} is not in the admissible set of device {device}")]
    UnknownRatio { device: usize, ratio: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("joint action space has {size} entries, above the cap of {cap}")]
    ActionSpaceTooLarge { size: usize, cap: usize },

    #[error("unknown variant tag {0:?}")]
    UnknownVariant(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}
