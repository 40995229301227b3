use alloc::string::String;

/// Errors raised by the core pipeline.
///
/// Variants map one-to-one onto the failure modes each operation documents,
/// so callers (and the CLI's exit-code policy) can match on them.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("volume contains {count} non-finite values")]
    NonFiniteValues { count: usize },
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("geometry mismatch: {0}")]
    Misaligned(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("resampling would produce an empty axis")]
    DegenerateOutput,
    #[error("cannot z-score a constant volume")]
    ConstantVolume,
    #[error("foreground is empty")]
    EmptyForeground,
    #[error("foreground intensities are constant")]
    ConstantForeground,
    #[error("invalid phantom spec: {0}")]
    SpecInvalid(String),
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    BadFractions([f64; 3]),
    #[error("input shape {shape:?} incompatible with network: {reason}")]
    ShapeIncompatible { shape: [usize; 3], reason: String },
    #[error("unknown feature tap `{0}`")]
    UnknownTapId(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("model is frozen; parameters cannot be updated")]
    Frozen,
    #[error("feature extractor must be frozen before use in a loss")]
    ExtractorNotFrozen,
    #[error("configuration conflict: {0}")]
    ConfigConflict(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },
    #[error("label {label} outside of the model's {out_labels} output classes")]
    LabelOutOfRange { label: u32, out_labels: usize },
    #[error("feature lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("patch {patch:?} does not fit in volume {shape:?}")]
    PatchTooLarge {
        patch: [usize; 3],
        shape: [usize; 3],
    },
    #[error("expected {expected} patch outputs, got {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error("checkpoint does not match its configuration: {0}")]
    CheckpointMismatch(String),
}

pub type Result<T> = core::result::Result<T, Error>;
