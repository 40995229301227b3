use std::path::PathBuf;

pub type Result<T, E = AppError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("cannot read {}: {reason}", path.display())]
    UnreadableFile { path: PathBuf, reason: String },
    #[error("{}: expected 3D scalar data, header has dim = {dims:?}", path.display())]
    Non3dData { path: PathBuf, dims: Vec<i64> },
    #[error("{}: {count} non-finite voxel values", path.display())]
    NonFiniteValues { path: PathBuf, count: usize },
    #[error("cannot write {}: {reason}", path.display())]
    UnwritablePath { path: PathBuf, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("case ids differ between reference and synthetic sets; unmatched: {}", .0.join(", "))]
    CaseMismatch(Vec<String>),
    #[error(transparent)]
    Core(#[from] afp_core::Error),
}

impl AppError {
    /// Process exit status: 1 for configuration problems, 2 for everything
    /// that fails at run time.
    pub fn exit_code(&self) -> i32 {
        use afp_core::Error as E;
        match self {
            AppError::Config(_) => 1,
            AppError::Core(
                E::InvalidConfig(_)
                | E::ConfigConflict(_)
                | E::SpecInvalid(_)
                | E::BadFractions(_)
                | E::UnknownTapId(_),
            ) => 1,
            _ => 2,
        }
    }

    pub(crate) fn read(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        AppError::UnreadableFile {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    pub(crate) fn write(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        AppError::UnwritablePath {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
