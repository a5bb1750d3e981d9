use thiserror::Error;

#[derive(Debug, Error)]
pub enum IccError {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at data row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("invalid contrast: {0}")]
    InvalidContrast(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("relevance failure: {0}")]
    Relevance(String),

    #[error("identification error: {0}")]
    Identification(String),

    #[error("common-support error: {0}")]
    CommonSupport(String),

    #[error("cell-support error: {0}")]
    CellSupport(String),

    #[error("cell-size error: {0}")]
    CellSize(String),

    #[error("binning error: {0}")]
    Binning(String),

    #[error("no null space to perturb along: {0}")]
    NoPerturbation(String),

    #[error("spec error: {0}")]
    Spec(String),

    #[error("config error at '{path}': {message}")]
    Config { path: String, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl IccError {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        IccError::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors that mean the estimand is not identified from the data at hand.
    pub fn is_identification_failure(&self) -> bool {
        matches!(
            self,
            IccError::Identification(_)
                | IccError::Relevance(_)
                | IccError::CommonSupport(_)
                | IccError::CellSupport(_)
                | IccError::Singular(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, IccError>;
