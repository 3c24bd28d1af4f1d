use thiserror::Error;

/// Errors raised by the inference, data and persistence layers.
#[derive(Debug, Error)]
pub enum HemfError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("non-finite value in {module}/{term}")]
    NonFinite { module: &'static str, term: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("invalid chunk: {0}")]
    InvalidChunk(String),

    #[error("unsupported checkpoint schema version {found} (this build reads {supported})")]
    SchemaVersion { found: u32, supported: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("sgd diverged at {side} {index}")]
    Diverged { side: &'static str, index: usize },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<HemfError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HemfError {
    pub fn context(self, context: impl Into<String>) -> Self {
        HemfError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, with all context layers removed.
    pub fn root(&self) -> &HemfError {
        match self {
            HemfError::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures that come from the numerics rather than the input data.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            HemfError::NotPositiveDefinite(_)
                | HemfError::Singular(_)
                | HemfError::NonFinite { .. }
                | HemfError::Diverged { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, HemfError>;

pub(crate) trait ResultExt<T> {
    fn context_with<F: FnOnce() -> String>(self, f: F) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context_with<F: FnOnce() -> String>(self, f: F) -> Result<T> {
        self.map_err(|e| e.context(f()))
    }
}
