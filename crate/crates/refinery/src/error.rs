use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. Variants map onto the CLI exit-code contract:
/// validation problems (bad shapes, labels, specs, configs, malformed input
/// files) exit with 1, runtime failures (I/O, non-finite values) with 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid spec: {0}")]
    Spec(String),

    #[error("label {label} out of range [0,{num_classes}) at pixel (n={n}, y={y}, x={x})")]
    Label {
        label: u8,
        num_classes: usize,
        n: usize,
        y: usize,
        x: usize,
    },

    #[error("{0}")]
    Format(String),

    #[error("{0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{ctx}: {source}")]
    Context {
        ctx: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Exit code for the CLI: 0 success, 1 validation failure, 2 runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::NonFinite(_) => 2,
            Error::Context { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}

pub trait ResultExt<T> {
    /// Wrap an error with provenance (e.g. which block or file it came from).
    fn context(self, ctx: impl Into<String>) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context(self, ctx: impl Into<String>) -> Result<T> {
        self.map_err(|e| Error::Context {
            ctx: ctx.into(),
            source: Box::new(e),
        })
    }
}
