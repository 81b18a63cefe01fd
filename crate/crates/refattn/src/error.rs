//! Crate-wide error type.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    Shape { op: &'static str, detail: String },
    /// An argument is outside the operation's domain (bad k, even patch size, ...).
    Argument(String),
    /// Invalid configuration (negative loss weight, indivisible head count, ...).
    Config(String),
    /// A non-finite value was produced where the contract requires finite data.
    NonFinite { context: String },
    /// Anything that went wrong reading or writing files.
    Io(std::io::Error),
    /// PNG decode/encode failure.
    Image(image::ImageError),
    /// JSON (config, manifest, sidecar) failure.
    Json(serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Exit code the CLI maps this error to: 1 for usage problems, 2 for numerics.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } => 2,
            _ => 1,
        }
    }
}

impl std::fmt::Display for Error {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::Argument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
            Error::Image(e) => write!(f, "image error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Image(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
