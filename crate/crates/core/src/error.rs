use std::fmt;

/// A matrix shape, printed as `rows×cols`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape(pub usize, pub usize);

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}×{}", self.0, self.1)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("training diverged at step {step}: loss {loss}, lambda {lambda:?}")]
    Divergence {
        step: usize,
        loss: f64,
        lambda: Vec<f64>,
    },
    #[error("annotation error: {0}")]
    Annotation(String),
    #[error("report comparison error: {0}")]
    Comparison(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape {
            op,
            left: Shape(left.0, left.1),
            right: Shape(right.0, right.1),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
