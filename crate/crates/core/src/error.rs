use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("corrupt payload: {0}")]
    CorruptPayload(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    /// A runtime check of a conservation or perturbation identity failed.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    /// Wraps an error with the simulator event at which it surfaced.
    pub fn at_event(self, event: u64, time: f64) -> Error {
        let ctx = format!("event {event} (t={time:.6})");
        match self {
            Error::LayoutMismatch(m) => Error::LayoutMismatch(format!("{ctx}: {m}")),
            Error::NonFinite(m) => Error::NonFinite(format!("{ctx}: {m}")),
            Error::CorruptPayload(m) => Error::CorruptPayload(format!("{ctx}: {m}")),
            Error::Protocol(m) => Error::Protocol(format!("{ctx}: {m}")),
            Error::Invariant(m) => Error::Invariant(format!("{ctx}: {m}")),
            other => other,
        }
    }

    pub fn is_invariant(&self) -> bool {
        matches!(self, Error::Invariant(_))
    }
}
