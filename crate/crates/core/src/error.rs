use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or combination of values.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller passed data with the wrong shape or out-of-range index.
    #[error("input error: {0}")]
    Input(String),

    /// Operation called in a state that cannot serve it (e.g. an unwarmed queue).
    #[error("state error: {0}")]
    State(String),

    /// Non-finite values in a loss or input.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// File format problems (version mismatch, checksum mismatch, bad payload).
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A pipeline stage failed; carries the stage name.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}

pub(crate) fn ensure_finite(what: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numeric(format!("{what} is not finite ({value})")))
    }
}
