use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the simulator and its front ends.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("config file not found: {}", .0.display())]
    ConfigNotFound(PathBuf),

    #[error("config schema violation: {0}")]
    ConfigSchema(String),

    #[error("bad override `{0}`: {1}")]
    Override(String, String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV output error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON output error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the user's configuration rather than the run itself.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Parameter { .. }
                | Error::Unsupported(_)
                | Error::ConfigNotFound(_)
                | Error::ConfigSchema(_)
                | Error::Override(..)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_probability(name: &'static str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::param(
            name,
            format!("{p} is not a probability in [0, 1]"),
        ));
    }
    Ok(())
}

pub(crate) fn check_non_negative(name: &'static str, x: f64) -> Result<()> {
    if !(x >= 0.0 && x.is_finite()) {
        return Err(Error::param(
            name,
            format!("{x} must be a finite value >= 0"),
        ));
    }
    Ok(())
}
