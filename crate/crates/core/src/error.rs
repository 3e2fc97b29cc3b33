use thiserror::Error;

/// Failure categories shared by every module.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("resource cap exceeded: {what} needs {requested}, cap is {cap}")]
    Resource {
        what: String,
        requested: usize,
        cap: usize,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("construction error: {0}")]
    Construction(String),
    #[error("integration error: {0}")]
    Integration(String),
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn resource(what: impl Into<String>, requested: usize, cap: usize) -> Self {
        Error::Resource {
            what: what.into(),
            requested,
            cap,
        }
    }
}
