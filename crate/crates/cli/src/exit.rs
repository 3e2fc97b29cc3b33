//! Exit codes and the error type that carries them.

use std::fmt;

use adlab::Error;

pub const PASS: i32 = 0;
/// A configured bound check failed, or the run could not establish it.
pub const BOUND: i32 = 1;
/// Invalid configuration, usage or experiment name.
pub const SCHEMA: i32 = 2;
/// A resource cap was exceeded or the output could not be written.
pub const RESOURCE: i32 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn schema(message: impl Into<String>) -> Self {
        Failure {
            code: SCHEMA,
            message: message.into(),
        }
    }

    pub fn from_lib(e: Error) -> Self {
        let code = match &e {
            Error::Usage(_) | Error::Config(_) => SCHEMA,
            Error::Resource { .. } => RESOURCE,
            Error::Domain(_) | Error::Construction(_) | Error::Integration(_) => BOUND,
        };
        let message = match e {
            Error::Usage(m) | Error::Config(m) => m,
            other => other.to_string(),
        };
        Failure { code, message }
    }

    /// Prepends a field path, joining with `.` when the message starts with
    /// a field name of its own.
    pub fn prefixed(self, path: &str) -> Self {
        let starts_with_field = self
            .message
            .split_once(':')
            .is_some_and(|(head, _)| !head.is_empty() && head.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'));
        let message = if starts_with_field {
            format!("{path}.{}", self.message)
        } else {
            format!("{path}: {}", self.message)
        };
        Failure { code: self.code, message }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: RESOURCE,
            message: format!("i/o: {e}"),
        }
    }
}
