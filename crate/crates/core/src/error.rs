use std::fmt;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    /// A test function or evaluator produced a non-finite value at a support point.
    #[error("non-finite value of {what} at point index {index}")]
    NonFinite { what: String, index: usize },

    /// A derivative the caller asked for was not provided by the function.
    #[error("missing partial derivative {0}")]
    MissingPartial(String),

    #[error("simulation blew up at step {step} (t = {time}), particle {particle}")]
    BlowUp {
        step: usize,
        time: f64,
        particle: usize,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid configuration:\n{0}")]
    Config(ConfigIssues),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Location of a configuration problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigIssue {
    /// 1-based line number, when the issue is tied to a line.
    pub line: Option<usize>,
    pub key: String,
    pub message: String,
}

/// Every violation found while validating a configuration, not just the first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfigIssues(pub Vec<ConfigIssue>);

impl ConfigIssues {
    pub fn push(&mut self, line: Option<usize>, key: impl Into<String>, message: impl Into<String>) {
        self.0.push(ConfigIssue {
            line,
            key: key.into(),
            message: message.into(),
        });
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ConfigIssue> {
        self.0.iter()
    }
}

impl fmt::Display for ConfigIssues {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for issue in &self.0 {
            match issue.line {
                Some(line) => writeln!(f, "  line {line}: {}: {}", issue.key, issue.message)?,
                None => writeln!(f, "  {}: {}", issue.key, issue.message)?,
            }
        }
        Ok(())
    }
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
