use segnas::eval::EvalError;
use segnas::rl::RlError;
use segnas::search::SearchError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Evaluator(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Evaluator(_) => 3,
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Handshake(_) | EvalError::Protocol { .. } => CliError::Validation(e.to_string()),
            _ => CliError::Evaluator(e.to_string()),
        }
    }
}

impl From<SearchError> for CliError {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::Rl(RlError::Eval(inner)) => inner.into(),
            SearchError::Io { .. } => CliError::Usage(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}
