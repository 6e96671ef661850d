use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A model violates one of the linear-MDP invariants.
    #[error("invalid model: {0}")]
    Validation(String),
    /// An algorithmic contract was broken at run time (reward out of range,
    /// undefined policy at a reached state, infeasible oracle output, ...).
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors that the command-line front end reports with exit code 2.
    pub fn is_contract(&self) -> bool {
        matches!(
            self,
            Error::Contract(_) | Error::Validation(_) | Error::Parameter(_)
        )
    }
}
