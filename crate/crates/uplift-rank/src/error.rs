//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{0}")]
    Domain(String),

    #[error("unknown user id {0}")]
    UnknownUser(u64),

    #[error("unknown item id {0}")]
    UnknownItem(u64),

    #[error("item {0} has no category assignment")]
    Uncategorized(u64),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("no feasible allocation: category {category} cannot meet the deviation budget")]
    Infeasible { category: usize },

    #[error("stale artifact for stage `{stage}`: config hash changed, refusing to resume")]
    StaleArtifact { stage: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wraps an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &str) -> Error {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
