use thiserror::Error;

use crate::numcore::NumError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("goal {goal:?} is unreachable for an arm of reach {reach}")]
    Unreachable { goal: [f64; 2], reach: f64 },
    #[error("expert reached the goal in {successes}/{episodes} episodes of task {task_id} (need 95%)")]
    ExpertFailure {
        task_id: String,
        successes: usize,
        episodes: usize,
    },
    #[error("{path}:{line}: {msg}")]
    Corpus {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("empty data: {0}")]
    EmptyData(String),
    #[error("model not ready: {0}")]
    NotReady(String),
    #[error("loss term {term} became non-finite at iteration {iter}")]
    Diverged { term: &'static str, iter: usize },
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error("missing artifacts: {0}")]
    MissingArtifacts(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
