use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("action {action} out of range for agent {agent} with {count} actions")]
    ActionOutOfRange {
        agent: usize,
        action: usize,
        count: usize,
    },

    #[error("episode already terminated")]
    EpisodeTerminated,

    #[error("history has zero probability under the observation model")]
    ZeroProbabilityHistory,

    #[error("joint action space of {0} entries exceeds the enumeration limit")]
    JointSpaceTooLarge(usize),

    #[error("target table does not satisfy IGM (witness {witness:?})")]
    NotIgm { witness: Option<Vec<usize>> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step} (seed {seed}): {detail}")]
    Diverged {
        step: u64,
        seed: u64,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
