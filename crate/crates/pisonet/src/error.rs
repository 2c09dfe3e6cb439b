use crate::phase::Violation;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("instance validation failed: {}", format_violations(.0))]
    InvalidInstance(Vec<Violation>),
    #[error("unsupported latent variant: {0}")]
    UnsupportedVariant(String),
    #[error("conjugate point: boundary block singular for agent {agent} (cond {cond:.3e})")]
    ConjugatePoint { agent: usize, cond: f64 },
    #[error("non-finite matrix input")]
    NonFiniteMatrix,
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("family/instance mismatch: {0}")]
    Mismatch(String),
    #[error("non-finite loss at step {step} (instance {instance})")]
    NonFiniteLoss { step: usize, instance: usize },
    #[error("eikonal target inside an obstacle")]
    TargetInObstacle,
    #[error("no admissible reference path: {0:?}")]
    NoAdmissiblePath(Vec<String>),
    #[error("rejection budget exhausted sampling instance {index} of family {family}")]
    RejectionBudget { family: String, index: usize },
    #[error("unknown family name: {0}")]
    UnknownFamily(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T> = std::result::Result<T, Error>;
