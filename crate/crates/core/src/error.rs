use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] numcore::NumError),

    #[error("scene placement failed after {0} rejections")]
    Placement(usize),

    #[error("no valid {task} question for this scene")]
    NoTemplate { task: &'static str },

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("token id {0} is outside the vocabulary")]
    TokenId(usize),

    #[error("unparseable question: {0}")]
    Question(String),

    #[error("guidance does not match the scene: {0}")]
    Inconsistent(String),

    #[error("invalid image: {0}")]
    Image(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
