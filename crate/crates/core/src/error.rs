use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("cannot resolve {paths} paths from {available} measurement rows")]
    TooManyPaths { paths: usize, available: usize },

    #[error("rank-deficient least-squares system{}: {context}", user_suffix(*.user))]
    RankDeficient { user: Option<usize>, context: String },

    #[error("pilot sequence must have unit norm, got {0}")]
    PilotNorm(f64),

    #[error("degenerate sounding design: {0}")]
    DegenerateDesign(String),

    #[error("measurement set is missing {0}")]
    MissingStage(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

fn user_suffix(user: Option<usize>) -> String {
    match user {
        Some(u) => format!(" for user {u}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn with_user(self, user: usize) -> Self {
        match self {
            Error::RankDeficient { context, .. } => Error::RankDeficient {
                user: Some(user),
                context,
            },
            other => other,
        }
    }
}
