use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("stability bound dt*max(a) <= {bound} violated: dt = {dt:e}, required dt <= {required:e}")]
    Stability { dt: f64, required: f64, bound: f64 },

    #[error("step size underflow on [{t0}, {t1}]: system too stiff for the requested tolerance")]
    Stiffness { t0: f64, t1: f64 },

    #[error("fraction undefined: total mass is zero")]
    UndefinedFraction,

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed snapshot: {0}")]
    Snapshot(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
