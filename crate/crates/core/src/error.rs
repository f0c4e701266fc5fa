use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed model: {0}")]
    MalformedModel(String),

    #[error("invalid model: {field} ({detail})")]
    InvalidModel { field: &'static str, detail: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid frame: {width}x{height}")]
    InvalidFrame { width: f64, height: f64 },

    #[error("invalid scale: {0}")]
    InvalidScale(f64),

    #[error("behind camera: depth {depth}")]
    BehindCamera { depth: f64 },

    #[error("no supervision")]
    NoSupervision,

    #[error("sequence too short: {len} frames, need at least 3")]
    SequenceTooShort { len: usize },

    #[error("invalid prior: {0}")]
    InvalidPrior(String),

    #[error("not differentiable: {0}")]
    NotDifferentiable(String),

    #[error("diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("invalid dsp config: {0}")]
    InvalidDspConfig(String),

    #[error("window out of bounds: {0}")]
    WindowOutOfBounds(String),

    #[error("rank deficient")]
    RankDeficient,

    #[error("identical samples")]
    IdenticalSamples,

    #[error("too few samples: {n} non-zero differences, need at least {min}")]
    TooFewSamples { n: usize, min: usize },

    #[error("degenerate bbox")]
    DegenerateBbox,

    #[error("invalid bbox: {0}")]
    InvalidBbox(String),

    #[error("corrupt dataset: {0}")]
    CorruptDataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("audio required")]
    AudioRequired,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
