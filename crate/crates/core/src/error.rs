use thiserror::Error;

/// Crate-wide error type. Variants carry enough context to name the
/// offending input, stage, or mask when a pipeline run aborts.
#[derive(Debug, Error)]
pub enum Error {
    #[error("image {dimension} ({value}) is not a multiple of {multiple}")]
    ImageSize {
        dimension: &'static str,
        value: usize,
        multiple: usize,
    },

    #[error("backend does not expose cross-attention site {site}")]
    UnsupportedSite { site: String },

    #[error("timestep {timestep} outside [1, {max}]")]
    TimestepOutOfRange { timestep: u32, max: u32 },

    #[error("invalid timestep schedule: {0}")]
    InvalidSchedule(String),

    #[error("mask is {got_h}x{got_w} but the site grid is {want_h}x{want_w}")]
    MaskShape {
        want_h: usize,
        want_w: usize,
        got_h: usize,
        got_w: usize,
    },

    #[error("{what} contains a non-finite value")]
    NonFinite { what: &'static str },

    #[error("cannot form {requested} clusters from {available} cells")]
    InvalidClusterCount { requested: usize, available: usize },

    #[error("mask selects no cells")]
    EmptyMask,

    #[error("{0} is empty")]
    EmptyInput(&'static str),

    #[error("{what}: expected {want_h}x{want_w}, got {got_h}x{got_w}")]
    DimensionMismatch {
        what: &'static str,
        want_h: usize,
        want_w: usize,
        got_h: usize,
        got_w: usize,
    },

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),

    #[error("text embedding provider failed for class '{class}': {message}")]
    Provider { class: String, message: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("unknown backend '{0}'")]
    UnknownBackend(String),

    #[error("malformed file {path}: {message}")]
    FileFormat { path: String, message: String },

    #[error("mask {mask_index} failed: {source}")]
    MaskFailure {
        mask_index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("config encode error: {0}")]
    TomlSer(#[from] toml::ser::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Tags an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn for_mask(self, mask_index: usize) -> Error {
        Error::MaskFailure {
            mask_index,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
