use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Axis label used in geometry errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl core::fmt::Display for Axis {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        })
    }
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum Error {
    #[error("coordinate {coord:?} out of range for dims {dims:?}")]
    OutOfRange { coord: [usize; 3], dims: [usize; 3] },

    #[error("body extent {extent} exceeds kernel size {kernel} on axis {axis}")]
    KernelTooSmall { axis: Axis, extent: usize, kernel: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid structure set: {0}")]
    InvalidStructures(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("phantom generation failed: {0}")]
    Generation(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("solver diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("plan {index}: {source}")]
    PlanFailed {
        index: usize,
        #[source]
        source: alloc::boxed::Box<Error>,
    },

    #[error("missing DVH for structure `{0}`")]
    MissingDvh(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at iteration {iteration} (loss {loss})")]
    TrainingDiverged { iteration: usize, loss: f64 },

    #[error("adaptation error: {0}")]
    Adaptation(String),

    #[error("model `{model}`: {source}")]
    Model {
        model: String,
        #[source]
        source: alloc::boxed::Box<Error>,
    },
}

impl Error {
    pub(crate) fn in_plan(self, index: usize) -> Self {
        Error::PlanFailed {
            index,
            source: alloc::boxed::Box::new(self),
        }
    }

    pub(crate) fn in_model(self, model: &str) -> Self {
        Error::Model {
            model: model.into(),
            source: alloc::boxed::Box::new(self),
        }
    }
}
