//! Exit codes and the single-line error report.

use fluiddiff::{DiffusionError, FluidError, IoError, MetricsError, ModelError, TrainError};

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_SOLVER: i32 = 4;
pub const EXIT_NON_FINITE: i32 = 5;

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn new(code: i32, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            kind,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, "usage", message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new(EXIT_IO, "io", message)
    }

    /// `error code=<n> kind=<kind>: <message>` on one line.
    pub fn line(&self) -> String {
        let msg = self.message.replace(['\n', '\r'], " ");
        format!("error code={} kind={}: {}", self.code, self.kind, msg)
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Scene { .. } => Self::new(EXIT_SOLVER, "solver", e.to_string()),
            _ => Self::io(e.to_string()),
        }
    }
}

impl From<FluidError> for Failure {
    fn from(e: FluidError) -> Self {
        match e {
            FluidError::InvalidParams(_) | FluidError::UnstableDiffusion { .. } => Self::usage(e.to_string()),
            FluidError::PressureSolve { .. } => Self::new(EXIT_SOLVER, "solver", e.to_string()),
        }
    }
}

impl From<DiffusionError> for Failure {
    fn from(e: DiffusionError) -> Self {
        match e {
            DiffusionError::NonFiniteDenoiser { .. } => Self::new(EXIT_NON_FINITE, "non-finite", e.to_string()),
            DiffusionError::InvalidSchedule(_) | DiffusionError::TimeOutOfRange { .. } => Self::usage(e.to_string()),
            _ => Self::new(EXIT_OTHER, "diffusion", e.to_string()),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) => Self::usage(e.to_string()),
            ModelError::Diffusion(d) => d.into(),
            ModelError::NonFiniteActivation { .. } => Self::new(EXIT_NON_FINITE, "non-finite", e.to_string()),
            _ => Self::new(EXIT_OTHER, "model", e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) | TrainError::EmptyDataset => Self::usage(e.to_string()),
            TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient { .. } => {
                Self::new(EXIT_NON_FINITE, "non-finite", e.to_string())
            }
            TrainError::Io(e) => e.into(),
            TrainError::Model(e) => e.into(),
            TrainError::Diffusion(e) => e.into(),
            TrainError::LrStepOutOfRange { .. } => Self::new(EXIT_OTHER, "train", e.to_string()),
        }
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        Self::new(EXIT_OTHER, "metrics", e.to_string())
    }
}
