//! Head/body/tail networks, parameter sets, optimizers and schedules.

mod config;
mod nets;
mod optim;
mod params;
mod schedule;

pub use config::{BodyConfig, FeatureBlock, ModelSpec};
pub use nets::{
    build_body, build_head, build_tail, predict_composed, Body, Head, Prediction, Tail,
};
pub use optim::{clip_gradients, sgd_step, Adam, Optimizer, OptimizerKind};
pub use params::{Bound, Initializer, Param, ParamSet, Role};
pub use schedule::{Schedule, ScheduleKind};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    Dimension {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("parameter registry: {0}")]
    Registry(String),
    #[error("no gradient available for {0}")]
    MissingGradient(String),
}
