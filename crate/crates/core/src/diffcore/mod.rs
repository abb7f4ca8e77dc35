//! Small reverse-mode differentiation engine: tensors, parameters, a
//! fixed-topology graph over the ops the recommender towers need, and the
//! Adam / SGD optimizers.

mod graph;
mod init;
mod optim;
mod param;
mod tensor;

pub use graph::{bce_loss, sigmoid, DiffGraph, Feeds, GraphBuilder, NodeId, SparseBatch, BCE_EPS};
pub use init::{gaussian_init, gaussian_init_with};
pub use optim::{adam_step, sgd_step, AdamConfig, Optimizer, OptimizerKind};
pub use param::{OptState, ParamId, ParamStore, Parameter};
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("state error: {0}")]
    State(String),
}
