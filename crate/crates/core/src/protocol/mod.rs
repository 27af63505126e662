//! Training strategies as message-driven state machines: FeSTA, split
//! learning, federated learning and the centralized reference.

mod centralized;
mod client;
mod cursor;
mod eval;
mod fedavg;
mod report;
mod scheme;
mod server;
mod setup;

pub use centralized::{batch_stream, CentralTask, Centralized};
pub use client::{run_client, split_head_pass, split_tail_pass, ClientState, HeadPass, LocalBody};
pub use cursor::BatchCursor;
pub use eval::{evaluate_model, mean_metrics, TaskMetrics, TaskModel};
pub use fedavg::fedavg;
pub use report::ClientLoss;
pub use report::{Phase, RoundReport};
pub use scheme::Scheme;
pub use server::{body_pass, BodyPass, ClientModel, Peer, ServerState, Session, TrainedModels};
pub use setup::{
    build_participants, composed_grads, init_body, init_registries, init_registry, join_clients,
    spawn_inproc, spawn_tcp_loopback, ClientHandles, Strategy, TrainConfig,
};

use thiserror::Error;

use crate::model::ModelError;
use crate::taskbench::DataError;
use crate::tensor::TensorError;
use crate::transport::{CodecError, TransportError};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("unexpected message: {0}")]
    Unexpected(String),
    #[error("round {round} aborted and rolled back: {source}")]
    Aborted {
        round: u32,
        #[source]
        source: Box<ProtocolError>,
    },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl ProtocolError {
    /// True for errors caused by the configuration rather than by the run.
    pub fn is_config(&self) -> bool {
        match self {
            ProtocolError::Config(_) => true,
            ProtocolError::Model(ModelError::Config(_) | ModelError::Dimension { .. }) => true,
            ProtocolError::Aborted { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T, E = ProtocolError> = std::result::Result<T, E>;
