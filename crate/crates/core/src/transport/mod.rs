//! Wire codec, frame links, byte ledger and the closed-form cost model.

mod cost;
mod frame;
mod ledger;
mod link;
pub mod payload;

pub use cost::{
    closed_form_cost, ledger_vs_model, per_direction, CostBreakdown, CostError, CostModelInput,
    CostStrategy, Inventory, Reconciliation, ReconciliationRow, REFERENCE_FEATURE_MILLIONS,
    REFERENCE_INVENTORY,
};
pub use frame::{Frame, Header, MsgType, HEADER_LEN, MAGIC, MAX_PAYLOAD, VERSION};
pub use ledger::{Category, CostLedger, Counter, Direction, SharedLedger, Traffic};
pub use link::{
    inproc_pair, tcp_listen, tcp_loopback_pair, InprocLink, Link, MeteredLink, Side, TcpLink,
    DEFAULT_TIMEOUT,
};
pub use payload::{decode_tensor, decode_weights, encode_tensor, encode_weights, Control};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("malformed frame: {reason}")]
    MalformedFrame { reason: String },
    #[error("unsupported protocol version {0}")]
    Version(u8),
}

impl CodecError {
    pub fn malformed(reason: impl Into<String>) -> Self {
        CodecError::MalformedFrame {
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("connection lost")]
    ConnectionLost,
    #[error("timed out waiting for peer")]
    Timeout,
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol violation: {0}")]
    Protocol(String),
}
