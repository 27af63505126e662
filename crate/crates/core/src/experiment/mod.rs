//! Experiment configs, presets, run driver, result records and reports.

mod config;
mod data;
mod record;
mod report;
mod runner;
mod tcp;

pub use config::{
    body_preset, canonical_json, preset, ClientCounts, DataConfig, ExperimentConfig, ModelConfig,
    OptimizerChoice, Overrides, PartitionChoice, StrategyChoice, TrainSection, TransportKind,
    PRESETS, TOKENS,
};
pub use data::{build_task_data, TaskData};
pub use record::{
    decode_record_line, encode_record, read_curve, read_records, write_curve, CostSummary,
    CurveRow, RecordSink, ResultRecord, TaskCost,
};
pub use report::{
    build_report, reference_cost_table, render_cost_table, CostRow, Report, ReportRow,
};
pub use runner::{
    drive_session, expected_cost, merge_ledgers, prepare_unit, run_plan, run_seed, Nets, OutputDir,
    Prepared, SeedOutcome, LINK_TIMEOUT,
};
pub use tcp::{run_tcp_client, serve_tcp};

use thiserror::Error;

use crate::protocol::ProtocolError;
use crate::taskbench::DataError;
use crate::transport::{CostError, TransportError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("record line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("no records")]
    NoRecords,
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl ExperimentError {
    pub fn config(field: &str, message: impl Into<String>) -> Self {
        ExperimentError::Config {
            field: field.to_owned(),
            message: message.into(),
        }
    }

    /// True when the failure is attributable to the configuration or inputs.
    pub fn is_config(&self) -> bool {
        match self {
            ExperimentError::Config { .. }
            | ExperimentError::Cost(_)
            | ExperimentError::Record { .. }
            | ExperimentError::NoRecords => true,
            ExperimentError::Protocol(p) => p.is_config(),
            _ => false,
        }
    }
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

impl From<crate::model::ModelError> for ExperimentError {
    fn from(e: crate::model::ModelError) -> Self {
        ExperimentError::Protocol(e.into())
    }
}
