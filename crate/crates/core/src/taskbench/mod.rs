//! Synthetic tasks, client partitioners, losses and evaluation metrics.

mod data;
mod io;
mod loss;
mod metrics;
mod partition;

pub use data::{
    gen_classification, gen_detection, gen_segmentation, BBox, ClassificationTask, ImageTask,
    Label, PatchRect, Sample,
};
pub use io::{load_dataset, read_dataset, save_dataset, write_dataset};
pub use loss::{loss_classification, loss_detection, loss_segmentation, task_loss, SEG_DICE_EPS};
pub use metrics::{
    auc_binary, iou, metric_auc, metric_dice, metric_map, metric_map_at, Detection, MacroAuc,
    MAP_THRESHOLDS,
};
pub use partition::{
    partition_iid, partition_noniid, scale_counts, table1_spec, PartitionPlan, TABLE1_COUNTS,
};

use thiserror::Error;

use crate::tensor::TensorError;
use crate::transport::CodecError;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid data request: {0}")]
    Invalid(String),
    #[error("infeasible partition: {0}")]
    Infeasible(String),
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
