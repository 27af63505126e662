use serde::{Deserialize, Serialize};

use super::{ProtocolError, Result};
use crate::model::{predict_composed, Body, Head, ParamSet, Prediction, Tail};
use crate::task::TaskKind;
use crate::taskbench::{metric_auc, metric_dice, metric_map, Detection, Label, Sample};
use crate::tensor::Tensor;

/// Borrowed head, body and tail forming one predictor.
#[derive(Debug, Clone, Copy)]
pub struct TaskModel<'a> {
    pub head: (&'a Head, &'a ParamSet),
    pub body: (&'a Body, &'a ParamSet),
    pub tail: (&'a Tail, &'a ParamSet),
}

/// Task metric: macro AUC, mean Dice, or mAP. Classification also reports accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: TaskKind,
    pub metric: f64,
    pub accuracy: Option<f64>,
    pub samples: usize,
}

impl TaskMetrics {
    pub fn metric_name(task: TaskKind) -> &'static str {
        match task {
            TaskKind::Classification => "auc",
            TaskKind::Segmentation => "dice",
            TaskKind::Detection => "map",
        }
    }
}

fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = logits.iter().map(|v| (v - max).exp()).collect();
    let s: f32 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn evaluate_model(model: &TaskModel<'_>, samples: &[Sample]) -> Result<TaskMetrics> {
    let task = model.tail.0.task();
    if samples.is_empty() {
        return Err(ProtocolError::Config(format!("empty {task} test set")));
    }
    let predict = |x: &Tensor| predict_composed(model.head, model.body, model.tail, x);
    match task {
        TaskKind::Classification => {
            let mut scores = Vec::with_capacity(samples.len());
            let mut labels = Vec::with_capacity(samples.len());
            let mut correct = 0usize;
            for s in samples {
                let (Prediction::ClassLogits(logits), Label::Class(c)) =
                    (predict(&s.features)?, &s.label)
                else {
                    return Err(ProtocolError::Unexpected(
                        "classification output/label mismatch".into(),
                    ));
                };
                let argmax = logits
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .expect("non-empty logits");
                correct += usize::from(argmax == *c);
                scores.push(softmax(&logits));
                labels.push(*c);
            }
            Ok(TaskMetrics {
                task,
                metric: metric_auc(&scores, &labels)?.macro_avg,
                accuracy: Some(correct as f64 / samples.len() as f64),
                samples: samples.len(),
            })
        }
        TaskKind::Segmentation => {
            let mut total = 0.0;
            for s in samples {
                let (Prediction::MaskLogits(logits), Label::Mask(gt)) =
                    (predict(&s.features)?, &s.label)
                else {
                    return Err(ProtocolError::Unexpected(
                        "segmentation output/label mismatch".into(),
                    ));
                };
                let pred: Vec<u8> = logits.iter().map(|&v| u8::from(v > 0.0)).collect();
                total += metric_dice(&pred, gt);
            }
            Ok(TaskMetrics {
                task,
                metric: total / samples.len() as f64,
                accuracy: None,
                samples: samples.len(),
            })
        }
        TaskKind::Detection => {
            let mut dets = Vec::with_capacity(samples.len());
            let mut gts = Vec::with_capacity(samples.len());
            for (image, s) in samples.iter().enumerate() {
                let (
                    Prediction::Box { bbox, objectness },
                    Label::Box {
                        bbox: gt,
                        objectness: present,
                    },
                ) = (predict(&s.features)?, &s.label)
                else {
                    return Err(ProtocolError::Unexpected(
                        "detection output/label mismatch".into(),
                    ));
                };
                dets.push(Detection {
                    image,
                    bbox,
                    score: 1.0 / (1.0 + (-objectness).exp()),
                });
                gts.push(if *present == 1 { vec![*gt] } else { Vec::new() });
            }
            Ok(TaskMetrics {
                task,
                metric: metric_map(&dets, &gts),
                accuracy: None,
                samples: samples.len(),
            })
        }
    }
}

/// Average of per-client metrics for one task.
pub fn mean_metrics(list: &[TaskMetrics]) -> Result<TaskMetrics> {
    let first = list
        .first()
        .ok_or_else(|| ProtocolError::Config("no metrics to average".into()))?;
    if list.iter().any(|m| m.task != first.task) {
        return Err(ProtocolError::Config(
            "cannot average metrics of different tasks".into(),
        ));
    }
    let n = list.len() as f64;
    Ok(TaskMetrics {
        task: first.task,
        metric: list.iter().map(|m| m.metric).sum::<f64>() / n,
        accuracy: first
            .accuracy
            .map(|_| list.iter().map(|m| m.accuracy.unwrap_or(0.0)).sum::<f64>() / n),
        samples: first.samples,
    })
}
