use std::collections::BTreeMap;

use super::setup::{composed_grads, init_body, init_registry, TrainConfig};
use super::{BatchCursor, ProtocolError, Result, Scheme};
use crate::model::{clip_gradients, Body, Head, ModelSpec, Optimizer, ParamSet, Tail};
use crate::seed::rng_for;
use crate::task::TaskKind;
use crate::taskbench::Sample;

/// Pooled data and model parts of one task in the centralized reference.
#[derive(Debug, Clone)]
pub struct CentralTask {
    pub head: Head,
    pub head_params: ParamSet,
    pub tail: Tail,
    pub tail_params: ParamSet,
    pub data: Vec<Sample>,
    head_opt: Optimizer,
    tail_opt: Optimizer,
    cursor: BatchCursor,
}

/// Monolithic head→body→tail training on pooled data. Each task draws a batch
/// of `batch × clients` samples per round.
#[derive(Debug, Clone)]
pub struct Centralized {
    pub cfg: TrainConfig,
    pub scheme: Scheme,
    pub lambda: [f32; 3],
    pub body_net: Body,
    pub body: ParamSet,
    pub tasks: BTreeMap<TaskKind, CentralTask>,
    body_opt: Optimizer,
    round: u32,
}

impl Centralized {
    /// `data` maps each task to its pooled samples and the number of clients it stands in for.
    pub fn new(
        spec: &ModelSpec,
        cfg: TrainConfig,
        scheme: Scheme,
        lambda: [f32; 3],
        data: BTreeMap<TaskKind, (Vec<Sample>, usize)>,
        seed: u64,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(ProtocolError::Config(
                "centralized training needs at least one task".into(),
            ));
        }
        let (body_net, body) = init_body(spec, seed)?;
        let mut tasks = BTreeMap::new();
        for (task, (samples, clients)) in data {
            if samples.is_empty() || clients == 0 {
                return Err(ProtocolError::Config(format!(
                    "{task}: no data or no clients"
                )));
            }
            let ((head, head_params), (tail, tail_params)) = init_registry(task, spec, seed)?;
            let cursor = BatchCursor::new(
                samples.len(),
                cfg.batch * clients,
                rng_for(seed, &batch_stream(task, 0)),
            );
            tasks.insert(
                task,
                CentralTask {
                    head,
                    head_params,
                    tail,
                    tail_params,
                    data: samples,
                    head_opt: Optimizer::new(cfg.client_optimizer),
                    tail_opt: Optimizer::new(cfg.client_optimizer),
                    cursor,
                },
            );
        }
        Ok(Self {
            cfg,
            scheme,
            lambda,
            body_net,
            body,
            tasks,
            body_opt: Optimizer::new(cfg.body_optimizer),
            round: 0,
        })
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    /// One optimisation step over every task; returns the mean loss per task.
    pub fn step(&mut self) -> Result<Vec<(TaskKind, f32)>> {
        let round = self.round + 1;
        let (train_head_tail, train_body) = self.scheme.flags(round);
        let client_lr = self.cfg.client_lr.lr_at(round)? as f32;
        let body_lr = self.cfg.body_lr.lr_at(round)? as f32;
        let k = self.tasks.len() as f32;
        self.body.zero_grads();
        let mut losses = Vec::with_capacity(self.tasks.len());
        for (&task, t) in self.tasks.iter_mut() {
            let lam = self.lambda[usize::from(task.id())];
            let (scale, factor) = if self.cfg.lambda_everywhere {
                (lam, 1.0 / k)
            } else {
                (1.0, lam / k)
            };
            let idx = t.cursor.next_batch();
            let batch: Vec<&Sample> = idx.iter().map(|&i| &t.data[i]).collect();
            let loss = composed_grads(
                (&t.head, &mut t.head_params),
                (&self.body_net, &mut self.body),
                (&t.tail, &mut t.tail_params),
                &batch,
                scale,
                factor,
            )?;
            if train_head_tail {
                if let Some(max) = self.cfg.clip {
                    clip_gradients(&mut t.head_params, max);
                    clip_gradients(&mut t.tail_params, max);
                }
                t.head_opt.step(&mut t.head_params, client_lr)?;
                t.tail_opt.step(&mut t.tail_params, client_lr)?;
            }
            losses.push((task, loss));
        }
        if train_body {
            if let Some(max) = self.cfg.clip {
                clip_gradients(&mut self.body, max);
            }
            self.body_opt.step(&mut self.body, body_lr)?;
        }
        self.round = round;
        Ok(losses)
    }

    pub fn train(&mut self, rounds: u32) -> Result<Vec<Vec<(TaskKind, f32)>>> {
        (0..rounds).map(|_| self.step()).collect()
    }
}

/// Name of the batch-order stream for the `local`-th client of `task`.
pub fn batch_stream(task: TaskKind, local: usize) -> String {
    format!("batch/{task}/{local}")
}
