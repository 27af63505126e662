use serde::{Deserialize, Serialize};

use crate::task::TaskKind;
use crate::transport::CostLedger;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Joint,
    Finetune,
    BodyOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientLoss {
    pub client: u16,
    pub task: TaskKind,
    pub loss: f32,
}

/// Outcome of one round as seen by the server.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    pub phase: Phase,
    pub losses: Vec<ClientLoss>,
    /// Server-side traffic during this round.
    pub traffic: CostLedger,
    pub averaged: bool,
    pub body_lr: f64,
    pub client_lr: f64,
    pub wall_ms: f64,
}

impl RoundReport {
    pub fn mean_loss(&self, task: Option<TaskKind>) -> Option<f32> {
        let picked: Vec<f32> = self
            .losses
            .iter()
            .filter(|l| task.map_or(true, |t| l.task == t))
            .map(|l| l.loss)
            .collect();
        (!picked.is_empty()).then(|| picked.iter().sum::<f32>() / picked.len() as f32)
    }
}

/// Wall time is excluded so runs over different transports compare equal.
impl PartialEq for RoundReport {
    fn eq(&self, other: &Self) -> bool {
        self.round == other.round
            && self.phase == other.phase
            && self.losses == other.losses
            && self.traffic == other.traffic
            && self.averaged == other.averaged
            && self.body_lr == other.body_lr
            && self.client_lr == other.client_lr
    }
}
