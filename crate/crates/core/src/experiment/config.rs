use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{ExperimentError, Result};
use crate::model::{BodyConfig, ModelSpec, OptimizerKind, Schedule, ScheduleKind};
use crate::protocol::{Scheme, Strategy, TrainConfig};
use crate::task::TaskKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyChoice {
    Centralized,
    Fl,
    Sl,
    FestaStl,
    FestaMtl,
}

impl StrategyChoice {
    pub const ALL: [StrategyChoice; 5] = [
        StrategyChoice::Centralized,
        StrategyChoice::Fl,
        StrategyChoice::Sl,
        StrategyChoice::FestaStl,
        StrategyChoice::FestaMtl,
    ];

    pub fn protocol(self) -> Strategy {
        match self {
            StrategyChoice::Centralized => Strategy::Centralized,
            StrategyChoice::Fl => Strategy::Fl,
            StrategyChoice::Sl => Strategy::Sl,
            StrategyChoice::FestaStl | StrategyChoice::FestaMtl => Strategy::Festa,
        }
    }

    /// Whether all configured tasks share one body in one session.
    pub fn is_multi_task(self) -> bool {
        self == StrategyChoice::FestaMtl
    }

    pub fn label(self) -> &'static str {
        match self {
            StrategyChoice::Centralized => "centralized",
            StrategyChoice::Fl => "fl",
            StrategyChoice::Sl => "sl",
            StrategyChoice::FestaStl => "festa-stl",
            StrategyChoice::FestaMtl => "festa-mtl",
        }
    }
}

impl fmt::Display for StrategyChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.label())
    }
}

impl FromStr for StrategyChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|c| c.label() == s)
            .ok_or_else(|| {
                format!(
                    "unknown strategy `{s}` (expected centralized, fl, sl, festa-stl or festa-mtl)"
                )
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    Inproc,
    Tcp,
}

impl FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "inproc" => Ok(TransportKind::Inproc),
            "tcp" => Ok(TransportKind::Tcp),
            other => Err(format!(
                "unknown transport `{other}` (expected inproc or tcp)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientCounts {
    pub classification: usize,
    pub segmentation: usize,
    pub detection: usize,
}

impl Default for ClientCounts {
    fn default() -> Self {
        Self {
            classification: 6,
            segmentation: 2,
            detection: 2,
        }
    }
}

impl ClientCounts {
    pub fn of(&self, task: TaskKind) -> usize {
        match task {
            TaskKind::Classification => self.classification,
            TaskKind::Segmentation => self.segmentation,
            TaskKind::Detection => self.detection,
        }
    }

    pub fn set(&mut self, task: TaskKind, n: usize) {
        match task {
            TaskKind::Classification => self.classification = n,
            TaskKind::Segmentation => self.segmentation = n,
            TaskKind::Detection => self.detection = n,
        }
    }

    /// Tasks with at least one client, in task order.
    pub fn active(&self) -> Vec<(TaskKind, usize)> {
        TaskKind::ALL
            .into_iter()
            .map(|t| (t, self.of(t)))
            .filter(|&(_, n)| n > 0)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `toy`, `full`, `small`, `medium`, or one of `desk-4`, `desk-8`, `desk-12`.
    pub body: String,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub hidden: Option<usize>,
    pub head_hidden: usize,
    pub positional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            body: "toy".into(),
            layers: None,
            heads: None,
            hidden: None,
            head_hidden: 32,
            positional: true,
        }
    }
}

/// Number of feature tokens: one per patch of a toy image.
pub const TOKENS: usize = 16;

pub fn body_preset(name: &str) -> Option<BodyConfig> {
    let desk = BodyConfig::capacity_ladder_desk(TOKENS);
    match name {
        "toy" => Some(BodyConfig::toy()),
        "desk-4" => Some(desk[0]),
        "desk-8" => Some(desk[1]),
        "desk-12" => Some(desk[2]),
        "small" | "medium" | "full" => {
            let b = BodyConfig::preset(name)?;
            BodyConfig::new(b.layers, b.heads, b.hidden, TOKENS).ok()
        }
        _ => None,
    }
}

impl ModelConfig {
    pub fn spec(&self) -> Result<ModelSpec> {
        let base = body_preset(&self.body).ok_or_else(|| {
            ExperimentError::config("model.body", format!("unknown body preset `{}`", self.body))
        })?;
        let body = BodyConfig::new(
            self.layers.unwrap_or(base.layers),
            self.heads.unwrap_or(base.heads),
            self.hidden.unwrap_or(base.hidden),
            TOKENS,
        )
        .map_err(|e| ExperimentError::config("model", e.to_string()))?;
        if self.head_hidden == 0 {
            return Err(ExperimentError::config(
                "model.head_hidden",
                "must be positive",
            ));
        }
        Ok(ModelSpec {
            body,
            head_hidden: self.head_hidden,
            positional: self.positional,
            ..ModelSpec::default()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerChoice {
    Sgd,
    Adam,
}

impl OptimizerChoice {
    pub fn kind(self) -> OptimizerKind {
        match self {
            OptimizerChoice::Sgd => OptimizerKind::Sgd,
            OptimizerChoice::Adam => OptimizerKind::adam(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub rounds: u32,
    pub k_avg: u32,
    /// Disables averaging entirely.
    pub no_avg: bool,
    pub warmup: u32,
    pub scheme: Scheme,
    pub lambda: [f32; 3],
    pub batch: usize,
    pub client_lr: f64,
    pub body_lr: f64,
    pub client_optimizer: OptimizerChoice,
    pub body_optimizer: OptimizerChoice,
    pub schedule: ScheduleKind,
    /// Restart period for the annealing schedule.
    pub schedule_period: u32,
    /// Global-norm clip per parameter set; 0 disables clipping.
    pub clip: f32,
    pub lambda_everywhere: bool,
    pub weighted_fedavg: bool,
    /// Keep the best validation checkpoint per task among averaging points of
    /// the finetune phase.
    pub select_best: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            rounds: 600,
            k_avg: 10,
            no_avg: false,
            warmup: 25,
            scheme: Scheme::TwoStep { joint: 300 },
            lambda: [1.0, 2.0, 2.0],
            batch: 2,
            client_lr: 3e-3,
            body_lr: 1e-3,
            client_optimizer: OptimizerChoice::Adam,
            body_optimizer: OptimizerChoice::Adam,
            schedule: ScheduleKind::WarmupCosine,
            schedule_period: 0,
            clip: 1.0,
            lambda_everywhere: false,
            weighted_fedavg: false,
            select_best: false,
        }
    }
}

impl TrainSection {
    pub fn k_avg(&self) -> Option<u32> {
        (!self.no_avg).then_some(self.k_avg)
    }

    fn schedule(&self, lr: f64) -> Schedule {
        Schedule {
            kind: self.schedule,
            max_lr: lr,
            warmup: self.warmup,
            total: self.rounds,
            period: self.schedule_period,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch: self.batch,
            client_optimizer: self.client_optimizer.kind(),
            body_optimizer: self.body_optimizer.kind(),
            client_lr: self.schedule(self.client_lr),
            body_lr: self.schedule(self.body_lr),
            clip: (self.clip > 0.0).then_some(self.clip),
            lambda_everywhere: self.lambda_everywhere,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionChoice {
    /// The six-client skew table when there are six classification clients, IID otherwise.
    Auto,
    Table1,
    Iid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Classification training pool shared out over the clients.
    pub classification_samples: usize,
    /// Training pool per image task.
    pub image_samples: usize,
    pub partition: PartitionChoice,
    pub test_samples: usize,
    pub val_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classification_samples: 860,
            image_samples: 200,
            partition: PartitionChoice::Auto,
            test_samples: 600,
            val_samples: 300,
        }
    }
}

impl DataConfig {
    pub fn uses_table1(&self, classification_clients: usize) -> bool {
        match self.partition {
            PartitionChoice::Auto => classification_clients == 6,
            PartitionChoice::Table1 => true,
            PartitionChoice::Iid => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub strategy: StrategyChoice,
    pub seeds: Vec<u64>,
    pub transport: TransportKind,
    pub output: PathBuf,
    pub clients: ClientCounts,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            strategy: StrategyChoice::FestaMtl,
            seeds: vec![0, 1, 2],
            transport: TransportKind::Inproc,
            output: PathBuf::from("results"),
            clients: ClientCounts::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            data: DataConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ExperimentError::config("config", e.message().to_owned()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            ExperimentError::config("config", format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every field; the error names the first offending one.
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let active = self.clients.active();
        if active.is_empty() {
            return Err(ExperimentError::config(
                "clients",
                "at least one task needs a client",
            ));
        }
        if self.seeds.is_empty() {
            return Err(ExperimentError::config("seeds", "list at least one seed"));
        }
        if self.strategy == StrategyChoice::FestaMtl && active.len() < 2 {
            return Err(ExperimentError::config(
                "strategy",
                "festa-mtl needs clients for at least two tasks",
            ));
        }
        if t.rounds == 0 {
            return Err(ExperimentError::config("train.rounds", "must be positive"));
        }
        if !t.no_avg && t.k_avg == 0 {
            return Err(ExperimentError::config(
                "train.k_avg",
                "must be positive (set no_avg to disable averaging)",
            ));
        }
        if t.batch == 0 {
            return Err(ExperimentError::config("train.batch", "must be positive"));
        }
        if t.warmup > t.rounds {
            return Err(ExperimentError::config(
                "train.warmup",
                format!("{} exceeds {} rounds", t.warmup, t.rounds),
            ));
        }
        t.scheme
            .validate(t.rounds)
            .map_err(|m| ExperimentError::config("train.scheme", m))?;
        for (name, lr) in [
            ("train.client_lr", t.client_lr),
            ("train.body_lr", t.body_lr),
        ] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(ExperimentError::config(
                    name,
                    format!("{lr} is not a finite non-negative rate"),
                ));
            }
        }
        if t.schedule == ScheduleKind::WarmupCosineAnnealing && t.schedule_period == 0 {
            return Err(ExperimentError::config(
                "train.schedule_period",
                "annealing needs a positive period",
            ));
        }
        if let Some(i) = t.lambda.iter().position(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(ExperimentError::config(
                "train.lambda",
                format!(
                    "weight {} of task {} must be positive",
                    t.lambda[i],
                    TaskKind::ALL[i]
                ),
            ));
        }
        if !(t.clip.is_finite() && t.clip >= 0.0) {
            return Err(ExperimentError::config(
                "train.clip",
                "must be finite and non-negative",
            ));
        }
        self.model.spec()?;
        let d = &self.data;
        for (task, n) in &active {
            let pool = match task {
                TaskKind::Classification => d.classification_samples,
                _ => d.image_samples,
            };
            let field = match task {
                TaskKind::Classification => "data.classification_samples",
                _ => "data.image_samples",
            };
            if pool < *n * t.batch {
                return Err(ExperimentError::config(
                    field,
                    format!(
                        "{pool} samples cannot fill a batch of {} on {n} {task} clients",
                        t.batch
                    ),
                ));
            }
        }
        let cls = self.clients.classification;
        if d.partition == PartitionChoice::Table1 && cls != 6 {
            return Err(ExperimentError::config(
                "data.partition",
                format!("table1 needs 6 classification clients, got {cls}"),
            ));
        }
        if cls > 0 && d.uses_table1(cls) {
            let (spec, _) = crate::taskbench::table1_spec(d.classification_samples);
            if let Some(c) = spec
                .iter()
                .position(|row| row.iter().sum::<usize>() < t.batch)
            {
                return Err(ExperimentError::config(
                    "data.classification_samples",
                    format!(
                        "client {c} of the skewed partition gets fewer than {} samples",
                        t.batch
                    ),
                ));
            }
        }
        if d.test_samples < 3 {
            return Err(ExperimentError::config(
                "data.test_samples",
                "need at least 3 test samples",
            ));
        }
        if t.select_best && d.val_samples < 3 {
            return Err(ExperimentError::config(
                "data.val_samples",
                "need at least 3 validation samples",
            ));
        }
        Ok(())
    }

    /// Groups of tasks trained in one session each.
    pub fn units(&self) -> Vec<Vec<TaskKind>> {
        let tasks: Vec<TaskKind> = self.clients.active().into_iter().map(|(t, _)| t).collect();
        if self.strategy.is_multi_task() {
            vec![tasks]
        } else {
            tasks.into_iter().map(|t| vec![t]).collect()
        }
    }

    /// Task weights used for a unit: the configured weights for multi-task
    /// sessions, all ones otherwise.
    pub fn lambda_for_unit(&self) -> [f32; 3] {
        if self.strategy.is_multi_task() {
            self.train.lambda
        } else {
            [1.0; 3]
        }
    }

    /// SHA-256 of the canonical JSON form of everything that influences
    /// training. Seeds, transport, output path and name are left out.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut value {
            for key in ["seeds", "transport", "output", "name"] {
                map.remove(key);
            }
        }
        let mut canon = String::new();
        canonical_json(&value, &mut canon);
        Sha256::digest(canon.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// JSON with object keys sorted at every level and no whitespace.
pub fn canonical_json(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                canonical_json(&map[k], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, v) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                canonical_json(v, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}

/// Command-line overrides; every `Some` wins over the file and the preset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub strategy: Option<StrategyChoice>,
    /// Client count for every active task.
    pub clients: Option<usize>,
    /// Restricts the run to these tasks.
    pub tasks: Option<Vec<TaskKind>>,
    pub rounds: Option<u32>,
    pub k_avg: Option<u32>,
    pub no_avg: bool,
    pub seeds: Option<Vec<u64>>,
    pub transport: Option<TransportKind>,
    pub output: Option<PathBuf>,
    pub body: Option<String>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.strategy {
            cfg.strategy = s;
        }
        if let Some(tasks) = &self.tasks {
            for t in TaskKind::ALL {
                if !tasks.contains(&t) {
                    cfg.clients.set(t, 0);
                } else if cfg.clients.of(t) == 0 {
                    cfg.clients.set(t, ClientCounts::default().of(t));
                }
            }
        }
        if let Some(n) = self.clients {
            for (t, _) in cfg.clients.active() {
                cfg.clients.set(t, n);
            }
        }
        if let Some(r) = self.rounds {
            cfg.train.rounds = r;
            if let Scheme::TwoStep { joint } = &mut cfg.train.scheme {
                *joint = (*joint).min(r);
            }
            cfg.train.warmup = cfg.train.warmup.min(r);
        }
        if let Some(k) = self.k_avg {
            cfg.train.k_avg = k;
            cfg.train.no_avg = false;
        }
        if self.no_avg {
            cfg.train.no_avg = true;
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(t) = self.transport {
            cfg.transport = t;
        }
        if let Some(o) = &self.output {
            cfg.output = o.clone();
        }
        if let Some(b) = &self.body {
            cfg.model.body = b.clone();
            cfg.model.layers = None;
            cfg.model.heads = None;
            cfg.model.hidden = None;
        }
    }
}

pub const PRESETS: [&str; 3] = ["default", "table5-ablation", "bodycap-ablation"];

/// Named sweeps over `base`: `(variant label, config)` pairs.
pub fn preset(name: &str, base: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
    match name {
        "default" => Ok(vec![("base".into(), base.clone())]),
        "table5-ablation" => Ok([1u32, 10, 100]
            .into_iter()
            .map(|k| {
                let mut c = base.clone();
                c.name = "table5-ablation".into();
                c.train.k_avg = k;
                c.train.no_avg = false;
                (format!("k_avg={k}"), c)
            })
            .collect()),
        "bodycap-ablation" => Ok(["desk-4", "desk-8", "desk-12"]
            .into_iter()
            .map(|b| {
                let mut c = base.clone();
                c.name = "bodycap-ablation".into();
                c.model.body = b.into();
                c.model.layers = None;
                c.model.heads = None;
                c.model.hidden = None;
                (format!("body={b}"), c)
            })
            .collect()),
        other => Err(ExperimentError::config(
            "preset",
            format!(
                "unknown preset `{other}` (expected one of {})",
                PRESETS.join(", ")
            ),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn hash_ignores_seeds_and_transport_but_not_training_knobs() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seeds = vec![7];
        b.transport = TransportKind::Tcp;
        assert_eq!(a.hash(), b.hash());
        b.train.k_avg = 11;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "strategy = \"sl\"\n[clients]\nsegmentation = 0\ndetection = 0\n[train]\nrounds = 40\nscheme = { kind = \"one-step\" }\n",
        )
        .unwrap();
        assert_eq!(cfg.strategy, StrategyChoice::Sl);
        assert_eq!(cfg.clients.active(), vec![(TaskKind::Classification, 6)]);
        assert_eq!(cfg.train.batch, 2);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejections_name_the_field() {
        let field = |f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = ExperimentConfig::default();
            f(&mut c);
            match c.validate() {
                Err(ExperimentError::Config { field, .. }) => field,
                other => panic!("expected a config error, got {other:?}"),
            }
        };
        assert_eq!(field(&|c| c.train.k_avg = 0), "train.k_avg");
        assert_eq!(field(&|c| c.train.rounds = 0), "train.rounds");
        assert_eq!(field(&|c| c.train.lambda[1] = 0.0), "train.lambda");
        assert_eq!(
            field(&|c| c.train.scheme = Scheme::TwoStep { joint: 601 }),
            "train.scheme"
        );
        assert_eq!(field(&|c| c.model.body = "huge".into()), "model.body");
        assert_eq!(field(&|c| c.seeds.clear()), "seeds");
        assert_eq!(
            field(&|c| {
                c.clients.segmentation = 0;
                c.clients.detection = 0;
            }),
            "strategy"
        );
        assert!(matches!(
            ExperimentConfig::from_toml("bogus = 1"),
            Err(ExperimentError::Config { .. })
        ));
    }

    #[test]
    fn presets_sweep_one_knob() {
        let base = ExperimentConfig::default();
        let t5 = preset("table5-ablation", &base).unwrap();
        assert_eq!(
            t5.iter().map(|(_, c)| c.train.k_avg).collect::<Vec<_>>(),
            [1, 10, 100]
        );
        let cap = preset("bodycap-ablation", &base).unwrap();
        let layers: Vec<usize> = cap
            .iter()
            .map(|(_, c)| c.model.spec().unwrap().body.layers)
            .collect();
        assert_eq!(layers, [4, 8, 12]);
        assert!(preset("nope", &base).is_err());
    }

    #[test]
    fn overrides_win() {
        let mut cfg = ExperimentConfig::default();
        Overrides {
            strategy: Some(StrategyChoice::Sl),
            tasks: Some(vec![TaskKind::Classification]),
            clients: Some(1),
            rounds: Some(50),
            no_avg: true,
            ..Overrides::default()
        }
        .apply(&mut cfg);
        assert_eq!(cfg.clients.active(), vec![(TaskKind::Classification, 1)]);
        assert_eq!(cfg.train.scheme, Scheme::TwoStep { joint: 50 });
        assert_eq!(cfg.train.k_avg(), None);
        cfg.validate().unwrap();
        assert_eq!(cfg.units(), vec![vec![TaskKind::Classification]]);
    }
}
