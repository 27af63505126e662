use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use tracing::{debug, info};

use super::data::{build_task_data, TaskData};
use super::record::{write_curve, CostSummary, CurveRow, RecordSink, ResultRecord, TaskCost};
use super::{ExperimentConfig, ExperimentError, Result, StrategyChoice, TransportKind};
use crate::model::{Body, Head, ModelSpec, ParamSet, Tail};
use crate::protocol::{
    build_participants, evaluate_model, init_body, init_registry, join_clients, mean_metrics,
    spawn_inproc, spawn_tcp_loopback, Centralized, ClientState, Phase, ServerState, Session,
    Strategy, TaskMetrics, TaskModel, TrainConfig, TrainedModels,
};
use crate::task::TaskKind;
use crate::transport::{closed_form_cost, CostLedger, CostModelInput, CostStrategy};

pub const LINK_TIMEOUT: Duration = Duration::from_secs(120);

/// Network structures for evaluation; their parameter values are unused.
pub struct Nets {
    pub body: Body,
    pub heads: BTreeMap<TaskKind, (Head, Tail)>,
}

impl Nets {
    pub fn new(spec: &ModelSpec, tasks: &[TaskKind]) -> Result<Self> {
        let (body, _) = init_body(spec, 0)?;
        let mut heads = BTreeMap::new();
        for &t in tasks {
            let ((h, _), (tl, _)) = init_registry(t, spec, 0)?;
            heads.insert(t, (h, tl));
        }
        Ok(Self { body, heads })
    }

    pub fn evaluate(
        &self,
        task: TaskKind,
        head: &ParamSet,
        body: &ParamSet,
        tail: &ParamSet,
        samples: &[crate::taskbench::Sample],
    ) -> Result<TaskMetrics> {
        let (h, t) = &self.heads[&task];
        Ok(evaluate_model(
            &TaskModel {
                head: (h, head),
                body: (&self.body, body),
                tail: (t, tail),
            },
            samples,
        )?)
    }
}

/// Everything needed to start a session for one group of tasks.
pub struct Prepared {
    pub strategy: Strategy,
    pub spec: ModelSpec,
    pub train: TrainConfig,
    pub lambda: [f32; 3],
    pub k_avg: Option<u32>,
    pub data: Vec<TaskData>,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub expected: Vec<TaskCost>,
}

fn cost_strategy(s: Strategy) -> Option<CostStrategy> {
    match s {
        Strategy::Festa => Some(CostStrategy::Festa),
        Strategy::Sl => Some(CostStrategy::Sl),
        Strategy::Fl => Some(CostStrategy::Fl),
        Strategy::Centralized => None,
    }
}

/// Closed-form traffic for a session built from `server`'s registries.
pub fn expected_cost(
    strategy: Strategy,
    spec: &ModelSpec,
    train: &TrainConfig,
    k_avg: Option<u32>,
    rounds: u32,
    server: &ServerState,
    clients: &[(TaskKind, usize)],
) -> Result<Vec<TaskCost>> {
    let Some(cs) = cost_strategy(strategy) else {
        return Ok(Vec::new());
    };
    let (f, g) = CostModelInput::split_traffic(&spec.body, train.batch);
    let events = match (strategy, k_avg) {
        (Strategy::Sl, _) | (_, None) => 0,
        (_, Some(k)) => rounds / k,
    };
    let mut out = Vec::new();
    for &(task, n) in clients {
        let (head, tail) = &server.registry[&task];
        let input = CostModelInput {
            ph: head.num_elements() as f64,
            pb: server.body.num_elements() as f64,
            pt: tail.num_elements() as f64,
            f,
            g,
            k: k_avg.unwrap_or(1),
        };
        let per_period = closed_form_cost(cs, &input)?;
        let per_round = closed_form_cost(cs, &CostModelInput { k: 1, ..input })?;
        let per_client = f64::from(rounds) * per_round.feature_gradient
            + f64::from(events) * per_period.parameters;
        out.push(TaskCost {
            task,
            clients: n,
            input,
            per_period,
            rounds,
            averaging_events: events,
            expected_elements: per_client * n as f64,
        });
    }
    Ok(out)
}

/// Builds data, participants and the closed-form cost for one session.
pub fn prepare_unit(cfg: &ExperimentConfig, tasks: &[TaskKind], seed: u64) -> Result<Prepared> {
    let strategy = cfg.strategy.protocol();
    if strategy == Strategy::Centralized {
        return Err(ExperimentError::config(
            "strategy",
            "the centralized reference has no session",
        ));
    }
    let spec = cfg.model.spec()?;
    let train = cfg.train.train_config();
    let data: Vec<TaskData> = tasks
        .iter()
        .map(|&t| build_task_data(cfg, t, seed))
        .collect::<Result<_>>()?;
    let shards = data
        .iter()
        .flat_map(|d| d.shards.iter().map(move |s| (d.task, s.clone())))
        .collect();
    let (server, mut clients) = build_participants(strategy, &spec, &train, seed, shards)?;
    let lambda = cfg.lambda_for_unit();
    if train.lambda_everywhere {
        for c in &mut clients {
            c.set_loss_scale(lambda[usize::from(c.task.id())]);
        }
    }
    let counts: Vec<(TaskKind, usize)> = tasks.iter().map(|&t| (t, cfg.clients.of(t))).collect();
    let k_avg = cfg.train.k_avg();
    let expected = expected_cost(
        strategy,
        &spec,
        &train,
        k_avg,
        cfg.train.rounds,
        &server,
        &counts,
    )?;
    Ok(Prepared {
        strategy,
        spec,
        train,
        lambda,
        k_avg,
        data,
        server,
        clients,
        expected,
    })
}

struct Best {
    val: f64,
    head: ParamSet,
    tail: ParamSet,
    body: ParamSet,
}

/// Drives a connected session through all rounds, evaluates and shuts it down.
/// Returns per-task test metrics, the loss curve and the server-side ledger.
pub fn drive_session(
    mut session: Session,
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    data: &[TaskData],
) -> Result<(Vec<TaskMetrics>, Vec<CurveRow>, CostLedger)> {
    let tasks: Vec<TaskKind> = data.iter().map(|d| d.task).collect();
    let nets = Nets::new(spec, &tasks)?;
    session.weighted_fedavg = cfg.train.weighted_fedavg;
    if cfg.train.weighted_fedavg {
        let mut weights = BTreeMap::new();
        let mut id = 0u16;
        for d in data {
            for s in &d.shards {
                weights.insert(id, s.len() as f64);
                id += 1;
            }
        }
        session.set_peer_weights(&weights);
    }
    let select = cfg.train.select_best && session.strategy != Strategy::Sl;
    let mut best: BTreeMap<TaskKind, Best> = BTreeMap::new();
    let mut curve = Vec::new();
    session.start()?;
    for _ in 0..cfg.train.rounds {
        let report = session.run_round()?;
        for &task in &tasks {
            if let Some(loss) = report.mean_loss(Some(task)) {
                curve.push(CurveRow {
                    round: report.round,
                    phase: report.phase,
                    task,
                    loss,
                    averaged: report.averaged,
                    client_lr: report.client_lr,
                    body_lr: report.body_lr,
                });
            }
        }
        if report.round % 50 == 0 {
            debug!(round = report.round, loss = ?report.mean_loss(None), "progress");
        }
        if select && report.averaged && report.phase == Phase::Finetune {
            for d in data {
                let (head, tail) = &session.server.registry[&d.task];
                let m = nets.evaluate(d.task, head, &session.server.body, tail, &d.val)?;
                if best.get(&d.task).map_or(true, |b| m.metric > b.val) {
                    best.insert(
                        d.task,
                        Best {
                            val: m.metric,
                            head: head.clone(),
                            tail: tail.clone(),
                            body: session.server.body.clone(),
                        },
                    );
                }
            }
        }
    }
    let ledger_handle = session.ledger().clone();
    let strategy = session.strategy;
    let models = session.finish()?;
    let metrics = evaluate_trained(strategy, &nets, &models, data, select.then_some(&best))?;
    Ok((metrics, curve, ledger_handle.snapshot()))
}

fn evaluate_trained(
    strategy: Strategy,
    nets: &Nets,
    models: &TrainedModels,
    data: &[TaskData],
    best: Option<&BTreeMap<TaskKind, Best>>,
) -> Result<Vec<TaskMetrics>> {
    let mut out = Vec::new();
    for d in data {
        let m = if strategy == Strategy::Sl {
            let per_client: Vec<TaskMetrics> = models
                .per_client
                .iter()
                .filter(|c| c.task == d.task)
                .map(|c| nets.evaluate(d.task, &c.head, &models.body, &c.tail, &d.test))
                .collect::<Result<_>>()?;
            mean_metrics(&per_client)?
        } else {
            let (head, tail) = &models.per_task[&d.task];
            match best.and_then(|b| b.get(&d.task)) {
                Some(b)
                    if b.val
                        > nets
                            .evaluate(d.task, head, &models.body, tail, &d.val)?
                            .metric =>
                {
                    nets.evaluate(d.task, &b.head, &b.body, &b.tail, &d.test)?
                }
                _ => nets.evaluate(d.task, head, &models.body, tail, &d.test)?,
            }
        };
        out.push(m);
    }
    Ok(out)
}

fn run_centralized(
    cfg: &ExperimentConfig,
    tasks: &[TaskKind],
    seed: u64,
) -> Result<(Vec<TaskMetrics>, Vec<CurveRow>)> {
    let spec = cfg.model.spec()?;
    let train = cfg.train.train_config();
    let data: Vec<TaskData> = tasks
        .iter()
        .map(|&t| build_task_data(cfg, t, seed))
        .collect::<Result<_>>()?;
    let pooled = data
        .iter()
        .map(|d| (d.task, (d.pooled(), cfg.clients.of(d.task))))
        .collect();
    let mut c = Centralized::new(
        &spec,
        train,
        cfg.train.scheme,
        cfg.lambda_for_unit(),
        pooled,
        seed,
    )?;
    let mut curve = Vec::new();
    for _ in 0..cfg.train.rounds {
        let losses = c.step()?;
        let round = c.round();
        for (task, loss) in losses {
            curve.push(CurveRow {
                round,
                phase: cfg.train.scheme.phase(round),
                task,
                loss,
                averaged: false,
                client_lr: train.client_lr.lr_at(round)?,
                body_lr: train.body_lr.lr_at(round)?,
            });
        }
    }
    let nets = Nets::new(&spec, tasks)?;
    let metrics = data
        .iter()
        .map(|d| {
            let t = &c.tasks[&d.task];
            nets.evaluate(d.task, &t.head_params, &c.body, &t.tail_params, &d.test)
        })
        .collect::<Result<_>>()?;
    Ok((metrics, curve))
}

/// Output of one seed before it is written anywhere.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub record: ResultRecord,
    pub curve: Vec<CurveRow>,
}

/// Runs every session of `cfg` for one seed.
pub fn run_seed(cfg: &ExperimentConfig, variant: &str, seed: u64) -> Result<SeedOutcome> {
    cfg.validate()?;
    let t0 = Instant::now();
    let mut metrics = Vec::new();
    let mut curve = Vec::new();
    let mut ledger = CostLedger::new();
    let mut expected = Vec::new();
    for tasks in cfg.units() {
        info!(strategy = %cfg.strategy, ?tasks, seed, "training");
        if cfg.strategy == StrategyChoice::Centralized {
            let (m, c) = run_centralized(cfg, &tasks, seed)?;
            metrics.extend(m);
            curve.extend(c);
            continue;
        }
        let p = prepare_unit(cfg, &tasks, seed)?;
        let spawn = match cfg.transport {
            TransportKind::Inproc => spawn_inproc,
            TransportKind::Tcp => spawn_tcp_loopback,
        };
        let (session, handles, client_ledger) = spawn(
            p.strategy,
            p.train,
            cfg.train.scheme,
            p.k_avg,
            p.lambda,
            p.server,
            p.clients,
            LINK_TIMEOUT,
        )?;
        let driven = drive_session(session, cfg, &p.spec, &p.data);
        let joined = join_clients(handles);
        let (m, c, l) = driven?;
        joined?;
        if client_ledger.snapshot() != l {
            return Err(ExperimentError::Invariant(
                "client-side and server-side ledgers disagree".into(),
            ));
        }
        metrics.extend(m);
        curve.extend(c);
        ledger = merge_ledgers(&ledger, &l);
        expected.extend(p.expected);
    }
    let record = make_record(cfg, variant, seed, metrics, ledger, expected, t0);
    Ok(SeedOutcome { record, curve })
}

pub(crate) fn make_record(
    cfg: &ExperimentConfig,
    variant: &str,
    seed: u64,
    metrics: Vec<TaskMetrics>,
    ledger: CostLedger,
    expected: Vec<TaskCost>,
    t0: Instant,
) -> ResultRecord {
    let expected_elements = expected.iter().map(|t| t.expected_elements).sum();
    ResultRecord {
        config_hash: cfg.hash(),
        name: cfg.name.clone(),
        variant: variant.to_owned(),
        strategy: cfg.strategy,
        transport: cfg.transport,
        seed,
        rounds: cfg.train.rounds,
        metrics,
        loss_curve: None,
        cost: CostSummary {
            measured_elements: ledger.steady_elements(),
            ledger,
            expected,
            expected_elements,
        },
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
    }
}

/// Sum of two ledgers.
pub fn merge_ledgers(a: &CostLedger, b: &CostLedger) -> CostLedger {
    let mut out = a.clone();
    out.absorb(b);
    out
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// File layout under an output directory.
#[derive(Debug, Clone)]
pub struct OutputDir {
    pub root: PathBuf,
}

impl OutputDir {
    pub fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root.join("curves"))?;
        std::fs::create_dir_all(root.join("ledgers"))?;
        Ok(Self {
            root: root.to_owned(),
        })
    }

    pub fn records(&self) -> PathBuf {
        self.root.join("records.jsonl")
    }

    pub fn results_csv(&self) -> PathBuf {
        self.root.join("results.csv")
    }

    fn stem(rec: &ResultRecord) -> String {
        slug(&format!(
            "{}-{}-{}-s{}",
            rec.name, rec.variant, rec.strategy, rec.seed
        ))
    }

    /// Writes curve, ledger and summary rows, then appends the record.
    pub fn emit(&self, sink: &mut RecordSink, outcome: &SeedOutcome) -> Result<ResultRecord> {
        let mut rec = outcome.record.clone();
        let stem = Self::stem(&rec);
        let curve_rel = format!("curves/{stem}.csv");
        write_curve(&self.root.join(&curve_rel), &outcome.curve)?;
        rec.loss_curve = Some(curve_rel);
        std::fs::write(
            self.root.join(format!("ledgers/{stem}.csv")),
            rec.cost.ledger.to_csv_string(),
        )?;
        self.append_results_csv(&rec)?;
        sink.append(&rec)?;
        Ok(rec)
    }

    fn append_results_csv(&self, rec: &ResultRecord) -> Result<()> {
        let path = self.results_csv();
        let fresh = !path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)?;
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(file);
        if fresh {
            w.write_record([
                "name",
                "variant",
                "strategy",
                "seed",
                "task",
                "metric_name",
                "metric",
                "accuracy",
                "measured_elements",
                "expected_elements",
                "wall_ms",
                "config_hash",
            ])?;
        }
        for m in &rec.metrics {
            w.write_record([
                rec.name.clone(),
                rec.variant.clone(),
                rec.strategy.to_string(),
                rec.seed.to_string(),
                m.task.to_string(),
                TaskMetrics::metric_name(m.task).to_owned(),
                m.metric.to_string(),
                m.accuracy.map(|a| a.to_string()).unwrap_or_default(),
                rec.cost.measured_elements.to_string(),
                rec.cost.expected_elements.to_string(),
                format!("{:.1}", rec.wall_ms),
                rec.config_hash.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs every seed of every variant, emitting each record as soon as it is
/// done so a later failure leaves earlier results on disk.
pub fn run_plan(plan: &[(String, ExperimentConfig)]) -> Result<Vec<ResultRecord>> {
    let mut out = Vec::new();
    for (_, cfg) in plan {
        cfg.validate()?;
    }
    for (variant, cfg) in plan {
        let dir = OutputDir::new(&cfg.output)?;
        let mut sink = RecordSink::open(&dir.records())?;
        for &seed in &cfg.seeds {
            let outcome = run_seed(cfg, variant, seed)?;
            let rec = dir.emit(&mut sink, &outcome)?;
            info!(
                variant = %variant,
                seed,
                metrics = ?rec.metrics.iter().map(|m| (m.task, m.metric, m.accuracy)).collect::<Vec<_>>(),
                wall_s = rec.wall_ms / 1e3,
                "seed finished"
            );
            out.push(rec);
        }
    }
    Ok(out)
}
