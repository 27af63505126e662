use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{run_client, ClientState, ProtocolError, Result, Scheme, ServerState, Session};
use crate::model::{
    build_body, build_head, build_tail, Body, Head, Initializer, ModelSpec, OptimizerKind,
    ParamSet, Schedule, Tail,
};
use crate::seed::rng_for;
use crate::task::TaskKind;
use crate::taskbench::{task_loss, Sample};
use crate::tensor::Graph;
use crate::transport::{inproc_pair, tcp_loopback_pair, Link, MeteredLink, SharedLedger, Side};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Festa,
    Sl,
    Fl,
    Centralized,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Festa => "festa",
            Strategy::Sl => "sl",
            Strategy::Fl => "fl",
            Strategy::Centralized => "centralized",
        })
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "festa" => Ok(Strategy::Festa),
            "sl" => Ok(Strategy::Sl),
            "fl" => Ok(Strategy::Fl),
            "centralized" => Ok(Strategy::Centralized),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

/// Optimisation settings shared by the server and its clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Samples per client per round.
    pub batch: usize,
    pub client_optimizer: OptimizerKind,
    pub body_optimizer: OptimizerKind,
    /// Schedule for heads and tails.
    pub client_lr: Schedule,
    pub body_lr: Schedule,
    /// Global-norm clipping applied to each parameter set separately.
    pub clip: Option<f32>,
    /// Apply task weights to the client losses instead of the body accumulation only.
    #[serde(default)]
    pub lambda_everywhere: bool,
}

impl TrainConfig {
    pub fn sgd(lr: f64, batch: usize) -> Self {
        Self {
            batch,
            client_optimizer: OptimizerKind::Sgd,
            body_optimizer: OptimizerKind::Sgd,
            client_lr: Schedule::constant(lr),
            body_lr: Schedule::constant(lr),
            clip: None,
            lambda_everywhere: false,
        }
    }
}

/// Fresh body parameters for a run seed.
pub fn init_body(spec: &ModelSpec, seed: u64) -> Result<(Body, ParamSet)> {
    let mut init = Initializer::new(rng_for(seed, "init/body"));
    let (params, net) = build_body(spec, &mut init)?;
    Ok((net, params))
}

/// Fresh global head and tail for one task.
pub fn init_registry(
    task: TaskKind,
    spec: &ModelSpec,
    seed: u64,
) -> Result<((Head, ParamSet), (Tail, ParamSet))> {
    let mut init = Initializer::new(rng_for(seed, &format!("init/{task}")));
    let input_dim = match task {
        TaskKind::Classification => spec.sample_dim,
        _ => spec.patch_dim,
    };
    let (hp, head) = build_head(task, spec, input_dim, &mut init)?;
    let (tp, tail) = build_tail(task, spec, &mut init)?;
    Ok(((head, hp), (tail, tp)))
}

/// Head, body and tail in one graph over a batch. Stores head and tail
/// gradients of `loss_scale × mean loss`, adds `body_factor ×` the body
/// gradient to the body set, and returns the unscaled mean loss.
pub fn composed_grads(
    head: (&Head, &mut ParamSet),
    body: (&Body, &mut ParamSet),
    tail: (&Tail, &mut ParamSet),
    batch: &[&Sample],
    loss_scale: f32,
    body_factor: f32,
) -> Result<f32> {
    if batch.is_empty() {
        return Err(ProtocolError::Config("empty batch".into()));
    }
    let mut g = Graph::new();
    let hb = head.1.bind(&mut g);
    let bb = body.1.bind(&mut g);
    let tb = tail.1.bind(&mut g);
    let mut sum = None;
    for s in batch {
        let h = head.0.forward(&mut g, &hb, &s.features)?;
        let b = body.0.forward(&mut g, &bb, h)?;
        let out = tail.0.forward(&mut g, &tb, b)?;
        let l = task_loss(&mut g, tail.0.task(), out, &s.label)?;
        sum = Some(match sum {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
    }
    let mean = g.scale(sum.expect("non-empty batch"), 1.0 / batch.len() as f32)?;
    let loss = g.value(mean).data()[0];
    let scaled = if loss_scale == 1.0 {
        mean
    } else {
        g.scale(mean, loss_scale)?
    };
    let grads = g.backward(scaled)?;
    head.1.store_grads(&hb, &grads);
    tail.1.store_grads(&tb, &grads);
    body.1.accumulate_grads(&bb, &grads, body_factor);
    Ok(loss)
}

/// Join handles of client actor threads; each returns the client's final state.
pub type ClientHandles = Vec<JoinHandle<Result<ClientState>>>;

#[allow(clippy::too_many_arguments)]
fn spawn_with(
    strategy: Strategy,
    cfg: TrainConfig,
    scheme: Scheme,
    k_avg: Option<u32>,
    lambda: [f32; 3],
    server: ServerState,
    clients: Vec<ClientState>,
    mut pair: impl FnMut() -> Result<(Box<dyn Link>, Box<dyn Link>)>,
) -> Result<(Session, ClientHandles, SharedLedger)> {
    let server_ledger = SharedLedger::new();
    let client_ledger = SharedLedger::new();
    let mut links = Vec::with_capacity(clients.len());
    let mut handles = Vec::with_capacity(clients.len());
    for state in clients {
        let (s, c) = pair()?;
        links.push(MeteredLink::new(s, Side::Server, server_ledger.clone()));
        let metered = MeteredLink::new(c, Side::Client, client_ledger.clone());
        handles.push(
            thread::Builder::new()
                .name(format!("client-{}", state.id))
                .spawn(move || run_client(state, metered))
                .map_err(|e| ProtocolError::Config(format!("cannot spawn client thread: {e}")))?,
        );
    }
    let session = Session::connect(
        strategy,
        cfg,
        scheme,
        k_avg,
        lambda,
        server,
        links,
        server_ledger,
    )?;
    Ok((session, handles, client_ledger))
}

/// Connects clients to a new session over in-process links. Also returns the
/// ledger shared by all client ends.
#[allow(clippy::too_many_arguments)]
pub fn spawn_inproc(
    strategy: Strategy,
    cfg: TrainConfig,
    scheme: Scheme,
    k_avg: Option<u32>,
    lambda: [f32; 3],
    server: ServerState,
    clients: Vec<ClientState>,
    timeout: Duration,
) -> Result<(Session, ClientHandles, SharedLedger)> {
    spawn_with(
        strategy,
        cfg,
        scheme,
        k_avg,
        lambda,
        server,
        clients,
        || {
            let (s, c) = inproc_pair(timeout);
            Ok((Box::new(s) as Box<dyn Link>, Box::new(c) as Box<dyn Link>))
        },
    )
}

/// Same as [`spawn_inproc`] with loopback TCP connections.
#[allow(clippy::too_many_arguments)]
pub fn spawn_tcp_loopback(
    strategy: Strategy,
    cfg: TrainConfig,
    scheme: Scheme,
    k_avg: Option<u32>,
    lambda: [f32; 3],
    server: ServerState,
    clients: Vec<ClientState>,
    timeout: Duration,
) -> Result<(Session, ClientHandles, SharedLedger)> {
    spawn_with(
        strategy,
        cfg,
        scheme,
        k_avg,
        lambda,
        server,
        clients,
        || {
            let (s, c) = tcp_loopback_pair(timeout)?;
            Ok((Box::new(s) as Box<dyn Link>, Box::new(c) as Box<dyn Link>))
        },
    )
}

/// Waits for client threads and returns their final states ordered by id.
pub fn join_clients(handles: ClientHandles) -> Result<Vec<ClientState>> {
    let mut out = Vec::with_capacity(handles.len());
    for h in handles {
        let state = h
            .join()
            .map_err(|_| ProtocolError::Unexpected("client thread panicked".into()))??;
        out.push(state);
    }
    out.sort_by_key(|c| c.id);
    Ok(out)
}

/// Registry map for the listed tasks.
pub fn init_registries(
    tasks: &[TaskKind],
    spec: &ModelSpec,
    seed: u64,
) -> Result<BTreeMap<TaskKind, ((Head, ParamSet), (Tail, ParamSet))>> {
    tasks
        .iter()
        .map(|&t| Ok((t, init_registry(t, spec, seed)?)))
        .collect()
}

/// Server state and one client per shard. Client ids follow shard order; each
/// client's batch stream is keyed by its task and its index within that task.
/// Every client starts from the task's global initial weights.
pub fn build_participants(
    strategy: Strategy,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    seed: u64,
    shards: Vec<(TaskKind, Vec<Sample>)>,
) -> Result<(ServerState, Vec<ClientState>)> {
    let mut tasks: Vec<TaskKind> = shards.iter().map(|s| s.0).collect();
    tasks.sort();
    tasks.dedup();
    let registries = init_registries(&tasks, spec, seed)?;
    let (body_net, body) = init_body(spec, seed)?;
    let mut local = BTreeMap::<TaskKind, usize>::new();
    let mut clients = Vec::with_capacity(shards.len());
    for (i, (task, data)) in shards.into_iter().enumerate() {
        let id = u16::try_from(i).map_err(|_| ProtocolError::Config("too many clients".into()))?;
        let idx = local.entry(task).or_default();
        let ((head, hp), (tail, tp)) = registries[&task].clone();
        let own_body = (strategy == Strategy::Fl).then(|| (body_net.clone(), body.clone()));
        clients.push(ClientState::new(
            id,
            (head, hp),
            (tail, tp),
            own_body,
            data,
            *cfg,
            seed,
            &super::batch_stream(task, *idx),
        )?);
        *idx += 1;
    }
    let registry = registries
        .into_iter()
        .map(|(t, ((_, hp), (_, tp)))| (t, (hp, tp)))
        .collect();
    Ok((ServerState::new(body_net, body, cfg, registry), clients))
}
