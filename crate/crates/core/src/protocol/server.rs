use std::collections::BTreeMap;
use std::time::Instant;

use tracing::{debug, info, warn};

use super::report::ClientLoss;
use super::setup::{Strategy, TrainConfig};
use super::{fedavg, Phase, ProtocolError, Result, RoundReport, Scheme};
use crate::model::{clip_gradients, Body, Bound, Optimizer, ParamSet, Role};
use crate::task::TaskKind;
use crate::tensor::{Graph, Tensor, Var};
use crate::transport::payload::{decode_named, encode_named};
use crate::transport::{
    decode_tensor, encode_tensor, Control, Frame, Link, MeteredLink, MsgType, SharedLedger, Traffic,
};

/// Server-side model state: the body and the global per-task heads and tails.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub body_net: Body,
    pub body: ParamSet,
    pub body_opt: Optimizer,
    pub registry: BTreeMap<TaskKind, (ParamSet, ParamSet)>,
}

impl ServerState {
    pub fn new(
        body_net: Body,
        body: ParamSet,
        cfg: &TrainConfig,
        registry: BTreeMap<TaskKind, (ParamSet, ParamSet)>,
    ) -> Self {
        Self {
            body_net,
            body,
            body_opt: Optimizer::new(cfg.body_optimizer),
            registry,
        }
    }
}

/// Body activations of one client batch kept until the output gradient arrives.
pub struct BodyPass {
    graph: Graph,
    bound: Bound,
    input: Var,
    out: Var,
}

/// Runs the body on a `[B, P+1, D]` feature tensor and returns the output tensor of the same shape.
pub fn body_pass(body: &Body, params: &ParamSet, feat: &Tensor) -> Result<(BodyPass, Tensor)> {
    let [b, rows, d] = *feat.shape() else {
        return Err(ProtocolError::Unexpected(format!(
            "feature tensor has shape {:?}",
            feat.shape()
        )));
    };
    let mut graph = Graph::new();
    let input = graph.input(feat.reshape(&[b * rows, d])?);
    let bound = params.bind(&mut graph);
    let mut outs = Vec::with_capacity(b);
    for i in 0..b {
        let block = graph.slice_rows(input, i * rows, rows)?;
        outs.push(body.forward(&mut graph, &bound, block)?);
    }
    let out = graph.concat_rows(&outs)?;
    let value = graph.value(out).reshape(&[b, rows, d])?;
    Ok((
        BodyPass {
            graph,
            bound,
            input,
            out,
        },
        value,
    ))
}

impl BodyPass {
    /// Adds `factor × dL/dw_B` to the body gradients and returns `dL/d(features)`.
    pub fn backward(self, params: &mut ParamSet, grad_out: &Tensor, factor: f32) -> Result<Tensor> {
        let in_shape = self.graph.value(self.input).shape().to_vec();
        let seed = grad_out.reshape(self.graph.value(self.out).shape())?;
        let grads = self.graph.backward_seeded(vec![(self.out, seed)])?;
        params.accumulate_grads(&self.bound, &grads, factor);
        let g = grads
            .get(self.input)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&in_shape));
        Ok(g.reshape(grad_out.shape())?)
    }
}

/// Server end of one client connection.
pub struct Peer {
    pub id: u16,
    pub task: TaskKind,
    /// Relative weight for dataset-size weighted averaging.
    pub weight: f64,
    pub link: MeteredLink<Box<dyn Link>>,
}

impl Peer {
    fn send(&mut self, msg: MsgType, round: u32, payload: Vec<u8>) -> Result<()> {
        Ok(self
            .link
            .send(&Frame::new(msg, round, self.id, self.task.id(), payload))?)
    }

    fn control(&mut self, round: u32, c: Control) -> Result<()> {
        self.send(MsgType::Control, round, c.encode())
    }

    fn expect(&mut self, msg: MsgType, round: u32) -> Result<Frame> {
        let f = self.link.recv()?;
        if f.msg_type != msg
            || f.round != round
            || f.client_id != self.id
            || f.task_id != self.task.id()
        {
            return Err(ProtocolError::Unexpected(format!(
                "expected {msg:?} from client {} for round {round}, got {:?} from client {} for round {}",
                self.id, f.msg_type, f.client_id, f.round
            )));
        }
        Ok(f)
    }

    fn expect_control(&mut self, round: u32) -> Result<Control> {
        let f = self.expect(MsgType::Control, round)?;
        Ok(Control::decode(&f.payload)?)
    }

    fn install(&mut self, round: u32, blob: Vec<u8>, setup: bool) -> Result<()> {
        self.control(round, Control::Install { setup })?;
        self.link.set_traffic(if setup {
            Traffic::Setup
        } else {
            Traffic::Steady
        });
        let sent = self.send(MsgType::Weights, round, blob);
        self.link.set_traffic(Traffic::Steady);
        sent
    }

    fn upload(&mut self, round: u32, setup: bool) -> Result<Vec<(String, Tensor)>> {
        self.control(round, Control::Upload { setup })?;
        self.link.set_traffic(if setup {
            Traffic::Setup
        } else {
            Traffic::Steady
        });
        let got = self.expect(MsgType::Weights, round);
        self.link.set_traffic(Traffic::Steady);
        Ok(decode_named(&got?.payload)?)
    }
}

/// One client's final weights.
#[derive(Debug, Clone)]
pub struct ClientModel {
    pub id: u16,
    pub task: TaskKind,
    pub head: ParamSet,
    pub tail: ParamSet,
    pub body: Option<ParamSet>,
}

/// Weights available for evaluation after training.
#[derive(Debug, Clone)]
pub struct TrainedModels {
    /// Server body, or the averaged client bodies for federated learning.
    pub body: ParamSet,
    /// Per-task average of the final client heads and tails.
    pub per_task: BTreeMap<TaskKind, (ParamSet, ParamSet)>,
    pub per_client: Vec<ClientModel>,
}

/// Server-side driver of a training run over a set of client links.
pub struct Session {
    pub strategy: Strategy,
    pub cfg: TrainConfig,
    pub scheme: Scheme,
    /// Averaging period; `None` disables averaging.
    pub k_avg: Option<u32>,
    /// Body-gradient weight per task id.
    pub lambda: [f32; 3],
    pub weighted_fedavg: bool,
    pub server: ServerState,
    peers: Vec<Peer>,
    ledger: SharedLedger,
    round: u32,
    started: bool,
}

impl Session {
    /// Waits for a hello from every link and orders peers by client id.
    #[allow(clippy::too_many_arguments)]
    pub fn connect(
        strategy: Strategy,
        cfg: TrainConfig,
        scheme: Scheme,
        k_avg: Option<u32>,
        lambda: [f32; 3],
        server: ServerState,
        links: Vec<MeteredLink<Box<dyn Link>>>,
        ledger: SharedLedger,
    ) -> Result<Self> {
        if strategy == Strategy::Centralized {
            return Err(ProtocolError::Config(
                "the centralized reference has no client session".into(),
            ));
        }
        if k_avg == Some(0) {
            return Err(ProtocolError::Config("k_avg must be at least 1".into()));
        }
        let mut peers = Vec::with_capacity(links.len());
        for mut link in links {
            let hello = link.recv()?;
            if hello.msg_type != MsgType::Control
                || Control::decode(&hello.payload)? != Control::Hello
            {
                return Err(ProtocolError::Unexpected(
                    "first client frame is not a hello".into(),
                ));
            }
            let task = TaskKind::from_id(hello.task_id).ok_or_else(|| {
                ProtocolError::Unexpected(format!("unknown task id {}", hello.task_id))
            })?;
            if !server.registry.contains_key(&task) {
                return Err(ProtocolError::Config(format!(
                    "client {} trains {task}, which has no registry",
                    hello.client_id
                )));
            }
            peers.push(Peer {
                id: hello.client_id,
                task,
                weight: 1.0,
                link,
            });
        }
        if peers.is_empty() {
            return Err(ProtocolError::Config("no clients connected".into()));
        }
        peers.sort_by_key(|p| p.id);
        if peers.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(ProtocolError::Config("duplicate client ids".into()));
        }
        info!(clients = peers.len(), ?strategy, "session connected");
        Ok(Self {
            strategy,
            cfg,
            scheme,
            k_avg,
            lambda,
            weighted_fedavg: false,
            server,
            peers,
            ledger,
            round: 0,
            started: false,
        })
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn ledger(&self) -> &SharedLedger {
        &self.ledger
    }

    pub fn peers(&self) -> impl Iterator<Item = (u16, TaskKind)> + '_ {
        self.peers.iter().map(|p| (p.id, p.task))
    }

    /// Sets per-client averaging weights (used only with dataset-size weighting).
    pub fn set_peer_weights(&mut self, weights: &BTreeMap<u16, f64>) {
        for p in &mut self.peers {
            if let Some(&w) = weights.get(&p.id) {
                p.weight = w;
            }
        }
    }

    fn tasks(&self) -> Vec<TaskKind> {
        let mut t: Vec<TaskKind> = self.peers.iter().map(|p| p.task).collect();
        t.sort();
        t.dedup();
        t
    }

    fn clients_of(&self, task: TaskKind) -> usize {
        self.peers.iter().filter(|p| p.task == task).count()
    }

    fn is_unifying(&self, round: u32) -> bool {
        self.strategy != Strategy::Sl && self.k_avg.is_some_and(|k| round % k == 0)
    }

    fn weights_for(&self, task: TaskKind) -> Vec<u8> {
        let (head, tail) = &self.server.registry[&task];
        let mut entries: Vec<(&str, &Tensor)> = head.values().collect();
        if self.strategy == Strategy::Fl {
            entries.extend(self.server.body.values());
        }
        entries.extend(tail.values());
        encode_named(entries.into_iter()).expect("registry weights encode")
    }

    /// Initial distribution of the global weights (setup traffic).
    pub fn start(&mut self) -> Result<()> {
        if self.started {
            return Ok(());
        }
        for i in 0..self.peers.len() {
            let blob = self.weights_for(self.peers[i].task);
            self.peers[i].install(0, blob, true)?;
        }
        self.started = true;
        Ok(())
    }

    /// Runs the next round. On failure, restores the round-start state, asks
    /// every client to roll back, and returns [`ProtocolError::Aborted`].
    pub fn run_round(&mut self) -> Result<RoundReport> {
        self.start()?;
        let round = self.round + 1;
        let before = self.ledger.snapshot();
        let snapshot = self.server.clone();
        let t0 = Instant::now();
        match self.round_inner(round) {
            Ok((losses, averaged, body_lr, client_lr)) => {
                self.round = round;
                let report = RoundReport {
                    round,
                    phase: self.scheme.phase(round),
                    losses,
                    traffic: self.ledger.snapshot().since(&before),
                    averaged,
                    body_lr,
                    client_lr,
                    wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                };
                debug!(round, loss = ?report.mean_loss(None), averaged, "round done");
                Ok(report)
            }
            Err(e) => {
                warn!(round, error = %e, "round failed, rolling back");
                self.server = snapshot;
                for p in &mut self.peers {
                    let _ = p.control(round, Control::Abort);
                }
                Err(ProtocolError::Aborted {
                    round,
                    source: Box::new(e),
                })
            }
        }
    }

    fn round_inner(&mut self, round: u32) -> Result<(Vec<ClientLoss>, bool, f64, f64)> {
        let (train_head_tail, train_body) = self.scheme.flags(round);
        let body_lr = self.cfg.body_lr.lr_at(round)?;
        let client_lr = self.cfg.client_lr.lr_at(round)?;
        let tasks = self.tasks();
        let k = tasks.len() as f32;
        let counts: BTreeMap<TaskKind, usize> =
            tasks.iter().map(|&t| (t, self.clients_of(t))).collect();
        let n_total = self.peers.len() as f32;
        self.server.body.zero_grads();
        let mut losses = Vec::with_capacity(self.peers.len());
        for i in 0..self.peers.len() {
            let task = self.peers[i].task;
            let factor = match self.strategy {
                Strategy::Festa => {
                    let lam = if self.cfg.lambda_everywhere {
                        1.0
                    } else {
                        self.lambda[usize::from(task.id())]
                    };
                    lam / (k * counts[&task] as f32)
                }
                Strategy::Sl => 1.0 / n_total,
                Strategy::Fl | Strategy::Centralized => 0.0,
            };
            let peer = &mut self.peers[i];
            peer.control(
                round,
                Control::Step {
                    train_head_tail,
                    train_body,
                },
            )?;
            if self.strategy != Strategy::Fl {
                let feat = decode_tensor(&peer.expect(MsgType::Feat, round)?.payload)?;
                let (pass, out) = body_pass(&self.server.body_net, &self.server.body, &feat)?;
                peer.send(MsgType::BodyOut, round, encode_tensor(&out)?)?;
                let grad_out = decode_tensor(&peer.expect(MsgType::BodyOutGrad, round)?.payload)?;
                if grad_out.shape() != out.shape() {
                    return Err(ProtocolError::Unexpected(format!(
                        "body-output gradient shape {:?} differs from output {:?}",
                        grad_out.shape(),
                        out.shape()
                    )));
                }
                let grad_in = pass.backward(&mut self.server.body, &grad_out, factor)?;
                peer.send(MsgType::FeatGrad, round, encode_tensor(&grad_in)?)?;
            }
            match peer.expect_control(round)? {
                Control::Loss(loss) => losses.push(ClientLoss {
                    client: peer.id,
                    task,
                    loss,
                }),
                other => {
                    return Err(ProtocolError::Unexpected(format!(
                        "expected a loss, got {other:?}"
                    )))
                }
            }
        }
        if train_body && self.strategy != Strategy::Fl {
            if let Some(max) = self.cfg.clip {
                clip_gradients(&mut self.server.body, max);
            }
            self.server
                .body_opt
                .step(&mut self.server.body, body_lr as f32)?;
        }
        let averaged = self.is_unifying(round);
        if averaged {
            self.unify(round)?;
        }
        Ok((losses, averaged, body_lr, client_lr))
    }

    /// Collects client weights, averages them and sends the result back.
    fn unify(&mut self, round: u32) -> Result<()> {
        let mut uploads = Vec::with_capacity(self.peers.len());
        for p in &mut self.peers {
            uploads.push(p.upload(round, false)?);
        }
        let models = self.split_uploads(uploads)?;
        self.average_into_registry(&models)?;
        for i in 0..self.peers.len() {
            let blob = self.weights_for(self.peers[i].task);
            self.peers[i].install(round, blob, false)?;
        }
        Ok(())
    }

    fn split_uploads(&self, uploads: Vec<Vec<(String, Tensor)>>) -> Result<Vec<ClientModel>> {
        self.peers
            .iter()
            .zip(uploads)
            .map(|(p, entries)| {
                let mut parts: [Vec<(String, Tensor)>; 3] = Default::default();
                for (name, t) in entries {
                    let slot = match Role::from_name(&name) {
                        Some(Role::Head) => 0,
                        Some(Role::Body) => 1,
                        Some(Role::Tail) => 2,
                        None => {
                            return Err(ProtocolError::Unexpected(format!(
                                "weight `{name}` has no role"
                            )))
                        }
                    };
                    parts[slot].push((name, t));
                }
                let [head, body, tail] = parts;
                Ok(ClientModel {
                    id: p.id,
                    task: p.task,
                    head: ParamSet::from_entries(Role::Head, Some(p.task), head)?,
                    tail: ParamSet::from_entries(Role::Tail, Some(p.task), tail)?,
                    body: (!body.is_empty())
                        .then(|| ParamSet::from_entries(Role::Body, None, body))
                        .transpose()?,
                })
            })
            .collect()
    }

    fn average_into_registry(&mut self, models: &[ClientModel]) -> Result<()> {
        let weight_of = |id: u16| {
            self.peers
                .iter()
                .find(|p| p.id == id)
                .map_or(1.0, |p| p.weight)
        };
        for task in self.tasks() {
            let group: Vec<&ClientModel> = models.iter().filter(|m| m.task == task).collect();
            let w: Vec<f64> = group.iter().map(|m| weight_of(m.id)).collect();
            let w = self.weighted_fedavg.then_some(w.as_slice());
            let heads: Vec<&ParamSet> = group.iter().map(|m| &m.head).collect();
            let tails: Vec<&ParamSet> = group.iter().map(|m| &m.tail).collect();
            let head = fedavg(&heads, w)?;
            let tail = fedavg(&tails, w)?;
            let entry = self
                .server
                .registry
                .get_mut(&task)
                .expect("registered task");
            entry.0.copy_values_from(&head)?;
            entry.1.copy_values_from(&tail)?;
        }
        if self.strategy == Strategy::Fl {
            let bodies: Vec<&ParamSet> = models.iter().filter_map(|m| m.body.as_ref()).collect();
            if bodies.len() != models.len() {
                return Err(ProtocolError::Unexpected(
                    "a federated client did not upload its body".into(),
                ));
            }
            let w: Vec<f64> = models.iter().map(|m| weight_of(m.id)).collect();
            let body = fedavg(&bodies, self.weighted_fedavg.then_some(w.as_slice()))?;
            self.server.body.copy_values_from(&body)?;
        }
        Ok(())
    }

    /// Collects final client weights (setup traffic), shuts clients down and
    /// returns the models used for evaluation.
    pub fn finish(mut self) -> Result<TrainedModels> {
        self.start()?;
        let round = self.round;
        let mut uploads = Vec::with_capacity(self.peers.len());
        for p in &mut self.peers {
            uploads.push(p.upload(round, true)?);
        }
        let per_client = self.split_uploads(uploads)?;
        for p in &mut self.peers {
            p.control(round, Control::Shutdown)?;
        }
        let mut per_task = BTreeMap::new();
        for task in self.tasks() {
            let group: Vec<&ClientModel> = per_client.iter().filter(|m| m.task == task).collect();
            let heads: Vec<&ParamSet> = group.iter().map(|m| &m.head).collect();
            let tails: Vec<&ParamSet> = group.iter().map(|m| &m.tail).collect();
            per_task.insert(task, (fedavg(&heads, None)?, fedavg(&tails, None)?));
        }
        let body = if self.strategy == Strategy::Fl {
            let bodies: Vec<&ParamSet> =
                per_client.iter().filter_map(|m| m.body.as_ref()).collect();
            fedavg(&bodies, None)?
        } else {
            self.server.body.clone()
        };
        Ok(TrainedModels {
            body,
            per_task,
            per_client,
        })
    }

    /// Phase of the most recent round.
    pub fn phase(&self) -> Phase {
        self.scheme.phase(self.round.max(1))
    }
}
