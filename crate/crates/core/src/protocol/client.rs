use tracing::{debug, warn};

use super::setup::{composed_grads, TrainConfig};
use super::{BatchCursor, ProtocolError, Result};
use crate::model::{clip_gradients, Body, Bound, Head, Optimizer, ParamSet, Role, Tail};
use crate::seed::rng_for;
use crate::task::TaskKind;
use crate::taskbench::{task_loss, Sample};
use crate::tensor::{Graph, Tensor, Var};
use crate::transport::payload::{decode_named, encode_named};
use crate::transport::{
    decode_tensor, encode_tensor, Control, Frame, Link, MeteredLink, MsgType, Traffic,
    TransportError,
};

/// Full local model held by a federated-learning client.
#[derive(Debug, Clone)]
pub struct LocalBody {
    pub net: Body,
    pub params: ParamSet,
    pub optimizer: Optimizer,
}

/// Everything a client owns: its shard, its head and tail, and optimizer state.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: u16,
    pub task: TaskKind,
    pub head: Head,
    pub tail: Tail,
    pub head_params: ParamSet,
    pub tail_params: ParamSet,
    /// Present only for federated learning, where the client trains the whole model.
    pub body: Option<LocalBody>,
    pub data: Vec<Sample>,
    pub last_batch: Vec<usize>,
    pub last_loss: Option<f32>,
    cursor: BatchCursor,
    head_opt: Optimizer,
    tail_opt: Optimizer,
    cfg: TrainConfig,
    loss_scale: f32,
}

impl ClientState {
    /// `stream` names the batch order; clients sharing it see identical batches.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: u16,
        (head, head_params): (Head, ParamSet),
        (tail, tail_params): (Tail, ParamSet),
        body: Option<(Body, ParamSet)>,
        data: Vec<Sample>,
        cfg: TrainConfig,
        seed: u64,
        stream: &str,
    ) -> Result<Self> {
        let task = head.task();
        if tail.task() != task {
            return Err(ProtocolError::Config(format!(
                "client {id}: head and tail tasks differ"
            )));
        }
        if data.is_empty() {
            return Err(ProtocolError::Config(format!(
                "client {id} has no training data"
            )));
        }
        if let Some(bad) = data.iter().position(|s| s.task() != task) {
            return Err(ProtocolError::Config(format!(
                "client {id}: sample {bad} is not a {task} sample"
            )));
        }
        let cursor = BatchCursor::new(data.len(), cfg.batch, rng_for(seed, stream));
        Ok(Self {
            id,
            task,
            head,
            tail,
            head_params,
            tail_params,
            body: body.map(|(net, params)| LocalBody {
                net,
                params,
                optimizer: Optimizer::new(cfg.body_optimizer),
            }),
            data,
            last_batch: Vec::new(),
            last_loss: None,
            cursor,
            head_opt: Optimizer::new(cfg.client_optimizer),
            tail_opt: Optimizer::new(cfg.client_optimizer),
            cfg,
            loss_scale: 1.0,
        })
    }

    /// Multiplies the client loss before backpropagation.
    pub fn set_loss_scale(&mut self, scale: f32) {
        self.loss_scale = scale;
    }

    fn next_batch(&mut self) -> Vec<&Sample> {
        self.last_batch = self.cursor.next_batch();
        self.last_batch.iter().map(|&i| &self.data[i]).collect()
    }

    fn update_head_tail(&mut self, round: u32) -> Result<()> {
        let lr = self.cfg.client_lr.lr_at(round)? as f32;
        if let Some(max) = self.cfg.clip {
            clip_gradients(&mut self.head_params, max);
            clip_gradients(&mut self.tail_params, max);
        }
        self.head_opt.step(&mut self.head_params, lr)?;
        self.tail_opt.step(&mut self.tail_params, lr)?;
        Ok(())
    }

    /// One federated-learning local step on the whole model.
    pub fn local_step(
        &mut self,
        round: u32,
        train_head_tail: bool,
        train_body: bool,
    ) -> Result<f32> {
        let mut body = self.body.take().ok_or_else(|| {
            ProtocolError::Config(format!("client {} holds no local body", self.id))
        })?;
        let result = (|| {
            let batch: Vec<Sample> = self.next_batch().into_iter().cloned().collect();
            let refs: Vec<&Sample> = batch.iter().collect();
            body.params.zero_grads();
            let loss = composed_grads(
                (&self.head, &mut self.head_params),
                (&body.net, &mut body.params),
                (&self.tail, &mut self.tail_params),
                &refs,
                self.loss_scale,
                1.0,
            )?;
            if train_head_tail {
                self.update_head_tail(round)?;
            }
            if train_body {
                if let Some(max) = self.cfg.clip {
                    clip_gradients(&mut body.params, max);
                }
                let lr = self.cfg.body_lr.lr_at(round)? as f32;
                body.optimizer.step(&mut body.params, lr)?;
            }
            Ok(loss)
        })();
        self.body = Some(body);
        result
    }

    /// Weights this client uploads: head and tail, plus the body for federated learning.
    pub fn weights(&self) -> Vec<(&str, &Tensor)> {
        let mut out: Vec<(&str, &Tensor)> = self.head_params.values().collect();
        if let Some(b) = &self.body {
            out.extend(b.params.values());
        }
        out.extend(self.tail_params.values());
        out
    }

    /// Overwrites local weights from a named blob; every local parameter must be present.
    pub fn install(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        let mut head = Vec::new();
        let mut body = Vec::new();
        let mut tail = Vec::new();
        for (name, t) in entries {
            match Role::from_name(&name) {
                Some(Role::Head) => head.push((name, t)),
                Some(Role::Body) => body.push((name, t)),
                Some(Role::Tail) => tail.push((name, t)),
                None => {
                    return Err(ProtocolError::Unexpected(format!(
                        "weight `{name}` has no role prefix"
                    )))
                }
            }
        }
        let head = ParamSet::from_entries(Role::Head, Some(self.task), head)?;
        let tail = ParamSet::from_entries(Role::Tail, Some(self.task), tail)?;
        self.head_params.copy_values_from(&head)?;
        self.tail_params.copy_values_from(&tail)?;
        match (&mut self.body, body.is_empty()) {
            (Some(local), false) => {
                let set = ParamSet::from_entries(Role::Body, None, body)?;
                local.params.copy_values_from(&set)?;
            }
            (None, true) => {}
            (Some(_), true) => {
                return Err(ProtocolError::Unexpected(
                    "weight install lacks the body".into(),
                ))
            }
            (None, false) => {
                return Err(ProtocolError::Unexpected(
                    "split client received body weights".into(),
                ))
            }
        }
        Ok(())
    }
}

/// Head activations of one batch kept alive until the feature gradient arrives.
pub struct HeadPass {
    graph: Graph,
    bound: Bound,
    out: Var,
}

/// Runs the head on a batch; returns the pass and the `[B, P+1, D]` feature tensor.
pub fn split_head_pass(
    head: &Head,
    params: &ParamSet,
    batch: &[&Sample],
) -> Result<(HeadPass, Tensor)> {
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph);
    let mut blocks = Vec::with_capacity(batch.len());
    for s in batch {
        blocks.push(head.forward(&mut graph, &bound, &s.features)?);
    }
    let out = graph.concat_rows(&blocks)?;
    let (rows, d) = graph.value(out).dims2().expect("rank-2 block stack");
    let feat = graph
        .value(out)
        .reshape(&[batch.len(), rows / batch.len(), d])?;
    Ok((HeadPass { graph, bound, out }, feat))
}

impl HeadPass {
    /// Backpropagates the feature gradient and stores head gradients.
    pub fn backward(self, params: &mut ParamSet, grad: &Tensor) -> Result<()> {
        let shape = self.graph.value(self.out).shape().to_vec();
        let seed = grad.reshape(&shape)?;
        let grads = self.graph.backward_seeded(vec![(self.out, seed)])?;
        params.store_grads(&self.bound, &grads);
        Ok(())
    }
}

/// Tail forward, loss and backward on the body output `[B, P+1, D]`.
/// Stores tail gradients and returns the unscaled mean loss and `dL/d(body output)`.
pub fn split_tail_pass(
    tail: &Tail,
    params: &mut ParamSet,
    batch: &[&Sample],
    body_out: &Tensor,
    loss_scale: f32,
) -> Result<(f32, Tensor)> {
    let b = batch.len();
    let [bb, rows, d] = body_out.shape() else {
        return Err(ProtocolError::Unexpected(format!(
            "body output has shape {:?}",
            body_out.shape()
        )));
    };
    if *bb != b {
        return Err(ProtocolError::Unexpected(format!(
            "body output for {bb} samples, batch has {b}"
        )));
    }
    let (rows, d) = (*rows, *d);
    let mut g = Graph::new();
    let x = g.input(body_out.reshape(&[b * rows, d])?);
    let bound = params.bind(&mut g);
    let mut losses = Vec::with_capacity(b);
    for (i, s) in batch.iter().enumerate() {
        let block = g.slice_rows(x, i * rows, rows)?;
        let out = tail.forward(&mut g, &bound, block)?;
        losses.push(task_loss(&mut g, tail.task(), out, &s.label)?);
    }
    let mut sum = losses[0];
    for &l in &losses[1..] {
        sum = g.add(sum, l)?;
    }
    let mean = g.scale(sum, 1.0 / b as f32)?;
    let loss = g.value(mean).data()[0];
    let scaled = if loss_scale == 1.0 {
        mean
    } else {
        g.scale(mean, loss_scale)?
    };
    let grads = g.backward(scaled)?;
    params.store_grads(&bound, &grads);
    let grad = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(&[b * rows, d]))
        .reshape(&[b, rows, d])?;
    Ok((loss, grad))
}

/// Outcome of waiting for a frame: the frame, or an abort request from the server.
enum Incoming {
    Frame(Frame),
    Abort(u32),
}

struct Endpoint<L: Link> {
    link: MeteredLink<L>,
    id: u16,
    task: u8,
}

impl<L: Link> Endpoint<L> {
    fn send(&mut self, msg: MsgType, round: u32, payload: Vec<u8>) -> Result<()> {
        Ok(self
            .link
            .send(&Frame::new(msg, round, self.id, self.task, payload))?)
    }

    fn send_control(&mut self, round: u32, c: Control) -> Result<()> {
        self.send(MsgType::Control, round, c.encode())
    }

    fn recv(&mut self) -> Result<Incoming> {
        let f = self.link.recv()?;
        if f.client_id != self.id {
            return Err(ProtocolError::Unexpected(format!(
                "frame for client {} reached client {}",
                f.client_id, self.id
            )));
        }
        if f.msg_type == MsgType::Control && Control::decode(&f.payload)? == Control::Abort {
            return Ok(Incoming::Abort(f.round));
        }
        Ok(Incoming::Frame(f))
    }

    /// Next frame of type `msg`, or `None` if the server aborted the round.
    fn expect(&mut self, msg: MsgType, round: u32) -> Result<Option<Frame>> {
        match self.recv()? {
            Incoming::Abort(_) => Ok(None),
            Incoming::Frame(f) if f.msg_type == msg && f.round == round => Ok(Some(f)),
            Incoming::Frame(f) => Err(ProtocolError::Unexpected(format!(
                "expected {msg:?} for round {round}, got {:?} for round {}",
                f.msg_type, f.round
            ))),
        }
    }
}

/// Split step driven by the server. Returns `None` when the server aborts mid-step.
fn split_step<L: Link>(
    state: &mut ClientState,
    ep: &mut Endpoint<L>,
    round: u32,
    train_head_tail: bool,
) -> Result<Option<f32>> {
    let batch: Vec<Sample> = state.next_batch().into_iter().cloned().collect();
    let refs: Vec<&Sample> = batch.iter().collect();
    let (pass, feat) = split_head_pass(&state.head, &state.head_params, &refs)?;
    ep.send(MsgType::Feat, round, encode_tensor(&feat)?)?;
    let Some(f) = ep.expect(MsgType::BodyOut, round)? else {
        return Ok(None);
    };
    let body_out = decode_tensor(&f.payload)?;
    let (loss, grad) = split_tail_pass(
        &state.tail,
        &mut state.tail_params,
        &refs,
        &body_out,
        state.loss_scale,
    )?;
    ep.send(MsgType::BodyOutGrad, round, encode_tensor(&grad)?)?;
    let Some(f) = ep.expect(MsgType::FeatGrad, round)? else {
        return Ok(None);
    };
    pass.backward(&mut state.head_params, &decode_tensor(&f.payload)?)?;
    if train_head_tail {
        state.update_head_tail(round)?;
    }
    Ok(Some(loss))
}

/// Client actor loop: serves server commands until `Shutdown`, then returns the final state.
pub fn run_client<L: Link>(mut state: ClientState, link: MeteredLink<L>) -> Result<ClientState> {
    let mut ep = Endpoint {
        link,
        id: state.id,
        task: state.task.id(),
    };
    ep.send_control(0, Control::Hello)?;
    let mut snapshot: Option<(u32, ClientState)> = None;
    loop {
        let frame = match ep.recv() {
            Ok(Incoming::Frame(f)) => f,
            Ok(Incoming::Abort(round)) => {
                restore(&mut state, &mut snapshot, round);
                continue;
            }
            Err(ProtocolError::Transport(TransportError::ConnectionLost)) => {
                warn!(client = state.id, "server hung up without shutdown");
                return Err(TransportError::ConnectionLost.into());
            }
            Err(e) => return Err(e),
        };
        if frame.msg_type != MsgType::Control {
            return Err(ProtocolError::Unexpected(format!(
                "idle client received {:?}",
                frame.msg_type
            )));
        }
        let round = frame.round;
        match Control::decode(&frame.payload)? {
            Control::Step {
                train_head_tail,
                train_body,
            } => {
                snapshot = Some((round, state.clone()));
                let loss = if state.body.is_some() {
                    Some(state.local_step(round, train_head_tail, train_body)?)
                } else {
                    split_step(&mut state, &mut ep, round, train_head_tail)?
                };
                match loss {
                    Some(l) => {
                        state.last_loss = Some(l);
                        ep.send_control(round, Control::Loss(l))?;
                    }
                    None => restore(&mut state, &mut snapshot, round),
                }
            }
            Control::Install { setup } => {
                ep.link.set_traffic(if setup {
                    Traffic::Setup
                } else {
                    Traffic::Steady
                });
                let got = ep.expect(MsgType::Weights, round);
                ep.link.set_traffic(Traffic::Steady);
                match got? {
                    Some(f) => state.install(decode_named(&f.payload)?)?,
                    None => restore(&mut state, &mut snapshot, round),
                }
            }
            Control::Upload { setup } => {
                let blob = encode_named(state.weights().into_iter())?;
                ep.link.set_traffic(if setup {
                    Traffic::Setup
                } else {
                    Traffic::Steady
                });
                let sent = ep.send(MsgType::Weights, round, blob);
                ep.link.set_traffic(Traffic::Steady);
                sent?;
            }
            Control::Shutdown => {
                debug!(client = state.id, "shutdown");
                return Ok(state);
            }
            other => {
                return Err(ProtocolError::Unexpected(format!(
                    "client received {other:?}"
                )))
            }
        }
    }
}

/// Restores the snapshot taken at the start of `round`, if there is one.
fn restore(state: &mut ClientState, snapshot: &mut Option<(u32, ClientState)>, round: u32) {
    if snapshot.as_ref().is_some_and(|(r, _)| *r == round) {
        debug!(
            client = state.id,
            round, "rolling back to round-start state"
        );
        *state = snapshot.take().expect("checked").1;
    }
}
