#![allow(dead_code)]

use std::time::Duration;

use festa::model::{BodyConfig, ModelSpec};
use festa::protocol::{
    build_participants, join_clients, spawn_inproc, spawn_tcp_loopback, ClientHandles, ClientState,
    Scheme, ServerState, Session, Strategy, TrainConfig,
};
use festa::taskbench::{gen_classification, gen_detection, gen_segmentation, Sample};
use festa::transport::SharedLedger;
use festa::TaskKind;

pub const TIMEOUT: Duration = Duration::from_secs(20);

pub fn small_spec() -> ModelSpec {
    ModelSpec {
        body: BodyConfig::new(1, 2, 8, 16).unwrap(),
        head_hidden: 8,
        ..ModelSpec::default()
    }
}

pub fn samples(task: TaskKind, n: usize, seed: u64) -> Vec<Sample> {
    match task {
        TaskKind::Classification => gen_classification(n, seed).unwrap(),
        TaskKind::Segmentation => gen_segmentation(n, seed),
        TaskKind::Detection => gen_detection(n, seed),
    }
}

/// One shard of `n` samples per entry, drawn with distinct seeds.
pub fn shards(layout: &[(TaskKind, usize)], n: usize, seed: u64) -> Vec<(TaskKind, Vec<Sample>)> {
    let mut out = Vec::new();
    let mut k = 0;
    for &(task, clients) in layout {
        for _ in 0..clients {
            out.push((task, samples(task, n, seed * 1000 + k)));
            k += 1;
        }
    }
    out
}

pub struct Run {
    pub session: Session,
    pub handles: ClientHandles,
    pub client_ledger: SharedLedger,
}

#[allow(clippy::too_many_arguments)]
pub fn start(
    strategy: Strategy,
    spec: &ModelSpec,
    cfg: TrainConfig,
    scheme: Scheme,
    k_avg: Option<u32>,
    lambda: [f32; 3],
    shards: Vec<(TaskKind, Vec<Sample>)>,
    seed: u64,
    tcp: bool,
) -> Run {
    let (server, clients) = build_participants(strategy, spec, &cfg, seed, shards).unwrap();
    start_with(strategy, cfg, scheme, k_avg, lambda, server, clients, tcp)
}

#[allow(clippy::too_many_arguments)]
pub fn start_with(
    strategy: Strategy,
    cfg: TrainConfig,
    scheme: Scheme,
    k_avg: Option<u32>,
    lambda: [f32; 3],
    server: ServerState,
    clients: Vec<ClientState>,
    tcp: bool,
) -> Run {
    let spawn = if tcp {
        spawn_tcp_loopback
    } else {
        spawn_inproc
    };
    let (session, handles, client_ledger) = spawn(
        strategy, cfg, scheme, k_avg, lambda, server, clients, TIMEOUT,
    )
    .unwrap();
    Run {
        session,
        handles,
        client_ledger,
    }
}

pub fn finish(run: Run) -> (festa::protocol::TrainedModels, Vec<ClientState>) {
    let models = run.session.finish().unwrap();
    (models, join_clients(run.handles).unwrap())
}
