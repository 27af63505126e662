use std::net::{TcpListener, ToSocketAddrs};
use std::thread;
use std::time::{Duration, Instant};

use tracing::{info, warn};

use super::runner::{drive_session, make_record, prepare_unit, SeedOutcome};
use super::{ExperimentConfig, ExperimentError, Result, StrategyChoice, TransportKind};
use crate::protocol::{run_client, Session};
use crate::task::TaskKind;
use crate::transport::{Link, MeteredLink, SharedLedger, Side, TcpLink};

fn single_unit(cfg: &ExperimentConfig) -> Result<Vec<TaskKind>> {
    if cfg.strategy == StrategyChoice::Centralized {
        return Err(ExperimentError::config(
            "strategy",
            "the centralized reference has no clients to serve",
        ));
    }
    let mut units = cfg.units();
    if units.len() != 1 {
        return Err(ExperimentError::config(
            "clients",
            "serving needs a single session: use festa-mtl or configure one task",
        ));
    }
    Ok(units.remove(0))
}

/// Accepts every client of the configured session on `listener`, trains and
/// evaluates. Clients are started separately with [`run_tcp_client`].
pub fn serve_tcp(
    cfg: &ExperimentConfig,
    variant: &str,
    seed: u64,
    listener: TcpListener,
    timeout: Duration,
) -> Result<SeedOutcome> {
    cfg.validate()?;
    let tasks = single_unit(cfg)?;
    let t0 = Instant::now();
    let p = prepare_unit(cfg, &tasks, seed)?;
    let ledger = SharedLedger::new();
    let n = p.clients.len();
    info!(clients = n, addr = ?listener.local_addr().ok(), "waiting for clients");
    let mut links = Vec::with_capacity(n);
    for _ in 0..n {
        let (stream, peer) = listener.accept()?;
        info!(%peer, "client connected");
        let link = TcpLink::from_stream(stream, timeout)?;
        links.push(MeteredLink::new(
            Box::new(link) as Box<dyn Link>,
            Side::Server,
            ledger.clone(),
        ));
    }
    let session = Session::connect(
        p.strategy,
        p.train,
        cfg.train.scheme,
        p.k_avg,
        p.lambda,
        p.server,
        links,
        ledger,
    )?;
    let (metrics, curve, measured) = drive_session(session, cfg, &p.spec, &p.data)?;
    let mut served = cfg.clone();
    served.transport = TransportKind::Tcp;
    let record = make_record(&served, variant, seed, metrics, measured, p.expected, t0);
    Ok(SeedOutcome { record, curve })
}

/// Plays client `id` of the configured session against a server at `addr`,
/// retrying the connection until `timeout` elapses.
pub fn run_tcp_client(
    cfg: &ExperimentConfig,
    seed: u64,
    id: u16,
    addr: impl ToSocketAddrs + Clone,
    timeout: Duration,
) -> Result<()> {
    cfg.validate()?;
    let tasks = single_unit(cfg)?;
    let p = prepare_unit(cfg, &tasks, seed)?;
    let state = p.clients.into_iter().find(|c| c.id == id).ok_or_else(|| {
        ExperimentError::config("id", format!("no client {id} in this configuration"))
    })?;
    let deadline = Instant::now() + timeout;
    let link = loop {
        match TcpLink::connect(addr.clone(), timeout) {
            Ok(l) => break l,
            Err(e) if Instant::now() < deadline => {
                warn!(error = %e, "connect failed, retrying");
                thread::sleep(Duration::from_millis(200));
            }
            Err(e) => return Err(e.into()),
        }
    };
    let state = run_client(
        state,
        MeteredLink::new(link, Side::Client, SharedLedger::new()),
    )?;
    info!(id = state.id, task = %state.task, "client finished");
    Ok(())
}
