use super::{ClientNode, NodeError, Result, Served, ServerNode, SessionConfig};
use crate::protocol::{
    sim_pair, AuditHook, ChannelStats, InferenceResponse, SimConfig, StatsHandle, Transport,
};
use crate::rng::NodeRng;
use crate::{Real, Tensor};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::Instant;

/// One server and its clients, connected by one channel per client.
pub struct Session {
    pub config: SessionConfig,
    pub server: ServerNode,
    pub clients: Vec<ClientNode>,
    stats: Vec<Arc<StatsHandle>>,
    server_trace: Vec<Real>,
    client_trace: Vec<Real>,
}

/// Loss traces and timings of one training round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRound {
    pub round: u32,
    /// Local losses per client, in step order.
    pub client_losses: Vec<Vec<Real>>,
    /// Server losses in the order uploads were applied.
    pub server_losses: Vec<Real>,
    #[serde(skip)]
    pub client_seconds: Vec<f64>,
    #[serde(skip)]
    pub server_seconds: f64,
}

impl Session {
    /// Connects every client to the server through an in-process channel.
    /// Hooks observe every message on every channel.
    pub fn connect_sim(
        config: SessionConfig,
        server: ServerNode,
        clients: Vec<ClientNode>,
        sim: SimConfig,
        hooks: &[AuditHook],
    ) -> Result<Self> {
        let links = (0..clients.len())
            .map(|_| {
                let (c, s) = sim_pair(sim);
                hooks.iter().for_each(|h| c.add_audit_hook(h.clone()));
                let stats = c.stats_handle();
                (Box::new(c) as Box<dyn Transport + Send>, Box::new(s) as Box<dyn Transport + Send>, stats)
            })
            .collect();
        Self::connect(config, server, clients, links)
    }

    /// Connects clients over caller-supplied transports, given as
    /// `(client end, server end, stats)` per client in id order.
    #[allow(clippy::type_complexity)]
    pub fn connect(
        config: SessionConfig,
        mut server: ServerNode,
        mut clients: Vec<ClientNode>,
        links: Vec<(Box<dyn Transport + Send>, Box<dyn Transport + Send>, Arc<StatsHandle>)>,
    ) -> Result<Self> {
        config.validate()?;
        if server.cut().t_zeta() != config.t_zeta || server.cut().steps() != config.steps {
            return Err(NodeError::ConfigMismatch("server disagrees on (T, t_zeta)".into()));
        }
        for (i, c) in clients.iter().enumerate() {
            if c.id() as usize != i {
                return Err(NodeError::ConfigMismatch(format!("client at slot {i} has id {}", c.id())));
            }
            if c.cut() != server.cut() {
                return Err(NodeError::ConfigMismatch(format!("client {i} disagrees on (T, t_zeta)")));
            }
            if c.model().num_labels() != server.model().num_labels() {
                return Err(NodeError::ConfigMismatch(format!("client {i} label space differs")));
            }
        }
        if links.len() != clients.len() || server.num_links() != 0 {
            return Err(NodeError::ConfigMismatch("one fresh link per client required".into()));
        }
        let mut stats = Vec::with_capacity(links.len());
        for (client, (c_end, s_end, st)) in clients.iter_mut().zip(links) {
            client.attach(c_end);
            server.attach(s_end);
            stats.push(st);
        }
        Ok(Self { config, server, clients, stats, server_trace: Vec::new(), client_trace: Vec::new() })
    }

    /// Traffic summed over all channels.
    pub fn channel_stats(&self) -> ChannelStats {
        self.stats.iter().fold(ChannelStats::default(), |acc, s| acc.merge(&s.snapshot()))
    }

    pub fn client_stats(&self, client: usize) -> ChannelStats {
        self.stats[client].snapshot()
    }

    pub fn client_train_steps(&self) -> u64 {
        self.clients.iter().map(|c| c.counters.train_steps).sum()
    }

    fn plateaued(&self) -> bool {
        let Some(es) = self.config.early_stop else { return false };
        let trace = if self.server_trace.is_empty() { &self.client_trace } else { &self.server_trace };
        es.plateaued(trace)
    }
}

fn run_client(c: &mut ClientNode, round: u32, batches: usize) -> Result<(Vec<Real>, usize, f64)> {
    let start = Instant::now();
    let mut losses = Vec::with_capacity(batches);
    let mut sent = 0;
    for _ in 0..batches {
        let step = c.step(round)?;
        if let Some(l) = step.loss {
            losses.push(l);
        }
        if let Some(u) = step.upload {
            c.send_upload(u)?;
            sent += 1;
        }
    }
    Ok((losses, sent, start.elapsed().as_secs_f64()))
}

/// Runs up to `rounds` rounds starting at round index `first_round`.
/// Each round every client, in ascending id order, processes
/// `batches_per_round` batches; the server then applies the uploads in the
/// order they were sent.
pub fn train_collaborative(session: &mut Session, first_round: u32, rounds: u32) -> Result<Vec<TrainRound>> {
    let batches = session.config.batches_per_round;
    let mut out = Vec::with_capacity(rounds as usize);
    for round in first_round..first_round + rounds {
        let per_client: Vec<Result<(Vec<Real>, usize, f64)>> = if session.config.parallel_clients {
            std::thread::scope(|scope| {
                let handles: Vec<_> = session
                    .clients
                    .iter_mut()
                    .map(|c| scope.spawn(move || run_client(c, round, batches)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("client worker panicked")).collect()
            })
        } else {
            session.clients.iter_mut().map(|c| run_client(c, round, batches)).collect()
        };
        let mut client_losses = Vec::with_capacity(per_client.len());
        let mut client_seconds = Vec::with_capacity(per_client.len());
        let mut sent = Vec::with_capacity(per_client.len());
        for r in per_client {
            let (l, s, secs) = r?;
            client_losses.push(l);
            sent.push(s);
            client_seconds.push(secs);
        }
        let start = Instant::now();
        let mut server_losses = Vec::new();
        for (c, &n) in sent.iter().enumerate() {
            for _ in 0..n {
                match session.server.serve_one(c, None)? {
                    Served::Trained { loss, .. } => server_losses.push(loss),
                    Served::Answered { .. } => return Err(NodeError::UnexpectedMessage("inference_request")),
                }
            }
        }
        let server_seconds = start.elapsed().as_secs_f64();
        session.server_trace.extend_from_slice(&server_losses);
        for l in &client_losses {
            session.client_trace.extend_from_slice(l);
        }
        out.push(TrainRound { round, client_losses, server_losses, client_seconds, server_seconds });
        if session.plateaued() {
            break;
        }
    }
    Ok(out)
}

/// Generates `count` samples for client `client`: the server runs the noisy
/// steps and ships `x_{t_zeta}`, the client finishes locally. At
/// `t_zeta = T` nothing is sent.
pub fn infer_collaborative(
    session: &mut Session,
    client: usize,
    labels: Option<Vec<u32>>,
    count: usize,
    seed: Option<u64>,
) -> Result<Tensor> {
    let c = session
        .clients
        .get_mut(client)
        .ok_or_else(|| NodeError::ConfigMismatch(format!("no client {client}")))?;
    check_labels(&labels, count)?;
    if c.cut().is_independent() {
        let mut rng = c.inference_rng(seed);
        return c.sample_alone(labels.as_deref(), count, &mut rng);
    }
    c.send_request(labels.clone(), count, seed)?;
    session.server.serve_one(client, None)?;
    let c = &mut session.clients[client];
    let (x_tz, seed_used) = c.recv_intermediate()?;
    let mut rng = c.inference_rng(Some(seed_used));
    c.finish_from_cut(x_tz, labels.as_deref(), &mut rng)
}

/// As [`infer_collaborative`], but every random draw on both sides comes
/// from `rng`, in chain order.
pub fn infer_collaborative_shared(
    session: &mut Session,
    client: usize,
    labels: Option<Vec<u32>>,
    count: usize,
    rng: &mut NodeRng,
) -> Result<Tensor> {
    check_labels(&labels, count)?;
    let c = session
        .clients
        .get_mut(client)
        .ok_or_else(|| NodeError::ConfigMismatch(format!("no client {client}")))?;
    if c.cut().is_independent() {
        return c.sample_alone(labels.as_deref(), count, rng);
    }
    c.send_request(labels.clone(), count, None)?;
    session.server.serve_one(client, Some(rng))?;
    let c = &mut session.clients[client];
    let (x_tz, _) = c.recv_intermediate()?;
    c.finish_from_cut(x_tz, labels.as_deref(), rng)
}

/// Server half only: one batch of `x_{t_zeta}` that several clients can
/// finish. Nothing is sent until [`deliver_intermediate`].
pub fn infer_shared_intermediate(
    session: &mut Session,
    labels: Option<Vec<u32>>,
    count: usize,
    seed: u64,
) -> Result<InferenceResponse> {
    check_labels(&labels, count)?;
    let req = crate::protocol::InferenceRequest {
        labels,
        count: count as u32,
        seed: Some(seed),
        client_id: u32::MAX,
    };
    session.server.respond(&req, None)
}

/// Ships a shared intermediate to `client` and returns it as received.
pub fn deliver_intermediate(session: &mut Session, client: usize, resp: &InferenceResponse) -> Result<Tensor> {
    session.server.push_response(client, resp)?;
    let (x, _) = session.clients[client].recv_intermediate()?;
    Ok(x)
}

fn check_labels(labels: &Option<Vec<u32>>, count: usize) -> Result<()> {
    if count == 0 {
        return Err(NodeError::EmptyBatch);
    }
    match labels {
        Some(l) if l.len() != count => {
            Err(NodeError::ConfigMismatch(format!("{} labels for {count} samples", l.len())))
        }
        _ => Ok(()),
    }
}
