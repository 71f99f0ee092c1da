//! Sweep orchestration: one cell per (cut, seed), resumable from on-disk
//! artifacts.

use crate::config::{DataKind, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::fsio::{read, write_atomic};
use crate::hash::{cell_hash, hex, parse_hex, run_hash};
use crate::results::{CellRecord, RoundTrace, RunDocument, SCHEMA_VERSION};
use collafuse::data::{gen_gauss2d, gen_sprites, partition, Dataset, Partition};
use collafuse::denoiser::{init_model, load_checkpoint, save_checkpoint, DenoiserModel, ModelSpec};
use collafuse::metrics::{attribute_probe, batch_frechet, inversion_attack, ProbeResult};
use collafuse::nodes::{
    infer_collaborative, infer_shared_intermediate, train_collaborative, ClientNode, ServerNode, Session,
};
use collafuse::protocol::{AuditHook, ChannelStats, SimConfig};
use collafuse::rng::{derive_seed, normal_tensor, seeded, tags};
use collafuse::{Schedule, Tensor};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

const MODEL_INIT: u64 = 0x1A17;
const EVAL: u64 = 0xE7A1_0000;

/// Evaluation phases; each draws from its own stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    ClientSamples = 1,
    Intermediates = 2,
    Probe = 3,
    Inversion = 4,
}

/// Seed of evaluation phase `phase` in cell `(seed, cut)`.
pub fn eval_seed(seed: u64, cut: usize, phase: Phase) -> u64 {
    derive_seed(derive_seed(derive_seed(seed, EVAL), cut as u64), phase as u64)
}

/// Training outcome stored next to the checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSidecar {
    pub config_hash: String,
    pub traces: Vec<RoundTrace>,
    pub channel: ChannelStats,
    pub client_steps: u64,
    pub server_steps: u64,
}

pub fn cell_dir(run_dir: &Path, cut: usize, seed: u64) -> PathBuf {
    run_dir.join("cells").join(format!("cut{cut:04}_seed{seed}"))
}

/// Pooled dataset and its client partition for `seed`.
pub fn build_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Partition)> {
    let d = &cfg.dataset;
    let n = d.samples_per_client * cfg.clients;
    let data_seed = derive_seed(seed, tags::DATA);
    let ds = match d.kind {
        DataKind::Sprites => gen_sprites(n, d.grid, d.shapes, d.colors, data_seed)?,
        DataKind::Gauss2d => {
            let means: Vec<[f64; 2]> = (0..d.classes)
                .map(|i| {
                    let a = std::f64::consts::TAU * i as f64 / d.classes as f64;
                    [2.0 * a.cos(), 2.0 * a.sin()]
                })
                .collect();
            gen_gauss2d(n, &means, d.variance, data_seed)?
        }
    };
    let part = partition(&ds, cfg.clients, cfg.partition_mode(), d.skew, derive_seed(data_seed, 1))?;
    Ok((ds, part))
}

pub fn model_spec(cfg: &ExperimentConfig, ds: &Dataset) -> ModelSpec {
    ModelSpec {
        arch: cfg.arch(),
        in_shape: ds.sample_shape().to_vec(),
        num_labels: ds.num_joint_labels(),
        time_embed_dim: cfg.model.time_embed_dim,
        steps: cfg.steps,
        null_label: false,
    }
}

/// Fresh models, or the given trained ones, wired into a simulated session.
pub fn build_session(
    cfg: &ExperimentConfig,
    cut: usize,
    seed: u64,
    trained: Option<(DenoiserModel, Vec<DenoiserModel>)>,
) -> Result<Session> {
    build_audited_session(cfg, cut, seed, trained, &[])
}

/// As [`build_session`], with transport audit hooks on every client link.
pub fn build_audited_session(
    cfg: &ExperimentConfig,
    cut: usize,
    seed: u64,
    trained: Option<(DenoiserModel, Vec<DenoiserModel>)>,
    hooks: &[AuditHook],
) -> Result<Session> {
    let (ds, part) = build_data(cfg, seed)?;
    let spec = model_spec(cfg, &ds);
    let scfg = cfg.session_config(cut);
    let schedule = Schedule::scaled_linear(cfg.steps).map_err(|e| CliError::Config(e.to_string()))?;
    let (server_model, client_models) = match trained {
        Some(m) => m,
        None => {
            let s = init_model(spec.clone(), derive_seed(derive_seed(seed, tags::SERVER), MODEL_INIT))?;
            let c = (0..cfg.clients as u32)
                .map(|i| init_model(spec.clone(), derive_seed(derive_seed(seed, tags::client(i)), MODEL_INIT)))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            (s, c)
        }
    };
    if client_models.len() != cfg.clients {
        return Err(CliError::Config(format!("{} client models for {} clients", client_models.len(), cfg.clients)));
    }
    let server = ServerNode::new(server_model, schedule.clone(), &scfg, seed)?;
    let clients = client_models
        .into_iter()
        .enumerate()
        .map(|(i, m)| ClientNode::new(i as u32, m, ds.subset(&part.clients[i]), schedule.clone(), &scfg, seed))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Session::connect_sim(scfg, server, clients, SimConfig::default(), hooks)?)
}

fn check_hash(path: &Path, expected: u64, found: u64) -> Result<()> {
    if expected != found {
        return Err(CliError::ResumeMismatch { path: path.display().to_string(), expected, found });
    }
    Ok(())
}

fn load_model(path: &Path, expected: u64) -> Result<DenoiserModel> {
    let (m, h) = load_checkpoint(&read(path)?)?;
    check_hash(path, expected, h)?;
    Ok(m)
}

fn load_sidecar(dir: &Path, expected: u64) -> Result<Option<TrainSidecar>> {
    let path = dir.join("train.json");
    if !path.exists() {
        return Ok(None);
    }
    let side: TrainSidecar =
        serde_json::from_slice(&read(&path)?).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
    let found = parse_hex(&side.config_hash).ok_or_else(|| CliError::Schema(format!("{}: bad hash", path.display())))?;
    check_hash(&path, expected, found)?;
    Ok(Some(side))
}

/// Session of a trained cell loaded from disk, if its artifacts exist.
pub fn open_trained(cfg: &ExperimentConfig, cut: usize, seed: u64) -> Result<Option<(Session, TrainSidecar)>> {
    let dir = cell_dir(&cfg.run_dir(), cut, seed);
    let h = cell_hash(cfg, cut, seed);
    let Some(side) = load_sidecar(&dir, h)? else { return Ok(None) };
    let server = load_model(&dir.join("server.cfck"), h)?;
    let clients =
        (0..cfg.clients).map(|i| load_model(&dir.join(format!("client{i}.cfck")), h)).collect::<Result<Vec<_>>>()?;
    Ok(Some((build_session(cfg, cut, seed, Some((server, clients)))?, side)))
}

/// Loads the trained cell, or trains it and writes its checkpoints.
/// The flag is true when training actually ran.
pub fn train_cell(cfg: &ExperimentConfig, cut: usize, seed: u64) -> Result<(Session, TrainSidecar, bool)> {
    if let Some((s, side)) = open_trained(cfg, cut, seed)? {
        return Ok((s, side, false));
    }
    let dir = cell_dir(&cfg.run_dir(), cut, seed);
    let h = cell_hash(cfg, cut, seed);
    let mut session = build_session(cfg, cut, seed, None)?;
    let rounds = train_collaborative(&mut session, 0, cfg.rounds)?;
    let side = TrainSidecar {
        config_hash: hex(h),
        traces: rounds
            .into_iter()
            .map(|r| RoundTrace { round: r.round, client_losses: r.client_losses, server_losses: r.server_losses })
            .collect(),
        channel: session.channel_stats(),
        client_steps: session.client_train_steps(),
        server_steps: session.server.counters.train_steps,
    };
    write_atomic(&dir.join("server.cfck"), &save_checkpoint(session.server.model(), h))?;
    for (i, c) in session.clients.iter().enumerate() {
        write_atomic(&dir.join(format!("client{i}.cfck")), &save_checkpoint(c.model(), h))?;
    }
    // The sidecar goes last: its presence marks a complete set.
    write_atomic(&dir.join("train.json"), serde_json::to_string_pretty(&side).expect("serializes").as_bytes())?;
    Ok((session, side, true))
}

fn first_n(ds: &Dataset, n: usize) -> Dataset {
    if n == 0 || n >= ds.len() {
        return ds.clone();
    }
    ds.subset(&(0..n).collect::<Vec<_>>())
}

fn pooled(session: &Session) -> Dataset {
    let parts: Vec<&Dataset> = session.clients.iter().map(|c| c.data()).collect();
    let first = parts[0];
    let mut data = Vec::new();
    let mut attrs = Vec::new();
    for p in &parts {
        data.extend_from_slice(p.x.data());
        attrs.extend(p.attrs.iter().cloned());
    }
    let mut shape = vec![attrs.len()];
    shape.extend_from_slice(first.sample_shape());
    let x = Tensor::new(shape, data).expect("pooled shape");
    Dataset::new(first.kind, x, attrs, first.cardinality.clone()).expect("pooled data is valid")
}

/// Server-side `x_{t_zeta}` for `labels`; pure noise when the server has no steps.
pub fn server_intermediates(session: &mut Session, labels: Vec<u32>, seed: u64) -> Result<Tensor> {
    let n = labels.len();
    if session.server.cut().is_independent() {
        let mut shape = vec![n];
        shape.extend_from_slice(session.server.model().in_shape());
        return Ok(normal_tensor(&mut seeded(seed), &shape));
    }
    Ok(infer_shared_intermediate(session, Some(labels), n, seed)?.x_tz.to_compute())
}

pub fn probe_cell(cfg: &ExperimentConfig, session: &mut Session, cut: usize, seed: u64) -> Result<(f64, ProbeResult)> {
    let real = first_n(&pooled(session), cfg.eval.intermediate_samples);
    let x = server_intermediates(session, real.joint_labels(), eval_seed(seed, cut, Phase::Intermediates))?;
    let fd = batch_frechet(&x, &real.x)?;
    let mut probe =
        attribute_probe(&x, &real.attrs, &real.cardinality, &cfg.probe_config(eval_seed(seed, cut, Phase::Probe)))?;
    probe.t_zeta = Some(cut);
    Ok((fd, probe))
}

fn diff(after: ChannelStats, before: ChannelStats) -> ChannelStats {
    ChannelStats {
        bytes_up: after.bytes_up - before.bytes_up,
        bytes_down: after.bytes_down - before.bytes_down,
        messages: after.messages - before.messages,
        sim_micros: after.sim_micros - before.sim_micros,
    }
}

/// Scores a trained cell.
pub fn evaluate(
    cfg: &ExperimentConfig,
    session: &mut Session,
    side: &TrainSidecar,
    cut: usize,
    seed: u64,
) -> Result<CellRecord> {
    let before = session.channel_stats();
    let k = session.clients.len();
    let mut fd_client_per_client = Vec::with_capacity(k);
    for c in 0..k {
        let real = first_n(session.clients[c].data(), cfg.eval.client_samples);
        let labels = real.joint_labels();
        let n = labels.len();
        let gen_seed = derive_seed(eval_seed(seed, cut, Phase::ClientSamples), c as u64);
        let x = infer_collaborative(session, c, Some(labels), n, Some(gen_seed))?;
        fd_client_per_client.push(batch_frechet(&x, &real.x)?);
    }
    let (fd_server, probe) = probe_cell(cfg, session, cut, seed)?;
    let inv_seed = eval_seed(seed, cut, Phase::Inversion);
    let inversion = (0..k)
        .map(|a| inversion_attack(session, a, (a + 1) % k, cfg.eval.inversion_samples, inv_seed))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mean = |v: &mut dyn Iterator<Item = f64>, n: usize| v.sum::<f64>() / n as f64;
    Ok(CellRecord {
        cut,
        seed,
        config_hash: side.config_hash.clone(),
        fd_client: mean(&mut fd_client_per_client.iter().copied(), k),
        fd_client_per_client,
        fd_server,
        probe_f1_mean: probe.mean_f1(),
        probe_f1: probe.f1,
        inversion_fd_cross: mean(&mut inversion.iter().map(|r| r.cross_fd), inversion.len()),
        inversion_fd_self: mean(&mut inversion.iter().map(|r| r.self_fd), inversion.len()),
        inversion,
        channel_train: side.channel,
        channel_infer: diff(session.channel_stats(), before),
        client_steps: side.client_steps,
        server_steps: side.server_steps,
        traces: side.traces.clone(),
    })
}

/// Wall-clock of one cell; kept out of the deterministic outputs.
#[derive(Debug, Clone)]
pub struct CellTiming {
    pub cut: usize,
    pub seed: u64,
    pub train_seconds: f64,
    pub eval_seconds: f64,
    pub trained: bool,
    pub evaluated: bool,
}

/// Returns the cell record, reusing whatever artifacts already exist.
pub fn run_cell(cfg: &ExperimentConfig, cut: usize, seed: u64) -> Result<(CellRecord, CellTiming)> {
    let dir = cell_dir(&cfg.run_dir(), cut, seed);
    let h = cell_hash(cfg, cut, seed);
    let mut timing = CellTiming { cut, seed, train_seconds: 0.0, eval_seconds: 0.0, trained: false, evaluated: false };
    let result = dir.join("result.json");
    if result.exists() {
        let rec: CellRecord =
            serde_json::from_slice(&read(&result)?).map_err(|e| CliError::Schema(format!("{}: {e}", result.display())))?;
        check_hash(&result, h, parse_hex(&rec.config_hash).unwrap_or(!h))?;
        return Ok((rec, timing));
    }
    let start = Instant::now();
    let (mut session, side, trained) = train_cell(cfg, cut, seed)?;
    timing.train_seconds = start.elapsed().as_secs_f64();
    timing.trained = trained;
    let start = Instant::now();
    let rec = evaluate(cfg, &mut session, &side, cut, seed)?;
    timing.eval_seconds = start.elapsed().as_secs_f64();
    timing.evaluated = true;
    write_atomic(&result, serde_json::to_string_pretty(&rec).expect("serializes").as_bytes())?;
    Ok((rec, timing))
}

fn log_timing(run_dir: &Path, t: &CellTiming) -> Result<()> {
    let path = run_dir.join("timings.log");
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| crate::fsio::io_err(&path, e))?;
    writeln!(
        f,
        "cut={} seed={} train_s={:.3} eval_s={:.3} trained={} evaluated={}",
        t.cut, t.seed, t.train_seconds, t.eval_seconds, t.trained, t.evaluated
    )?;
    Ok(())
}

/// Every (cut, seed) cell in config order; cuts vary slowest.
pub fn cells(cfg: &ExperimentConfig) -> Vec<(usize, u64)> {
    cfg.cuts.iter().flat_map(|&c| cfg.seeds.iter().map(move |&s| (c, s))).collect()
}

/// Runs or resumes every cell on `cfg.jobs` threads, then writes
/// `config.toml`, `run.json` and `results.csv`.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<RunDocument> {
    cfg.validate()?;
    let run_dir = cfg.run_dir();
    std::fs::create_dir_all(&run_dir).map_err(|e| crate::fsio::io_err(&run_dir, e))?;
    write_atomic(&run_dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    let todo = cells(cfg);
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<CellRecord>>>> = Mutex::new((0..todo.len()).map(|_| None).collect());
    let log = Mutex::new(());
    std::thread::scope(|scope| {
        for _ in 0..cfg.jobs.min(todo.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(cut, seed)) = todo.get(i) else { break };
                let out = run_cell(cfg, cut, seed).and_then(|(rec, t)| {
                    let _g = log.lock().expect("log lock");
                    log_timing(&run_dir, &t).map(|_| rec)
                });
                let failed = out.is_err();
                slots.lock().expect("slot lock")[i] = Some(out);
                if failed {
                    next.store(todo.len(), Ordering::SeqCst);
                }
            });
        }
    });
    let mut records = Vec::with_capacity(todo.len());
    for slot in slots.into_inner().expect("slot lock") {
        match slot {
            Some(r) => records.push(r?),
            None => return Err(CliError::Io("sweep aborted".into())),
        }
    }
    let doc = RunDocument { schema_version: SCHEMA_VERSION, config_hash: hex(run_hash(cfg)), config: cfg.clone(), cells: records };
    write_outputs(&run_dir, &doc)?;
    Ok(doc)
}

pub fn write_outputs(run_dir: &Path, doc: &RunDocument) -> Result<()> {
    write_atomic(&run_dir.join("run.json"), doc.to_json().as_bytes())?;
    write_atomic(&run_dir.join("results.csv"), doc.to_csv().as_bytes())
}

/// Rebuilds `run.json` and `results.csv` from finished cell results.
pub fn export(cfg: &ExperimentConfig) -> Result<RunDocument> {
    let run_dir = cfg.run_dir();
    let mut records = Vec::new();
    for (cut, seed) in cells(cfg) {
        let path = cell_dir(&run_dir, cut, seed).join("result.json");
        if !path.exists() {
            return Err(CliError::Missing(path.display().to_string()));
        }
        let rec: CellRecord =
            serde_json::from_slice(&read(&path)?).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
        check_hash(&path, cell_hash(cfg, cut, seed), parse_hex(&rec.config_hash).unwrap_or(!cell_hash(cfg, cut, seed)))?;
        records.push(rec);
    }
    let doc = RunDocument { schema_version: SCHEMA_VERSION, config_hash: hex(run_hash(cfg)), config: cfg.clone(), cells: records };
    RunDocument::from_json(&doc.to_json())?;
    write_outputs(&run_dir, &doc)?;
    Ok(doc)
}
