//! End-to-end acceptance checks. Prints one PASS/FAIL line per check and
//! exits nonzero if any fails.
//!
//! The trend sweep is cached under the cargo target tmp dir and resumed on
//! later runs; `cargo clean` or deleting `acceptance/` there forces a fresh one.

use collafuse::autograd::Graph;
use collafuse::denoiser::{init_model, save_checkpoint, DenoiserModel};
use collafuse::diffusion::{compute_remap, default_beta_range, forward_diffuse, gaussian_oracle_eps, reverse_step};
use collafuse::metrics::linalg::sqrtm_psd;
use collafuse::metrics::{frechet_distance, FeatureStats};
use collafuse::nodes::{
    infer_collaborative, infer_collaborative_shared, sample_monolithic, train_collaborative, ClientNode, ServerNode,
    Session,
};
use collafuse::protocol::{encode, AuditHook, Direction, Message, SimConfig, TrainBatchUpload, WirePrecision, WireTensor};
use collafuse::rng::{normal_tensor, normal_vec, seeded};
use collafuse::{Schedule, Tensor, Var};
use collafuse_cli::config::{ExperimentConfig, Preset, WireKind};
use collafuse_cli::results::CellRecord;
use collafuse_cli::sweep::{build_audited_session, build_data, cell_dir, model_spec, run_sweep};
use nalgebra::DMatrix;
use rand::Rng;
use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct Report {
    failed: usize,
}

impl Report {
    fn record(&mut self, id: usize, name: &str, elapsed: Duration, budget: Option<Duration>, o: Outcome) {
        let in_time = budget.is_none_or(|b| elapsed <= b);
        let pass = o.pass && in_time;
        if !pass {
            self.failed += 1;
        }
        let budget = budget.map(|b| format!(" budget={}s", b.as_secs())).unwrap_or_default();
        println!(
            "C{id:<2} {:<4} {name}: {} elapsed={:.1}s{budget}",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64()
        );
    }

    fn run(&mut self, id: usize, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let o = f();
        self.record(id, name, start.elapsed(), budget, o);
    }
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

// ---------------------------------------------------------------------------
// 1: tape gradients against central differences

const OPS: usize = 9;

/// Random chain of ops over leaves x[3,4], y[3,4], w[4,4], b[4], target[3,4].
fn random_graph(g: &mut Graph<f64>, v: &[Var], ops: &[(usize, f64)]) -> Var {
    let mut cur = v[0];
    for &(op, a) in ops {
        cur = match op {
            0 => g.add(cur, v[1]).unwrap(),
            1 => g.sub(cur, v[1]).unwrap(),
            2 => g.mul(cur, v[1]).unwrap(),
            3 => g.scale(cur, a),
            4 => g.square(cur),
            5 => g.silu(cur),
            6 => g.matmul(cur, v[2]).unwrap(),
            7 => g.add_row(cur, v[3]).unwrap(),
            _ => {
                let r = g.reshape(cur, &[4, 3]).unwrap();
                g.reshape(r, &[3, 4]).unwrap()
            }
        };
    }
    if ops.len().is_multiple_of(2) {
        g.mse_loss(cur, v[4]).unwrap()
    } else {
        g.sum(cur)
    }
}

fn gradient_check() -> Outcome {
    let mut rng = seeded(2024);
    let shapes: [&[usize]; 5] = [&[3, 4], &[3, 4], &[4, 4], &[4], &[3, 4]];
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let leaves: Vec<Tensor> = shapes
            .iter()
            .map(|s| {
                let n = s.iter().product();
                let d = normal_vec(&mut rng, n).iter().map(|x| 0.5 * x).collect();
                Tensor::new(s.to_vec(), d).unwrap().with_grad()
            })
            .collect();
        let len = rng.random_range(1..=8);
        let ops: Vec<(usize, f64)> = (0..len).map(|_| (rng.random_range(0..OPS), rng.random_range(-1.5..1.5))).collect();
        let eval = |ls: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ls.iter().map(|l| g.leaf(l)).collect();
            let out = random_graph(&mut g, &vars, &ops);
            (g, vars, out)
        };
        let (mut g, vars, out) = eval(&leaves);
        g.backward(out).unwrap();
        let h = 1e-5;
        for (i, l) in leaves.iter().enumerate() {
            let analytic = g.grad(vars[i]).unwrap().to_vec();
            for j in 0..l.numel() {
                let mut p = leaves.clone();
                p[i].data_mut()[j] += h;
                let (g1, _, o1) = eval(&p);
                p[i].data_mut()[j] -= 2.0 * h;
                let (g2, _, o2) = eval(&p);
                let numeric = (g1.value(o1).item().unwrap() - g2.value(o2).item().unwrap()) / (2.0 * h);
                let err = (analytic[j] - numeric).abs() / analytic[j].abs().max(numeric.abs()).max(1e-3);
                worst = worst.max(err);
            }
        }
    }
    outcome(worst < 1e-4, format!("graphs=50 max_rel_err={worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 2, 3: forward marginals and the oracle reverse chain

fn linear_schedule(steps: usize) -> Schedule {
    let (a, b) = default_beta_range(steps);
    Schedule::linear(steps, a, b).unwrap()
}

fn cumulative_alpha(s: &Schedule, t: usize) -> f64 {
    s.betas().iter().take(t).fold(1.0, |acc, b| acc * (1.0 - b))
}

/// (|mean error| / se, |var error| / se)
fn moment_z(x: &[f64], mean: f64, var: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0);
    ((m - mean).abs() / (var / n).sqrt(), (v - var).abs() / (var * (2.0 / (n - 1.0)).sqrt()))
}

fn forward_marginals() -> Outcome {
    let s = linear_schedule(1000);
    let mut rng = seeded(77);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let t = rng.random_range(1..=1000);
        let x0 = rng.random_range(-1.0..1.0);
        let eps = normal_tensor(&mut rng, &[10_000, 1]);
        let xt = forward_diffuse(&Tensor::full(vec![10_000, 1], x0), t, &eps, &s).unwrap();
        let ab = cumulative_alpha(&s, t);
        let (zm, zv) = moment_z(xt.data(), ab.sqrt() * x0, 1.0 - ab);
        worst = worst.max(zm).max(zv);
    }
    outcome(worst < 3.0, format!("cases=5 draws=10000 worst_z={worst:.2}"))
}

fn oracle_chain() -> Outcome {
    let (steps, chains, mu, var) = (50, 2000, -0.4, 0.36);
    let s = linear_schedule(steps);
    let mut rng = seeded(78);
    let mu_t = Tensor::full(vec![1], mu);
    let mut x = normal_tensor(&mut rng, &[chains, 1]);
    for t in (1..=steps).rev() {
        let eps = gaussian_oracle_eps(&x, t, &mu_t, var, &s).unwrap();
        let z = (t > 1).then(|| normal_tensor(&mut rng, &[chains, 1]));
        x = reverse_step(&x, t, &eps, z.as_ref(), &s).unwrap();
    }
    let (zm, zv) = moment_z(x.data(), mu, var);
    outcome(zm < 3.0 && zv < 3.0, format!("T=50 chains=2000 mean_z={zm:.2} var_z={zv:.2}"))
}

// ---------------------------------------------------------------------------
// 4: remap

fn remap() -> Outcome {
    let m = compute_remap(1000, 100).unwrap().m;
    let zero = compute_remap(1000, 0).unwrap().m;
    let full = compute_remap(1000, 1000).unwrap().m;
    outcome(m == 190 && zero == 0 && full == 1000, format!("M(1000,100)={m} M(0)={zero} M(T)={full}"))
}

// ---------------------------------------------------------------------------
// 5: split and monolithic sampling agree bit for bit

fn split_equivalence() -> Outcome {
    let mut cfg = ExperimentConfig::preset(Preset::Quick);
    cfg.no_remap = true;
    cfg.wire = WireKind::F64;
    let (ds, part) = build_data(&cfg, 0).unwrap();
    let model = init_model(model_spec(&cfg, &ds), 5).unwrap();
    let schedule = Schedule::scaled_linear(cfg.steps).unwrap();
    let labels: Vec<u32> = (0..8).map(|i| (i * 4) % ds.num_joint_labels() as u32).collect();
    let mut mismatched = Vec::new();
    for cut in [cfg.steps / 4, cfg.steps / 2, 3 * cfg.steps / 4] {
        let scfg = cfg.session_config(cut);
        let client = ClientNode::new(0, model.clone(), ds.subset(&part.clients[0]), schedule.clone(), &scfg, 0).unwrap();
        let server = ServerNode::new(model.clone(), schedule.clone(), &scfg, 0).unwrap();
        let clip = scfg.clip_x0;
        let mut s = Session::connect_sim(scfg, server, vec![client], SimConfig::default(), &[]).unwrap();
        let split = infer_collaborative_shared(&mut s, 0, Some(labels.clone()), 8, &mut seeded(cut as u64)).unwrap();
        let mono = sample_monolithic(&model, &schedule, Some(&labels), 8, clip, &mut seeded(cut as u64)).unwrap();
        let same = split.shape() == mono.shape()
            && split.data().iter().zip(mono.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            mismatched.push(cut);
        }
    }
    outcome(mismatched.is_empty(), format!("cuts=25,50,75 mismatched={mismatched:?}"))
}

// ---------------------------------------------------------------------------
// 6: privacy boundary audit

type Log = Arc<Mutex<Vec<(Direction, Message, Vec<u8>)>>>;

fn row_keys(t: &Tensor) -> Vec<Vec<u32>> {
    (0..t.batch_len()).map(|i| t.sample(i).iter().map(|&v| (v as f32).to_bits()).collect()).collect()
}

/// 8-byte windows that identify model parameters: each f64 value and each
/// consecutive f32 pair. Values with short mantissas (zero-initialized
/// biases, unit gains) would match ordinary header bytes and are skipped.
fn param_fingerprints(models: &[&DenoiserModel]) -> HashSet<[u8; 8]> {
    let distinctive = |v: f64| (v as f32).to_bits() & 0xFFFF != 0 && v.to_bits() & 0xFFFF_FFFF != 0;
    let mut set = HashSet::new();
    for m in models {
        for p in m.params() {
            let d = p.tensor.data();
            for (i, &v) in d.iter().enumerate().filter(|(_, v)| distinctive(**v)) {
                set.insert(v.to_le_bytes());
                if let Some(&next) = d.get(i + 1).filter(|n| distinctive(**n)) {
                    let mut b = [0u8; 8];
                    b[..4].copy_from_slice(&(v as f32).to_le_bytes());
                    b[4..].copy_from_slice(&(next as f32).to_le_bytes());
                    set.insert(b);
                }
            }
        }
    }
    set
}

fn privacy_audit(cfg: &ExperimentConfig, run_dir: &Path) -> Outcome {
    let (cut, seed) = (20, 0);
    let log: Log = Arc::default();
    let sink = log.clone();
    let hook: AuditHook = Arc::new(move |d, m, b| sink.lock().unwrap().push((d, m.clone(), b.to_vec())));
    let mut s = build_audited_session(cfg, cut, seed, None, &[hook]).unwrap();
    let initial: Vec<DenoiserModel> = s.clients.iter().map(|c| c.model().clone()).collect();
    train_collaborative(&mut s, 0, cfg.rounds).unwrap();
    for c in 0..s.clients.len() {
        infer_collaborative(&mut s, c, Some(vec![0, 1, 2]), 3, Some(9)).unwrap();
    }

    // the audited run is the sweep's own training run for this cell
    let stored = std::fs::read(cell_dir(run_dir, cut, seed).join("server.cfck")).ok();
    let hash = collafuse::denoiser::load_checkpoint(stored.as_deref().unwrap_or_default()).map(|(_, h)| h);
    let same_run = hash.is_ok_and(|h| stored.as_deref() == Some(save_checkpoint(s.server.model(), h).as_slice()));

    let mut clean: HashSet<Vec<u32>> = HashSet::new();
    for c in &s.clients {
        clean.extend(row_keys(&c.data().x));
    }
    let finals: Vec<&DenoiserModel> = s.clients.iter().map(|c| c.model()).collect();
    let prints = param_fingerprints(&[finals, initial.iter().collect()].concat());
    let sample_shape = s.clients[0].data().sample_shape().to_vec();

    let windows_hit = |bytes: &[u8]| bytes.windows(8).filter(|w| prints.contains(&<[u8; 8]>::try_from(*w).unwrap())).count();

    // positive control: an upload smuggling real weights must be caught
    let weights: Vec<f64> = s.clients[0].model().params().iter().flat_map(|p| p.tensor.data().to_vec()).collect();
    let numel: usize = sample_shape.iter().product();
    let mut shape = vec![1];
    shape.extend_from_slice(&sample_shape);
    let smuggled = Tensor::new(shape, weights[weights.len() - numel..].to_vec()).unwrap();
    let planted = Message::TrainBatchUpload(TrainBatchUpload {
        x_ts: WireTensor::from_compute(&smuggled, WirePrecision::F32),
        eps_s: WireTensor::from_compute(&smuggled, WirePrecision::F32),
        t_s: vec![cut as u32 + 1],
        labels: None,
        client_id: 0,
        round: 0,
    });
    let control = windows_hit(&encode(&planted).unwrap());

    let log = log.lock().unwrap();
    let (mut uploads, mut x0_hits, mut param_hits, mut low_t, mut bad_kind) = (0, 0, 0, 0, 0);
    let tensor_ok = |w: &WireTensor, x0_hits: &mut usize| {
        let t = w.to_compute();
        *x0_hits += row_keys(&t).iter().filter(|r| clean.contains(*r)).count();
        t.shape()[1..] == sample_shape[..]
    };
    for (dir, msg, bytes) in log.iter() {
        param_hits += windows_hit(bytes);
        let shapes_ok = match (dir, msg) {
            (Direction::Up, Message::TrainBatchUpload(u)) => {
                uploads += 1;
                low_t += u.t_s.iter().filter(|&&t| t as usize <= cut).count();
                tensor_ok(&u.x_ts, &mut x0_hits) & tensor_ok(&u.eps_s, &mut x0_hits)
            }
            (Direction::Up, Message::InferenceRequest(_)) => true,
            (Direction::Down, Message::InferenceResponse(r)) => tensor_ok(&r.x_tz, &mut x0_hits),
            _ => false,
        };
        bad_kind += usize::from(!shapes_ok);
    }
    let pass = same_run && control > 0 && uploads > 0 && x0_hits == 0 && param_hits == 0 && low_t == 0 && bad_kind == 0;
    outcome(
        pass,
        format!(
            "messages={} uploads={uploads} control_hits={control} x0_rows={x0_hits} param_windows={param_hits} t_s<=cut={low_t} \
             unexpected={bad_kind} matches_sweep_cell={same_run}",
            log.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 7 to 10: trends over the sprites sweep

fn trend_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(Preset::Quick);
    cfg.name = "trend".into();
    cfg.output_dir = out.to_path_buf();
    cfg.seeds = (0..5).collect();
    cfg
}

type Cells = BTreeMap<(usize, u64), CellRecord>;

/// Passes when `holds` is true for at least 4 of the seeds.
fn majority(seeds: &[u64], holds: impl Fn(u64) -> bool, extra: String) -> Outcome {
    let hits: Vec<u64> = seeds.iter().copied().filter(|&s| holds(s)).collect();
    outcome(hits.len() >= 4, format!("seeds_ok={}/{} {hits:?} {extra}", hits.len(), seeds.len()))
}

fn fmt_series(cells: &Cells, cut: usize, seeds: &[u64], f: impl Fn(&CellRecord) -> f64) -> String {
    let v: Vec<String> = seeds.iter().map(|&s| format!("{:.2}", f(&cells[&(cut, s)]))).collect();
    format!("{cut}:[{}]", v.join(","))
}

// ---------------------------------------------------------------------------
// 11: Frechet distance unit suite

fn frechet_suite() -> Outcome {
    let mut fails = Vec::new();
    let d = 5;
    let x = normal_vec(&mut seeded(1), 300 * d);
    let st = FeatureStats::from_rows(&x, d).unwrap();
    let self_fd = frechet_distance(&st, &st).unwrap();
    if self_fd.abs() > 1e-9 {
        fails.push(format!("FD(X,X)={self_fd:e}"));
    }
    let g = |m: f64, v: f64| FeatureStats::from_moments(vec![m], vec![v], 2).unwrap();
    let shift = frechet_distance(&g(0.0, 1.0), &g(1.0, 1.0)).unwrap();
    let scale = frechet_distance(&g(0.0, 1.0), &g(0.0, 4.0)).unwrap();
    if (shift - 1.0).abs() > 1e-9 || (scale - 1.0).abs() > 1e-9 {
        fails.push(format!("1-D cases {shift} {scale}"));
    }
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let n = 6;
        let b = normal_vec(&mut seeded(100 + seed), n * n);
        let a: Vec<f64> = (0..n * n)
            .map(|k| (0..n).map(|j| b[(k / n) * n + j] * b[(k % n) * n + j]).sum::<f64>() + if k / n == k % n { 0.1 } else { 0.0 })
            .collect();
        let eig = DMatrix::from_row_slice(n, n, &a).symmetric_eigen();
        let oracle = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()))
            * eig.eigenvectors.transpose();
        let ours = sqrtm_psd(&a, n, 1e-9).unwrap();
        for k in 0..n * n {
            worst = worst.max((ours[k] - oracle[(k / n, k % n)]).abs());
        }
    }
    if worst >= 1e-8 {
        fails.push(format!("sqrtm error {worst:e}"));
    }
    let detail = format!("fd_self={self_fd:.1e} shift={shift} scale={scale} sqrtm_err={worst:.1e}");
    outcome(fails.is_empty(), if fails.is_empty() { detail } else { format!("{detail} {}", fails.join("; ")) })
}

// ---------------------------------------------------------------------------
// 12: determinism of two sweep executions

fn determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::preset(Preset::Quick);
    cfg.name = "det".into();
    cfg.output_dir = root.path().to_path_buf();
    cfg.seeds = vec![0];
    cfg.rounds = 2;
    cfg.batches_per_round = 5;
    cfg.dataset.samples_per_client = 40;
    cfg.eval.inversion_samples = 40;
    let run = || {
        run_sweep(&cfg).unwrap();
        let dir = cfg.run_dir();
        let files = (std::fs::read(dir.join("results.csv")).unwrap(), std::fs::read(dir.join("run.json")).unwrap());
        std::fs::remove_dir_all(&dir).unwrap();
        files
    };
    let (a, b) = (run(), run());
    outcome(
        a == b,
        format!("cuts={} csv_bytes={} json_bytes={} identical={}", cfg.cuts.len(), a.0.len(), a.1.len(), a == b),
    )
}

fn main() {
    let mut report = Report { failed: 0 };
    report.run(1, "gradient correctness", secs(10), gradient_check);
    report.run(2, "forward marginals", secs(30), forward_marginals);
    report.run(3, "oracle distribution recovery", secs(60), oracle_chain);
    report.run(4, "remap formula", None, remap);
    report.run(5, "split/monolithic equivalence", secs(60), split_equivalence);

    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let mut cfg = trend_config(&root);
    let seeds = cfg.seeds.clone();

    // cuts 0.2T and 0.8T first, so the disclosure and probe trends can be timed alone
    let start = Instant::now();
    cfg.cuts = vec![20, 80];
    run_sweep(&cfg).unwrap();
    let first_time = start.elapsed();
    cfg.cuts = vec![10, 20, 80, 100];
    let doc = run_sweep(&cfg).unwrap();
    let total_time = start.elapsed();
    let cells: Cells = doc.cells.into_iter().map(|c| ((c.cut, c.seed), c)).collect();
    report.run(6, "privacy boundary audit", None, || privacy_audit(&cfg, &cfg.run_dir()));

    let holds = |s| cells[&(80, s)].fd_server > cells[&(20, s)].fd_server;
    let extra = format!(
        "fd_server {} {}",
        fmt_series(&cells, 20, &seeds, |c| c.fd_server),
        fmt_series(&cells, 80, &seeds, |c| c.fd_server)
    );
    report.record(7, "disclosure trend", first_time, secs(30 * 60), majority(&seeds, holds, extra));

    let holds = |s| {
        let icm = cells[&(100, s)].fd_client;
        cells[&(10, s)].fd_client < icm && cells[&(20, s)].fd_client < icm
    };
    let extra = format!(
        "fd_client {} {} {}",
        fmt_series(&cells, 10, &seeds, |c| c.fd_client),
        fmt_series(&cells, 20, &seeds, |c| c.fd_client),
        fmt_series(&cells, 100, &seeds, |c| c.fd_client)
    );
    report.record(8, "collaboration benefit", total_time, secs(45 * 60), majority(&seeds, holds, extra));

    let holds = |s| cells[&(20, s)].probe_f1_mean - cells[&(80, s)].probe_f1_mean >= 0.05;
    let extra = format!(
        "probe_f1 {} {}",
        fmt_series(&cells, 20, &seeds, |c| c.probe_f1_mean),
        fmt_series(&cells, 80, &seeds, |c| c.probe_f1_mean)
    );
    // probes run inside the first sweep phase
    report.record(9, "attribute-probe trend", first_time, secs(45 * 60), majority(&seeds, holds, extra));

    let holds = |s| {
        let grows = cells[&(80, s)].inversion_fd_cross > cells[&(20, s)].inversion_fd_cross;
        grows && cfg.cuts.iter().all(|&c| cells[&(c, s)].inversion_fd_self <= cells[&(c, s)].inversion_fd_cross)
    };
    let extra = format!(
        "cross {} {}",
        fmt_series(&cells, 20, &seeds, |c| c.inversion_fd_cross),
        fmt_series(&cells, 80, &seeds, |c| c.inversion_fd_cross)
    );
    report.record(10, "inversion trend", total_time, secs(45 * 60), majority(&seeds, holds, extra));

    report.run(11, "frechet distance suite", None, frechet_suite);
    report.run(12, "determinism", None, determinism);

    println!("acceptance: {} of 12 failed", report.failed);
    if report.failed > 0 {
        std::process::exit(1);
    }
}
