use collafuse::data::{gen_gauss2d, partition, Dataset, PartitionMode};
use collafuse::denoiser::{init_model, save_checkpoint, ArchSpec, DenoiserModel, ModelSpec};
use collafuse::diffusion::default_beta_range;
use collafuse::metrics::{batch_frechet, inversion_attack};
use collafuse::nodes::{
    deliver_intermediate, infer_collaborative, infer_collaborative_shared, infer_shared_intermediate,
    sample_monolithic, train_collaborative, ClientNode, NodeError, ServerNode, Session, SessionConfig,
};
use collafuse::protocol::{AuditHook, Direction, Message, SimConfig, TrainBatchUpload, WirePrecision, WireTensor};
use collafuse::rng::{derive_seed, seeded, tags};
use collafuse::{Schedule, Tensor};
use std::sync::{Arc, Mutex};

const MEANS: [[f64; 2]; 4] = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];

fn schedule(steps: usize) -> Schedule {
    let (a, b) = default_beta_range(steps);
    Schedule::linear(steps, a, b).unwrap()
}

fn spec(steps: usize, num_labels: usize) -> ModelSpec {
    ModelSpec {
        arch: ArchSpec::Mlp { hidden: vec![32, 32, 32] },
        in_shape: vec![2],
        num_labels,
        time_embed_dim: 16,
        steps,
        null_label: false,
    }
}

fn config(steps: usize, cut: usize) -> SessionConfig {
    SessionConfig { batch_size: 16, batches_per_round: 4, learning_rate: 2e-3, ..SessionConfig::new(steps, cut) }
}

fn client_data(k: usize, seed: u64) -> Vec<Dataset> {
    let ds = gen_gauss2d(80 * k, &MEANS, 0.05, seed).unwrap();
    let p = partition(&ds, k, PartitionMode::Iid, 0.0, seed).unwrap();
    p.clients.iter().map(|idx| ds.subset(idx)).collect()
}

/// Session with freshly initialized models, one per node.
fn build(cfg: &SessionConfig, data: Vec<Dataset>, seed: u64, hooks: &[AuditHook]) -> Session {
    let s = schedule(cfg.steps);
    let mspec = spec(cfg.steps, MEANS.len());
    let server = ServerNode::new(init_model(mspec.clone(), derive_seed(seed, 1)).unwrap(), s.clone(), cfg, seed).unwrap();
    let clients = data
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            let m = init_model(mspec.clone(), derive_seed(seed, 100 + i as u64)).unwrap();
            ClientNode::new(i as u32, m, d, s.clone(), cfg, seed).unwrap()
        })
        .collect();
    Session::connect_sim(cfg.clone(), server, clients, SimConfig::default(), hooks).unwrap()
}

fn session(steps: usize, cut: usize, k: usize, seed: u64) -> Session {
    build(&config(steps, cut), client_data(k, seed), seed, &[])
}

fn models(s: &Session) -> Vec<DenoiserModel> {
    std::iter::once(s.server.model().clone()).chain(s.clients.iter().map(|c| c.model().clone())).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn untrained_loss_is_unit_per_element() {
    let cfg = SessionConfig { batch_size: 2048, ..config(50, 25) };
    let ds = gen_gauss2d(2048, &MEANS, 0.05, 1).unwrap();
    let mut s = build(&cfg, vec![ds], 1, &[]);
    let (loss, upload) = s.clients[0].client_train_step(0).unwrap();
    // 4096 unit-variance targets: standard error sqrt(2 / 4096) ~ 0.022
    assert!((loss - 1.0).abs() < 0.1, "{loss}");
    assert!(upload.t_s.iter().all(|&t| t > 25 && t <= 50));
    let server_loss = s.server.server_train_step(&upload).unwrap();
    assert!((server_loss - 1.0).abs() < 0.1, "{server_loss}");
}

#[test]
fn client_and_server_losses_descend() {
    let cfg = SessionConfig { batches_per_round: 100, batch_size: 32, ..config(50, 25) };
    let mut s = build(&cfg, client_data(1, 2), 2, &[]);
    let rounds = train_collaborative(&mut s, 0, 20).unwrap();
    let client: Vec<f64> = rounds.iter().flat_map(|r| r.client_losses[0].clone()).collect();
    let server: Vec<f64> = rounds.iter().flat_map(|r| r.server_losses.clone()).collect();
    assert_eq!((client.len(), server.len()), (2000, 2000));
    assert!(client.iter().chain(&server).all(|l| l.is_finite()));
    assert!(mean(&client[1900..]) < mean(&client[..100]), "client {} -> {}", mean(&client[..100]), mean(&client[1900..]));
    assert!(mean(&server[1900..]) < mean(&server[..100]), "server {} -> {}", mean(&server[..100]), mean(&server[1900..]));
}

#[test]
fn near_full_cut_uploads_only_the_last_step() {
    let mut s = session(20, 19, 1, 3);
    for _ in 0..20 {
        let (_, upload) = s.clients[0].client_train_step(0).unwrap();
        assert!(upload.t_s.iter().all(|&t| t == 20));
    }
}

#[test]
fn degenerate_cuts_reject_split_steps() {
    for cut in [0, 20] {
        let mut s = session(20, cut, 1, 4);
        assert!(matches!(s.clients[0].client_train_step(0), Err(NodeError::DegenerateCut { .. })));
    }
}

fn upload_at(t: u32) -> TrainBatchUpload {
    let x = Tensor::full(vec![1, 2], 0.1);
    TrainBatchUpload {
        x_ts: WireTensor::from_compute(&x, WirePrecision::F32),
        eps_s: WireTensor::from_compute(&x, WirePrecision::F32),
        t_s: vec![t],
        labels: Some(vec![0]),
        client_id: 0,
        round: 0,
    }
}

#[test]
fn server_rejects_timesteps_at_or_below_cut() {
    let mut s = session(20, 8, 1, 5);
    assert_eq!(s.server.server_train_step(&upload_at(8)), Err(NodeError::TimestepLeak { t_s: 8, t_zeta: 8 }));
    assert!(matches!(s.server.server_train_step(&upload_at(3)), Err(NodeError::TimestepLeak { .. })));
    s.server.server_train_step(&upload_at(9)).unwrap();
}

#[test]
fn replayed_upload_on_identical_weights_gives_identical_loss() {
    let mut a = session(20, 8, 1, 6);
    let mut b = session(20, 8, 1, 6);
    let (_, upload) = a.clients[0].client_train_step(0).unwrap();
    let la = a.server.server_train_step(&upload).unwrap();
    let lb = b.server.server_train_step(&upload).unwrap();
    assert_eq!(la.to_bits(), lb.to_bits());
}

#[test]
fn zero_rounds_change_nothing() {
    let mut s = session(20, 10, 3, 7);
    let before = models(&s);
    assert!(train_collaborative(&mut s, 0, 0).unwrap().is_empty());
    assert_eq!(models(&s), before);
    assert_eq!(s.channel_stats().messages, 0);
}

#[test]
fn identical_clients_follow_identical_trajectories() {
    let cfg = config(20, 10);
    let data = client_data(1, 8).remove(0);
    let s = schedule(20);
    let mspec = spec(20, MEANS.len());
    // Client streams are keyed by (seed, id); pick seeds that cancel the id.
    let seed_a = 77u64;
    let k = 0x9E37_79B9_7F4A_7C15u64;
    let seed_b = seed_a ^ tags::client(0).wrapping_mul(k) ^ tags::client(1).wrapping_mul(k);
    let model = init_model(mspec.clone(), 5).unwrap();
    let clients = vec![
        ClientNode::new(0, model.clone(), data.clone(), s.clone(), &cfg, seed_a).unwrap(),
        ClientNode::new(1, model, data, s.clone(), &cfg, seed_b).unwrap(),
    ];
    let server = ServerNode::new(init_model(mspec, 6).unwrap(), s, &cfg, 0).unwrap();
    let mut sess = Session::connect_sim(cfg, server, clients, SimConfig::default(), &[]).unwrap();
    let rounds = train_collaborative(&mut sess, 0, 5).unwrap();
    for r in &rounds {
        assert_eq!(r.client_losses[0], r.client_losses[1]);
    }
    assert_eq!(sess.clients[0].model().params(), sess.clients[1].model().params());
}

fn checkpoints(seed: u64) -> Vec<Vec<u8>> {
    let mut s = session(20, 10, 3, seed);
    train_collaborative(&mut s, 0, 3).unwrap();
    models(&s).iter().map(|m| save_checkpoint(m, seed)).collect()
}

#[test]
fn runs_are_bit_reproducible() {
    assert_eq!(checkpoints(9), checkpoints(9));
    assert_ne!(checkpoints(9), checkpoints(10));
}

#[test]
fn parallel_clients_do_not_change_results() {
    let run = |parallel: bool| {
        let cfg = SessionConfig { parallel_clients: parallel, ..config(20, 10) };
        let mut s = build(&cfg, client_data(3, 11), 11, &[]);
        let r = train_collaborative(&mut s, 0, 3).unwrap();
        let losses: Vec<_> = r.into_iter().map(|r| (r.client_losses, r.server_losses)).collect();
        (losses, models(&s))
    };
    assert_eq!(run(false), run(true));
}

#[test]
fn global_model_path_runs_everything_on_the_server() {
    let mut s = session(20, 0, 2, 12);
    train_collaborative(&mut s, 0, 2).unwrap();
    assert_eq!(s.client_train_steps(), 0);
    assert_eq!(s.server.counters.train_steps, 2 * 2 * 4);
    let x = infer_collaborative(&mut s, 1, Some(vec![0, 1, 2]), 3, Some(4)).unwrap();
    assert_eq!(x.shape(), &[3, 2]);
    assert_eq!(s.server.counters.denoise_steps, 20);
    assert_eq!(s.clients[1].counters.denoise_steps, 0);
}

#[test]
fn independent_models_never_touch_the_channel() {
    let mut s = session(20, 20, 2, 13);
    train_collaborative(&mut s, 0, 2).unwrap();
    assert_eq!(s.client_train_steps(), 2 * 2 * 4);
    assert_eq!(s.server.counters.train_steps, 0);
    infer_collaborative(&mut s, 0, Some(vec![1, 1]), 2, Some(1)).unwrap();
    assert_eq!(s.channel_stats().messages, 0);
    assert_eq!(s.clients[0].counters.denoise_steps, 20);
}

#[test]
fn compute_split_counters_follow_the_cut() {
    for cut in [1, 5, 13, 19] {
        let mut s = session(20, cut, 2, 14);
        infer_collaborative(&mut s, 1, Some(vec![0, 3]), 2, Some(2)).unwrap();
        assert_eq!(s.clients[1].counters.denoise_steps, cut as u64);
        assert_eq!(s.server.counters.denoise_steps, (20 - cut) as u64);
        let stats = s.client_stats(1);
        assert_eq!(stats.messages, 2);
        assert!(stats.bytes_up > 0 && stats.bytes_down > 0);
    }
}

#[test]
fn shared_intermediate_is_reusable() {
    let cfg = config(20, 8);
    let s = schedule(20);
    let mspec = spec(20, MEANS.len());
    let data = client_data(2, 15);
    let model = init_model(mspec.clone(), 3).unwrap();
    let clients = data
        .into_iter()
        .enumerate()
        .map(|(i, d)| ClientNode::new(i as u32, model.clone(), d, s.clone(), &cfg, 0).unwrap())
        .collect();
    let server = ServerNode::new(init_model(mspec, 4).unwrap(), s, &cfg, 0).unwrap();
    let mut sess = Session::connect_sim(cfg, server, clients, SimConfig::default(), &[]).unwrap();
    let labels = vec![0, 1, 2, 3];
    let resp = infer_shared_intermediate(&mut sess, Some(labels.clone()), 4, 21).unwrap();
    assert_eq!(resp.t_zeta, 8);
    let mut outs = Vec::new();
    for c in 0..2 {
        let x = deliver_intermediate(&mut sess, c, &resp).unwrap();
        let mut rng = seeded(5);
        outs.push(sess.clients[c].finish_from_cut(x, Some(&labels), &mut rng).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
    assert_eq!(sess.server.counters.denoise_steps, 12);
}

#[test]
fn uploads_carry_no_clean_data_or_parameters() {
    let log: Arc<Mutex<Vec<(Direction, Message, Vec<u8>)>>> = Arc::default();
    let sink = log.clone();
    let hook: AuditHook = Arc::new(move |d, m, b| sink.lock().unwrap().push((d, m.clone(), b.to_vec())));
    let cut = 10;
    let mut s = build(&config(20, cut), client_data(2, 16), 16, &[hook]);
    train_collaborative(&mut s, 0, 3).unwrap();
    infer_collaborative(&mut s, 0, Some(vec![0, 1]), 2, Some(3)).unwrap();

    let log = log.lock().unwrap();
    assert_eq!(log.len(), 2 * 3 * 4 + 2);
    let fingerprints: Vec<Vec<u8>> = s
        .clients
        .iter()
        .flat_map(|c| c.model().params())
        .filter(|p| p.tensor.numel() >= 2)
        .flat_map(|p| {
            let d = &p.tensor.data()[..2];
            let f64s: Vec<u8> = d.iter().flat_map(|v| v.to_le_bytes()).collect();
            let f32s: Vec<u8> = d.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
            [f64s, f32s]
        })
        .collect();
    for (dir, msg, bytes) in log.iter() {
        for f in &fingerprints {
            assert!(!bytes.windows(f.len()).any(|w| w == f.as_slice()), "parameter bytes on the wire");
        }
        match (dir, msg) {
            (Direction::Up, Message::TrainBatchUpload(u)) => {
                assert!(u.t_s.iter().all(|&t| t as usize > cut));
                let x = u.x_ts.to_compute();
                let data = s.clients[u.client_id as usize].data();
                for i in 0..x.batch_len() {
                    for j in 0..data.len() {
                        let gap = x.sample(i).iter().zip(data.x.sample(j)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                        assert!(gap > 1e-6, "upload row equals a clean sample");
                    }
                }
            }
            (Direction::Up, Message::InferenceRequest(_)) | (Direction::Down, Message::InferenceResponse(_)) => {}
            (d, m) => panic!("unexpected {} travelling {d:?}", m.kind()),
        }
    }
}

#[test]
fn split_sampling_equals_monolithic_sampling() {
    let steps = 20;
    for cut in [steps / 4, steps / 2, 3 * steps / 4] {
        for clip in [None, Some(1.0)] {
            let cfg = SessionConfig { no_remap: true, wire: WirePrecision::F64, clip_x0: clip, ..config(steps, cut) };
            let s = schedule(steps);
            let model = init_model(spec(steps, MEANS.len()), 31).unwrap();
            let data = client_data(1, 17).remove(0);
            let client = ClientNode::new(0, model.clone(), data, s.clone(), &cfg, 0).unwrap();
            let server = ServerNode::new(model.clone(), s.clone(), &cfg, 0).unwrap();
            let mut sess = Session::connect_sim(cfg, server, vec![client], SimConfig::default(), &[]).unwrap();
            let labels = vec![0, 1, 2, 3, 0, 2];
            let split = infer_collaborative_shared(&mut sess, 0, Some(labels.clone()), 6, &mut seeded(40)).unwrap();
            let mono = sample_monolithic(&model, &s, Some(&labels), 6, clip, &mut seeded(40)).unwrap();
            assert_eq!(split, mono, "cut {cut}, clip {clip:?}");
        }
    }
}

#[test]
fn inversion_at_cut_zero_scores_plain_server_samples() {
    let mut s = session(20, 0, 2, 18);
    train_collaborative(&mut s, 0, 1).unwrap();
    let seed = 5;
    let r = inversion_attack(&mut s, 0, 1, 1000, seed).unwrap();
    let victim = s.clients[1].data().clone();
    let resp = infer_shared_intermediate(&mut s, Some(victim.joint_labels()), victim.len(), seed).unwrap();
    let expected = batch_frechet(&resp.x_tz.to_compute(), &victim.x).unwrap();
    assert_eq!(r.cross_fd, expected);
    assert_eq!(r.t_zeta, 0);
}

#[test]
fn mismatched_nodes_are_rejected() {
    let cfg = config(20, 10);
    let s = schedule(20);
    let mspec = spec(20, MEANS.len());
    let server = ServerNode::new(init_model(mspec.clone(), 1).unwrap(), s.clone(), &cfg, 0).unwrap();
    let other = config(20, 12);
    let c = ClientNode::new(0, init_model(mspec, 2).unwrap(), client_data(1, 1).remove(0), s, &other, 0).unwrap();
    assert!(matches!(
        Session::connect_sim(cfg, server, vec![c], SimConfig::default(), &[]),
        Err(NodeError::ConfigMismatch(_))
    ));
}
