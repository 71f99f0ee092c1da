use super::{denoise_range, Counters, NodeError, Result, SessionConfig};
use crate::data::Dataset;
use crate::denoiser::DenoiserModel;
use crate::diffusion::{compute_remap, forward_diffuse_batch, renoise_batch, RemapTable};
use crate::protocol::{InferenceRequest, Message, TrainBatchUpload, Transport, WireTensor};
use crate::rng::{derive_seed, node_rng, normal_tensor, seeded, tags, uniform_int, NodeRng};
use crate::{Adam, CutPoint, Real, Schedule, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

/// Private model for the low-noise part of the chain, `1 <= t <= t_zeta`,
/// plus the client's own data. Neither ever leaves the node.
pub struct ClientNode {
    id: u32,
    model: DenoiserModel,
    data: Dataset,
    labels: Vec<u32>,
    schedule: Schedule,
    cut: CutPoint,
    remap: RemapTable,
    opt: Adam,
    rng: NodeRng,
    config: SessionConfig,
    order: Vec<usize>,
    cursor: usize,
    link: Option<Box<dyn Transport + Send>>,
    pub counters: Counters,
}

/// Result of one client training step.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientStep {
    /// Local loss; absent at `t_zeta = 0`.
    pub loss: Option<Real>,
    /// Absent at `t_zeta = T`.
    pub upload: Option<TrainBatchUpload>,
}

impl ClientNode {
    pub fn new(
        id: u32,
        model: DenoiserModel,
        data: Dataset,
        schedule: Schedule,
        config: &SessionConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(NodeError::EmptyBatch);
        }
        let cut = CutPoint::new(config.t_zeta, config.steps)?;
        if schedule.steps() != config.steps || model.spec().steps != config.steps {
            return Err(NodeError::ConfigMismatch(format!(
                "client {id} schedule has {} steps, model {}, session {}",
                schedule.steps(),
                model.spec().steps,
                config.steps
            )));
        }
        if data.sample_shape() != model.in_shape() {
            return Err(NodeError::ConfigMismatch(format!(
                "client {id} data shape {:?} vs model {:?}",
                data.sample_shape(),
                model.in_shape()
            )));
        }
        let remap = if config.no_remap {
            RemapTable::identity(config.steps, config.t_zeta)?
        } else {
            compute_remap(config.steps, config.t_zeta)?
        };
        let labels = data.joint_labels();
        Ok(Self {
            id,
            model,
            data,
            labels,
            schedule,
            cut,
            remap,
            opt: Adam::new(config.learning_rate),
            rng: node_rng(seed, tags::client(id)),
            config: config.clone(),
            order: Vec::new(),
            cursor: 0,
            link: None,
            counters: Counters::default(),
        })
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn model(&self) -> &DenoiserModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut DenoiserModel {
        &mut self.model
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn cut(&self) -> CutPoint {
        self.cut
    }

    pub fn remap(&self) -> &RemapTable {
        &self.remap
    }

    pub fn optimizer(&self) -> &Adam {
        &self.opt
    }

    pub fn restore_optimizer(&mut self, opt: Adam) {
        self.opt = opt;
    }

    pub(crate) fn attach(&mut self, link: Box<dyn Transport + Send>) {
        self.link = Some(link);
    }

    fn link(&mut self) -> Result<&mut Box<dyn Transport + Send>> {
        self.link.as_mut().ok_or_else(|| NodeError::ConfigMismatch("client not connected".into()))
    }

    fn conditioned<'a>(&self, labels: Option<&'a [u32]>) -> Option<&'a [u32]> {
        if self.model.num_labels() == 0 {
            None
        } else {
            labels
        }
    }

    /// Next batch from an epoch-wise shuffled pass over the local data.
    fn next_batch(&mut self) -> Vec<usize> {
        let b = self.config.batch_size;
        let mut idx = Vec::with_capacity(b);
        while idx.len() < b {
            if self.cursor == self.order.len() {
                self.order = (0..self.data.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            idx.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        idx
    }

    /// One split training step on a fresh local batch: updates the client
    /// model on `t^c` and builds the server upload for `t^s`.
    pub fn client_train_step(&mut self, round: u32) -> Result<(Real, TrainBatchUpload)> {
        let (t_zeta, steps) = (self.cut.t_zeta(), self.cut.steps());
        if t_zeta == 0 || t_zeta == steps {
            return Err(NodeError::DegenerateCut { t_zeta, steps });
        }
        let s = self.step(round)?;
        Ok((s.loss.expect("local half"), s.upload.expect("server half")))
    }

    /// Training step for any cut: at `t_zeta = 0` only the upload is built,
    /// at `t_zeta = T` only the local model is trained.
    pub fn step(&mut self, round: u32) -> Result<ClientStep> {
        let (t_zeta, steps) = (self.cut.t_zeta(), self.cut.steps());
        let idx = self.next_batch();
        let b = idx.len();
        let x0 = self.data.x.select(&idx);
        let y: Vec<u32> = idx.iter().map(|&i| self.labels[i]).collect();
        let local = t_zeta >= 1;
        let upload = t_zeta < steps;

        let t_c: Vec<usize> = if local {
            (0..b).map(|_| uniform_int(&mut self.rng, 1, t_zeta)).collect()
        } else {
            Vec::new()
        };
        let t_s: Vec<usize> = if upload {
            (0..b).map(|_| uniform_int(&mut self.rng, t_zeta + 1, steps)).collect()
        } else {
            Vec::new()
        };
        let eps_c = local.then(|| normal_tensor(&mut self.rng, x0.shape()));
        let eps_s = upload.then(|| normal_tensor(&mut self.rng, x0.shape()));

        let mut loss = None;
        if let Some(eps_c) = &eps_c {
            let x_tc = forward_diffuse_batch(&x0, &t_c, eps_c, &self.schedule)?;
            let w = self.config.guidance.weights(&t_c);
            let labels = self.conditioned(Some(&y));
            loss = Some(self.model.train_step(&mut self.opt, &x_tc, &t_c, labels, eps_c, &w)?);
            self.counters.train_steps += 1;
        }
        let mut msg = None;
        if let Some(eps_s) = eps_s {
            let x_tz = match &eps_c {
                Some(e) => forward_diffuse_batch(&x0, &vec![t_zeta; b], e, &self.schedule)?,
                None => x0,
            };
            let x_ts = renoise_batch(self.config.renoise, &x_tz, t_zeta, &t_s, &eps_s, &self.schedule)?;
            let wire = self.config.wire;
            msg = Some(TrainBatchUpload {
                x_ts: WireTensor::from_compute(&x_ts, wire),
                eps_s: WireTensor::from_compute(&eps_s, wire),
                t_s: t_s.iter().map(|&t| t as u32).collect(),
                labels: self.conditioned(Some(&y)).map(<[u32]>::to_vec),
                client_id: self.id,
                round,
            });
        }
        Ok(ClientStep { loss, upload: msg })
    }

    /// Sends an upload to the server.
    pub fn send_upload(&mut self, upload: TrainBatchUpload) -> Result<()> {
        self.link()?.send(&Message::TrainBatchUpload(upload))?;
        Ok(())
    }

    pub fn send_request(&mut self, labels: Option<Vec<u32>>, count: usize, seed: Option<u64>) -> Result<()> {
        let req = InferenceRequest {
            labels: self.conditioned(labels.as_deref()).map(<[u32]>::to_vec),
            count: count as u32,
            seed,
            client_id: self.id,
        };
        self.link()?.send(&Message::InferenceRequest(req))?;
        Ok(())
    }

    /// Waits for a server response and checks it belongs to this session.
    pub fn recv_intermediate(&mut self) -> Result<(Tensor, u64)> {
        let t_zeta = self.cut.t_zeta();
        match self.link()?.recv()? {
            Message::InferenceResponse(r) => {
                if r.t_zeta as usize != t_zeta {
                    return Err(NodeError::ConfigMismatch(format!(
                        "response at t_zeta {} for session cut {t_zeta}",
                        r.t_zeta
                    )));
                }
                Ok((r.x_tz.to_compute(), r.seed_used))
            }
            m => Err(NodeError::UnexpectedMessage(m.kind())),
        }
    }

    /// Finishes the chain from the cut down to clean samples, using the
    /// remapped timesteps.
    pub fn finish_from_cut<R: Rng + ?Sized>(
        &mut self,
        x_tz: Tensor,
        labels: Option<&[u32]>,
        rng: &mut R,
    ) -> Result<Tensor> {
        let t_zeta = self.cut.t_zeta();
        if x_tz.sample_shape() != self.model.in_shape() {
            return Err(NodeError::ConfigMismatch(format!(
                "intermediate shape {:?} vs model {:?}",
                x_tz.shape(),
                self.model.in_shape()
            )));
        }
        let count = x_tz.batch_len();
        if t_zeta == 0 {
            self.counters.samples_generated += count as u64;
            return Ok(x_tz);
        }
        let labels = self.conditioned(labels);
        let remap = &self.remap;
        let out = denoise_range(
            &self.model,
            &self.schedule,
            x_tz,
            labels,
            t_zeta,
            1,
            |t| Ok(remap.client_timestep(t)?),
            self.config.clip_x0,
            rng,
        )?;
        self.counters.denoise_steps += t_zeta as u64;
        self.counters.samples_generated += count as u64;
        Ok(out)
    }

    /// Whole chain on the client, starting from its own noise draw.
    pub fn sample_alone<R: Rng + ?Sized>(
        &mut self,
        labels: Option<&[u32]>,
        count: usize,
        rng: &mut R,
    ) -> Result<Tensor> {
        if !self.cut.is_independent() {
            return Err(NodeError::ConfigMismatch("client-only sampling needs t_zeta = T".into()));
        }
        let mut shape = vec![count];
        shape.extend_from_slice(self.model.in_shape());
        let x = normal_tensor(rng, &shape);
        self.finish_from_cut(x, labels, rng)
    }

    /// Stream for client-side inference noise under request seed `seed`.
    pub fn inference_rng(&mut self, seed: Option<u64>) -> NodeRng {
        let s = seed.unwrap_or_else(|| self.rng.random());
        seeded(derive_seed(s, tags::client(self.id)))
    }
}
