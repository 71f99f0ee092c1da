use super::{denoise_range, Counters, NodeError, Result, SessionConfig};
use crate::denoiser::DenoiserModel;
use crate::protocol::{
    InferenceRequest, InferenceResponse, Message, TrainBatchUpload, Transport, WireTensor,
};
use crate::rng::{derive_seed, node_rng, normal_tensor, seeded, tags, NodeRng};
use crate::{Adam, CutPoint, Real, Schedule, Tensor};
use rand::Rng;

/// Shared model for the noisy part of the chain, `t_zeta < t <= T`.
///
/// The server only ever sees tensors at noise levels above the cut.
pub struct ServerNode {
    model: DenoiserModel,
    schedule: Schedule,
    cut: CutPoint,
    opt: Adam,
    rng: NodeRng,
    config: SessionConfig,
    links: Vec<Box<dyn Transport + Send>>,
    pub counters: Counters,
}

/// What the server did with one received message.
#[derive(Debug, Clone, PartialEq)]
pub enum Served {
    Trained { client_id: u32, loss: Real },
    Answered { client_id: u32 },
}

impl ServerNode {
    pub fn new(model: DenoiserModel, schedule: Schedule, config: &SessionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cut = CutPoint::new(config.t_zeta, config.steps)?;
        if schedule.steps() != config.steps || model.spec().steps != config.steps {
            return Err(NodeError::ConfigMismatch(format!(
                "server schedule has {} steps, model {}, session {}",
                schedule.steps(),
                model.spec().steps,
                config.steps
            )));
        }
        Ok(Self {
            model,
            schedule,
            cut,
            opt: Adam::new(config.learning_rate),
            rng: node_rng(seed, tags::SERVER),
            config: config.clone(),
            links: Vec::new(),
            counters: Counters::default(),
        })
    }

    pub fn model(&self) -> &DenoiserModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut DenoiserModel {
        &mut self.model
    }

    pub fn cut(&self) -> CutPoint {
        self.cut
    }

    pub fn optimizer(&self) -> &Adam {
        &self.opt
    }

    pub(crate) fn attach(&mut self, link: Box<dyn Transport + Send>) {
        self.links.push(link);
    }

    pub fn num_links(&self) -> usize {
        self.links.len()
    }

    /// One optimizer step on the uploaded batch. The target is the uploaded
    /// `eps_s` as is.
    pub fn server_train_step(&mut self, upload: &TrainBatchUpload) -> Result<Real> {
        let t_zeta = self.cut.t_zeta();
        if let Some(&t) = upload.t_s.iter().find(|&&t| t as usize <= t_zeta) {
            return Err(NodeError::TimestepLeak { t_s: t as usize, t_zeta });
        }
        if let Some(&t) = upload.t_s.iter().find(|&&t| t as usize > self.cut.steps()) {
            return Err(NodeError::ConfigMismatch(format!("timestep {t} beyond T")));
        }
        let ts: Vec<usize> = upload.t_s.iter().map(|&t| t as usize).collect();
        let x = upload.x_ts.to_compute();
        let target = upload.eps_s.to_compute();
        let weights = self.config.guidance.weights(&ts);
        let labels = self.labels(upload.labels.as_deref())?;
        let loss = self.model.train_step(&mut self.opt, &x, &ts, labels, &target, &weights)?;
        self.counters.train_steps += 1;
        Ok(loss)
    }

    fn labels<'a>(&self, labels: Option<&'a [u32]>) -> Result<Option<&'a [u32]>> {
        match (self.model.num_labels(), labels) {
            (0, _) => Ok(None),
            (_, l) => Ok(l),
        }
    }

    /// Denoises fresh noise from `T` down to the cut, drawing from `rng`.
    pub fn sample_to_cut<R: Rng + ?Sized>(
        &mut self,
        labels: Option<&[u32]>,
        count: usize,
        rng: &mut R,
    ) -> Result<Tensor> {
        if count == 0 {
            return Err(NodeError::EmptyBatch);
        }
        let labels = self.labels(labels)?;
        let mut shape = vec![count];
        shape.extend_from_slice(self.model.in_shape());
        let x = normal_tensor(rng, &shape);
        let (hi, lo) = (self.cut.steps(), self.cut.t_zeta() + 1);
        let out = denoise_range(&self.model, &self.schedule, x, labels, hi, lo, Ok, self.config.clip_x0, rng)?;
        self.counters.denoise_steps += (hi + 1 - lo) as u64;
        self.counters.samples_generated += count as u64;
        Ok(out)
    }

    /// Answers a request. With `lent` the caller's stream supplies all
    /// randomness; otherwise it comes from the request seed, or from the
    /// server's own stream when the request has none.
    pub fn respond(
        &mut self,
        req: &InferenceRequest,
        lent: Option<&mut NodeRng>,
    ) -> Result<InferenceResponse> {
        if self.cut.is_independent() {
            return Err(NodeError::ConfigMismatch("no server half at t_zeta = T".into()));
        }
        let count = req.count as usize;
        let (x, seed_used) = match lent {
            Some(rng) => (self.sample_to_cut(req.labels.as_deref(), count, rng)?, 0),
            None => {
                let seed = match req.seed {
                    Some(s) => s,
                    None => self.rng.random(),
                };
                let mut rng = seeded(derive_seed(seed, tags::SERVER));
                (self.sample_to_cut(req.labels.as_deref(), count, &mut rng)?, seed)
            }
        };
        Ok(InferenceResponse {
            x_tz: WireTensor::from_compute(&x, self.config.wire),
            t_zeta: self.cut.t_zeta() as u32,
            seed_used,
        })
    }

    /// Receives and handles one message from client `client`.
    pub fn serve_one(&mut self, client: usize, lent: Option<&mut NodeRng>) -> Result<Served> {
        let link = self
            .links
            .get_mut(client)
            .ok_or_else(|| NodeError::ConfigMismatch(format!("no link to client {client}")))?;
        match link.recv()? {
            Message::TrainBatchUpload(u) => {
                if u.client_id as usize != client {
                    return Err(NodeError::ConfigMismatch(format!(
                        "upload from client {} on link {client}",
                        u.client_id
                    )));
                }
                let loss = self.server_train_step(&u)?;
                Ok(Served::Trained { client_id: u.client_id, loss })
            }
            Message::InferenceRequest(r) => {
                let resp = self.respond(&r, lent)?;
                self.links[client].send(&Message::InferenceResponse(resp))?;
                Ok(Served::Answered { client_id: r.client_id })
            }
            m @ Message::InferenceResponse(_) => Err(NodeError::UnexpectedMessage(m.kind())),
        }
    }

    /// Sends an already computed response, e.g. a shared intermediate.
    pub fn push_response(&mut self, client: usize, resp: &InferenceResponse) -> Result<()> {
        let link = self
            .links
            .get_mut(client)
            .ok_or_else(|| NodeError::ConfigMismatch(format!("no link to client {client}")))?;
        link.send(&Message::InferenceResponse(resp.clone()))?;
        Ok(())
    }

    pub fn restore_optimizer(&mut self, opt: Adam) {
        self.opt = opt;
    }
}
