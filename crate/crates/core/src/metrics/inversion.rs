//! Cross-client inversion: a client finishes server intermediates requested
//! for another client's labels and is scored against that client's data.

use super::{batch_frechet, MetricsError, Result};
use crate::nodes::{infer_collaborative, Session};
use crate::rng::seeded;
use crate::{Real, Tensor};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionResult {
    pub attacker: usize,
    pub victim: usize,
    pub t_zeta: usize,
    /// FD of reconstructions for the victim's labels to the victim's data.
    pub cross_fd: Real,
    /// FD of the attacker's samples for its own labels to its own data.
    pub self_fd: Real,
}

/// Runs the attack for one (attacker, victim) pair. At most `max_samples`
/// samples are drawn per side; `seed` fixes the selection and generation.
pub fn inversion_attack(
    session: &mut Session,
    attacker: usize,
    victim: usize,
    max_samples: usize,
    seed: u64,
) -> Result<InversionResult> {
    let k = session.clients.len();
    if attacker == victim || attacker >= k || victim >= k {
        return Err(MetricsError::ConfigMismatch(format!(
            "attacker {attacker}, victim {victim} among {k} clients"
        )));
    }
    let (victim_x, victim_labels) = pick(session, victim, max_samples, seed);
    let (own_x, own_labels) = pick(session, attacker, max_samples, seed);
    let mut generate = |labels: Vec<u32>| {
        let n = labels.len();
        let labels = (session.clients[attacker].model().num_labels() > 0).then_some(labels);
        infer_collaborative(session, attacker, labels, n, Some(seed))
            .map_err(|e| MetricsError::ConfigMismatch(e.to_string()))
    };
    let recon = generate(victim_labels)?;
    let own = generate(own_labels)?;
    Ok(InversionResult {
        attacker,
        victim,
        t_zeta: session.config.t_zeta,
        cross_fd: batch_frechet(&recon, &victim_x)?,
        self_fd: batch_frechet(&own, &own_x)?,
    })
}

/// Up to `max` samples of a client's data with their joint labels, in index order.
fn pick(session: &Session, client: usize, max: usize, seed: u64) -> (Tensor, Vec<u32>) {
    let data = session.clients[client].data();
    let n = data.len();
    let mut idx: Vec<usize> = if n <= max {
        (0..n).collect()
    } else {
        sample(&mut seeded(seed ^ client as u64), n, max).into_vec()
    };
    idx.sort_unstable();
    (data.x.select(&idx), idx.iter().map(|&i| data.joint_label(i)).collect())
}
