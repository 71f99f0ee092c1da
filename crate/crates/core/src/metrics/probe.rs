//! Linear attribute-inference probe.

use super::{feature_embed, MetricsError, Result};
use crate::rng::seeded;
use crate::{Real, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// Training fraction; the rest is held out.
    pub split: Real,
    pub epochs: usize,
    pub learning_rate: Real,
    pub l2: Real,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { split: 0.7, epochs: 200, learning_rate: 0.05, l2: 1e-3, seed: 0 }
    }
}

/// Held-out macro-F1 per attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub f1: Vec<Real>,
    pub t_zeta: Option<usize>,
    /// F1 of the same probe on cut-0 intermediates.
    pub baseline: Option<Vec<Real>>,
}

impl ProbeResult {
    pub fn mean_f1(&self) -> Real {
        self.f1.iter().sum::<Real>() / self.f1.len().max(1) as Real
    }

    /// Per-attribute `f1 - baseline`.
    pub fn delta(&self) -> Option<Vec<Real>> {
        self.baseline.as_ref().map(|b| self.f1.iter().zip(b).map(|(f, b)| f - b).collect())
    }
}

/// Trains one softmax-regression probe per attribute on standardized
/// embeddings of `x` and scores it on a seeded held-out split.
pub fn attribute_probe(
    x: &Tensor,
    attrs: &[Vec<u32>],
    cardinality: &[u32],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let n = x.batch_len();
    if attrs.len() != n {
        return Err(MetricsError::DimMismatch(n, attrs.len()));
    }
    if !(cfg.split > 0.0 && cfg.split < 1.0) {
        return Err(MetricsError::ConfigMismatch(format!("split {}", cfg.split)));
    }
    let emb = feature_embed(x)?;
    let d = emb.shape()[1];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(cfg.seed));
    let n_train = ((n as Real) * cfg.split).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(MetricsError::TooFewSamples { need: 2, got: n });
    }
    let (train, test) = order.split_at(n_train);

    let (mean, sd) = column_moments(emb.data(), d, train);
    let z: Vec<Real> = emb
        .data()
        .chunks_exact(d)
        .flat_map(|r| r.iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s))
        .collect();

    let mut f1 = Vec::with_capacity(cardinality.len());
    for (j, &k) in cardinality.iter().enumerate() {
        let y: Vec<usize> = attrs.iter().map(|a| a[j] as usize).collect();
        let mut present = vec![false; k as usize];
        y.iter().for_each(|&c| present[c] = true);
        if present.iter().filter(|&&p| p).count() < 2 {
            return Err(MetricsError::DegenerateLabels(format!("attribute {j} has one value")));
        }
        let model = fit_softmax(&z, d, k as usize, &y, train, cfg);
        let pred: Vec<usize> = test.iter().map(|&i| model.predict(&z[i * d..(i + 1) * d])).collect();
        let truth: Vec<usize> = test.iter().map(|&i| y[i]).collect();
        f1.push(macro_f1(&pred, &truth, k as usize));
    }
    Ok(ProbeResult { f1, t_zeta: None, baseline: None })
}

fn column_moments(rows: &[Real], d: usize, idx: &[usize]) -> (Vec<Real>, Vec<Real>) {
    let n = idx.len() as Real;
    let mut mean = vec![0.0; d];
    for &i in idx {
        mean.iter_mut().zip(&rows[i * d..(i + 1) * d]).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; d];
    for &i in idx {
        var.iter_mut()
            .zip(rows[i * d..(i + 1) * d].iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n);
    }
    let sd = var.into_iter().map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    (mean, sd)
}

struct Softmax {
    w: Vec<Real>,
    b: Vec<Real>,
    k: usize,
}

impl Softmax {
    fn logits(&self, x: &[Real]) -> Vec<Real> {
        let mut out = self.b.clone();
        for (f, &v) in x.iter().enumerate() {
            let row = &self.w[f * self.k..(f + 1) * self.k];
            out.iter_mut().zip(row).for_each(|(o, w)| *o += v * w);
        }
        out
    }

    fn predict(&self, x: &[Real]) -> usize {
        let l = self.logits(x);
        (0..self.k).max_by(|&a, &b| l[a].total_cmp(&l[b]).then(b.cmp(&a))).unwrap()
    }
}

/// Full-batch Adam on mean cross-entropy plus `l2 |W|^2`.
fn fit_softmax(z: &[Real], d: usize, k: usize, y: &[usize], idx: &[usize], cfg: &ProbeConfig) -> Softmax {
    let mut m = Softmax { w: vec![0.0; d * k], b: vec![0.0; k], k };
    let np = d * k + k;
    let (mut m1, mut m2) = (vec![0.0; np], vec![0.0; np]);
    let (b1, b2, eps): (Real, Real, Real) = (0.9, 0.999, 1e-8);
    let inv_n = 1.0 / idx.len() as Real;
    let mut g = vec![0.0; np];
    for step in 1..=cfg.epochs {
        g.iter_mut().for_each(|v| *v = 0.0);
        for &i in idx {
            let x = &z[i * d..(i + 1) * d];
            let mut p = m.logits(x);
            let top = p.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            p.iter_mut().for_each(|v| *v = (*v - top).exp());
            let s: Real = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= s);
            p[y[i]] -= 1.0;
            for (f, &v) in x.iter().enumerate() {
                let gr = &mut g[f * k..(f + 1) * k];
                gr.iter_mut().zip(&p).for_each(|(g, r)| *g += v * r * inv_n);
            }
            g[d * k..].iter_mut().zip(&p).for_each(|(g, r)| *g += r * inv_n);
        }
        for (gw, w) in g[..d * k].iter_mut().zip(&m.w) {
            *gw += 2.0 * cfg.l2 * w;
        }
        let (c1, c2) = (1.0 - b1.powi(step as i32), 1.0 - b2.powi(step as i32));
        for q in 0..np {
            m1[q] = b1 * m1[q] + (1.0 - b1) * g[q];
            m2[q] = b2 * m2[q] + (1.0 - b2) * g[q] * g[q];
            let upd = cfg.learning_rate * (m1[q] / c1) / ((m2[q] / c2).sqrt() + eps);
            if q < d * k {
                m.w[q] -= upd;
            } else {
                m.b[q - d * k] -= upd;
            }
        }
    }
    m
}

/// Unweighted mean of per-class F1 over classes occurring in `truth` or `pred`.
pub fn macro_f1(pred: &[usize], truth: &[usize], k: usize) -> Real {
    let (mut tp, mut fp, mut fneg) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let scores: Vec<Real> = (0..k)
        .filter(|&c| tp[c] + fp[c] + fneg[c] > 0)
        .map(|c| 2.0 * tp[c] as Real / (2 * tp[c] + fp[c] + fneg[c]) as Real)
        .collect();
    if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<Real>() / scores.len() as Real
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_hand_counts() {
        assert_eq!(macro_f1(&[0, 1, 1, 0], &[0, 1, 1, 0], 2), 1.0);
        // class 0: tp 1 fp 0 fn 1 -> 2/3; class 1: tp 2 fp 1 fn 0 -> 4/5
        let f = macro_f1(&[0, 1, 1, 1], &[0, 0, 1, 1], 2);
        assert!((f - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_attribute() {
        let x = Tensor::new(vec![4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let attrs = vec![vec![0]; 4];
        let r = attribute_probe(&x, &attrs, &[2], &ProbeConfig::default());
        assert!(matches!(r, Err(MetricsError::DegenerateLabels(_))));
    }
}
