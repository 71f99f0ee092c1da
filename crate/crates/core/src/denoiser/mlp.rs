use super::{param, Lookup, ModelSpec, Param, Result};
use crate::Graph;
use crate::Tensor;
use crate::{Real, Var};

const OUT_GAIN: Real = 0.01;

pub(super) fn init<R: rand::Rng>(spec: &ModelSpec, hidden: &[usize], rng: &mut R) -> Vec<Param> {
    let d: usize = spec.in_shape.iter().product();
    let (e, k) = (spec.time_embed_dim, spec.num_labels);
    let fan_in = (d + e + k) as Real;
    let h0 = hidden[0];
    let he = (2.0 / fan_in).sqrt();
    let mut ps = vec![
        param("mlp.in.x.weight", vec![d, h0], he, rng),
        param("mlp.in.time.weight", vec![e, h0], he, rng),
    ];
    if k > 0 {
        ps.push(param("mlp.in.label.weight", vec![k, h0], he, rng));
    }
    ps.push(param("mlp.in.bias", vec![h0], 0.0, rng));
    for l in 1..hidden.len() {
        let std = (2.0 / hidden[l - 1] as Real).sqrt();
        ps.push(param(&format!("mlp.hidden.{l}.weight"), vec![hidden[l - 1], hidden[l]], std, rng));
        ps.push(param(&format!("mlp.hidden.{l}.bias"), vec![hidden[l]], 0.0, rng));
    }
    let last = *hidden.last().unwrap();
    let std = OUT_GAIN * (1.0 / last as Real).sqrt();
    ps.push(param("mlp.out.weight", vec![last, d], std, rng));
    ps.push(param("mlp.out.bias", vec![d], 0.0, rng));
    ps
}

pub(super) fn forward(
    g: &mut Graph,
    p: &Lookup<'_>,
    layers: usize,
    x: Tensor,
    temb: Tensor,
    onehot: Option<Tensor>,
) -> Result<Var> {
    let xv = g.constant(x);
    let tv = g.constant(temb);
    let mut h = g.matmul(xv, p.get("mlp.in.x.weight"))?;
    let ht = g.matmul(tv, p.get("mlp.in.time.weight"))?;
    h = g.add(h, ht)?;
    if let Some(y) = onehot {
        let yv = g.constant(y);
        let hy = g.matmul(yv, p.get("mlp.in.label.weight"))?;
        h = g.add(h, hy)?;
    }
    h = g.add_row(h, p.get("mlp.in.bias"))?;
    h = g.silu(h);
    for l in 1..layers {
        h = g.matmul(h, p.get(&format!("mlp.hidden.{l}.weight")))?;
        h = g.add_row(h, p.get(&format!("mlp.hidden.{l}.bias")))?;
        h = g.silu(h);
    }
    let out = g.matmul(h, p.get("mlp.out.weight"))?;
    Ok(g.add_row(out, p.get("mlp.out.bias"))?)
}
