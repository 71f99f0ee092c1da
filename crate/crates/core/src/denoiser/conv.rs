//! Two-level conv net: in -> pool -> down -> pool -> mid -> up -> up -> out,
//! with additive skips at both resolutions and the conditioning embedding
//! projected onto each block's channels.

use super::{param, Lookup, ModelSpec, Param, Result};
use crate::Graph;
use crate::Tensor;
use crate::{Real, Var};

const OUT_GAIN: Real = 0.01;

fn conv_param<R: rand::Rng>(
    ps: &mut Vec<Param>,
    name: &str,
    c_out: usize,
    c_in: usize,
    gain: Real,
    rng: &mut R,
) {
    let std = gain * (2.0 / (c_in * 9) as Real).sqrt();
    ps.push(param(&format!("{name}.weight"), vec![c_out, c_in, 3, 3], std, rng));
    ps.push(param(&format!("{name}.bias"), vec![c_out], 0.0, rng));
}

/// Channel count of each conditioned block.
fn block_channels(widths: [usize; 2]) -> [(&'static str, usize); 4] {
    [("in", widths[0]), ("down", widths[1]), ("mid", widths[1]), ("up2", widths[0])]
}

pub(super) fn init<R: rand::Rng>(spec: &ModelSpec, widths: [usize; 2], rng: &mut R) -> Vec<Param> {
    let c = spec.in_shape[0];
    let (e, k) = (spec.time_embed_dim, spec.num_labels);
    let [w0, w1] = widths;
    let mut ps = Vec::new();
    conv_param(&mut ps, "conv.in", w0, c, 1.0, rng);
    conv_param(&mut ps, "conv.down", w1, w0, 1.0, rng);
    conv_param(&mut ps, "conv.mid", w1, w1, 1.0, rng);
    conv_param(&mut ps, "conv.up2", w0, w1, 1.0, rng);
    conv_param(&mut ps, "conv.up1", w0, w0, 1.0, rng);
    conv_param(&mut ps, "conv.out", c, w0, OUT_GAIN, rng);
    let std = (1.0 / (e + k) as Real).sqrt();
    for (block, ch) in block_channels(widths) {
        ps.push(param(&format!("emb.{block}.time.weight"), vec![e, ch], std, rng));
        if k > 0 {
            ps.push(param(&format!("emb.{block}.label.weight"), vec![k, ch], std, rng));
        }
        ps.push(param(&format!("emb.{block}.bias"), vec![ch], 0.0, rng));
    }
    ps
}

fn embed(g: &mut Graph, p: &Lookup<'_>, block: &str, tv: Var, yv: Option<Var>) -> Result<Var> {
    let mut e = g.matmul(tv, p.get(&format!("emb.{block}.time.weight")))?;
    if let Some(yv) = yv {
        let name = format!("emb.{block}.label.weight");
        if p.has(&name) {
            let ey = g.matmul(yv, p.get(&name))?;
            e = g.add(e, ey)?;
        }
    }
    Ok(g.add_row(e, p.get(&format!("emb.{block}.bias")))?)
}

fn conv(g: &mut Graph, p: &Lookup<'_>, name: &str, x: Var) -> Result<Var> {
    Ok(g.conv2d(x, p.get(&format!("{name}.weight")), p.get(&format!("{name}.bias")))?)
}

/// conv -> + embedding -> SiLU
fn block(g: &mut Graph, p: &Lookup<'_>, name: &str, x: Var, emb: Var) -> Result<Var> {
    let h = conv(g, p, &format!("conv.{name}"), x)?;
    let h = g.add_channel(h, emb)?;
    Ok(g.silu(h))
}

pub(super) fn forward(
    g: &mut Graph,
    p: &Lookup<'_>,
    x: Tensor,
    temb: Tensor,
    onehot: Option<Tensor>,
) -> Result<Var> {
    let xv = g.constant(x);
    let tv = g.constant(temb);
    let yv = onehot.map(|y| g.constant(y));
    let e_in = embed(g, p, "in", tv, yv)?;
    let e_down = embed(g, p, "down", tv, yv)?;
    let e_mid = embed(g, p, "mid", tv, yv)?;
    let e_up2 = embed(g, p, "up2", tv, yv)?;

    let h1 = block(g, p, "in", xv, e_in)?;
    let d1 = g.avg_pool2(h1)?;
    let h2 = block(g, p, "down", d1, e_down)?;
    let d2 = g.avg_pool2(h2)?;
    let h3 = block(g, p, "mid", d2, e_mid)?;
    let u2 = g.upsample2(h3)?;
    let u2 = g.add(u2, h2)?;
    let h4 = block(g, p, "up2", u2, e_up2)?;
    let u1 = g.upsample2(h4)?;
    let u1 = g.add(u1, h1)?;
    let h5 = conv(g, p, "conv.up1", u1)?;
    let h5 = g.silu(h5);
    conv(g, p, "conv.out", h5)
}
