//! Synthetic attributed datasets and client partitioning.

mod container;
mod sprites;

pub use container::{dump_dataset, load_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use sprites::{render_sprite, Shape, PALETTE};

use crate::rng::{normal_vec, node_rng, tags};
use crate::{Real, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("bad parameters: {0}")]
    BadParams(String),
    #[error("too few samples: {0}")]
    TooFewSamples(String),
    #[error("dataset container: {0}")]
    Container(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Gauss2d,
    Sprites,
}

/// Samples with integer-coded attributes. `cardinality[j]` bounds attribute `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub x: Tensor,
    pub attrs: Vec<Vec<u32>>,
    pub cardinality: Vec<u32>,
}

impl Dataset {
    pub fn new(kind: DatasetKind, x: Tensor, attrs: Vec<Vec<u32>>, cardinality: Vec<u32>) -> Result<Self> {
        if x.batch_len() != attrs.len() {
            return Err(DataError::BadParams(format!(
                "{} samples but {} attribute rows",
                x.batch_len(),
                attrs.len()
            )));
        }
        for a in &attrs {
            if a.len() != cardinality.len() || a.iter().zip(&cardinality).any(|(v, c)| v >= c) {
                return Err(DataError::BadParams(format!("attribute row {a:?} out of range")));
            }
        }
        if kind == DatasetKind::Sprites && x.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(DataError::BadParams("pixel outside [-1, 1]".into()));
        }
        Ok(Self { kind, x, attrs, cardinality })
    }

    pub fn len(&self) -> usize {
        self.attrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attrs.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.x.sample_shape()
    }

    /// Number of distinct joint attribute combinations.
    pub fn num_joint_labels(&self) -> usize {
        self.cardinality.iter().map(|&c| c as usize).product()
    }

    /// Mixed-radix code of a sample's attributes, first attribute most significant.
    pub fn joint_label(&self, i: usize) -> u32 {
        joint_code(&self.attrs[i], &self.cardinality)
    }

    pub fn joint_labels(&self) -> Vec<u32> {
        (0..self.len()).map(|i| self.joint_label(i)).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            kind: self.kind,
            x: self.x.select(indices),
            attrs: indices.iter().map(|&i| self.attrs[i].clone()).collect(),
            cardinality: self.cardinality.clone(),
        }
    }
}

pub fn joint_code(attrs: &[u32], cardinality: &[u32]) -> u32 {
    attrs.iter().zip(cardinality).fold(0, |acc, (&a, &c)| acc * c + a)
}

/// Inverse of [`joint_code`].
pub fn split_code(mut code: u32, cardinality: &[u32]) -> Vec<u32> {
    let mut out = vec![0; cardinality.len()];
    for j in (0..cardinality.len()).rev() {
        out[j] = code % cardinality[j];
        code /= cardinality[j];
    }
    out
}

/// Class-conditional 2-D Gaussians; sample `i` belongs to class `i mod classes`.
pub fn gen_gauss2d(n: usize, means: &[[Real; 2]], var: Real, seed: u64) -> Result<Dataset> {
    if n == 0 || means.is_empty() || !(var > 0.0) || !var.is_finite() {
        return Err(DataError::BadParams(format!(
            "n={n}, classes={}, var={var}",
            means.len()
        )));
    }
    let mut rng = node_rng(seed, tags::DATA);
    let z = normal_vec(&mut rng, 2 * n);
    let sd = var.sqrt();
    let mut data = Vec::with_capacity(2 * n);
    let mut attrs = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % means.len();
        data.push(means[c][0] + sd * z[2 * i]);
        data.push(means[c][1] + sd * z[2 * i + 1]);
        attrs.push(vec![c as u32]);
    }
    let x = Tensor::new(vec![n, 2], data).expect("length matches");
    Dataset::new(DatasetKind::Gauss2d, x, attrs, vec![means.len() as u32])
}

/// Colored shapes on a dark background at jittered positions.
/// Attributes are `[shape, color]`, drawn uniformly.
pub fn gen_sprites(n: usize, grid: usize, shapes: usize, colors: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || !(grid == 8 || grid == 16) {
        return Err(DataError::BadParams(format!("n={n}, grid={grid}")));
    }
    if !(2..=Shape::ALL.len()).contains(&shapes) || !(2..=PALETTE.len()).contains(&colors) {
        return Err(DataError::BadParams(format!("{shapes} shapes, {colors} colors")));
    }
    let mut rng = node_rng(seed, tags::DATA);
    let size = grid / 2;
    let mut data = Vec::with_capacity(n * 3 * grid * grid);
    let mut attrs = Vec::with_capacity(n);
    for _ in 0..n {
        let s = rng.random_range(0..shapes);
        let c = rng.random_range(0..colors);
        let pos = (rng.random_range(0..=grid - size), rng.random_range(0..=grid - size));
        data.extend(render_sprite(grid, Shape::ALL[s], c, pos));
        attrs.push(vec![s as u32, c as u32]);
    }
    let x = Tensor::new(vec![n, 3, grid, grid], data).expect("length matches");
    Dataset::new(DatasetKind::Sprites, x, attrs, vec![shapes as u32, colors as u32])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum PartitionMode {
    Iid,
    ByAttribute { attr: usize },
}

/// Sample indices per client, each list sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub clients: Vec<Vec<usize>>,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    /// Attribute value client `client` is skewed towards.
    pub fn dominant_value(&self, client: usize, cardinality: u32) -> u32 {
        (client as u32) % cardinality
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Vec::len).collect()
    }
}

/// Splits a dataset across `k` clients.
///
/// `Iid` deals near-equal shuffled shares. `ByAttribute` gives client `i` the
/// dominant value `i mod cardinality`; a `skew` fraction of its samples carry
/// that value and the rest are dealt from the other values. Client sizes then
/// follow the attribute pools and are only approximately equal.
pub fn partition(ds: &Dataset, k: usize, mode: PartitionMode, skew: Real, seed: u64) -> Result<Partition> {
    if k == 0 || !(0.0..=1.0).contains(&skew) {
        return Err(DataError::BadParams(format!("k={k}, skew={skew}")));
    }
    let n = ds.len();
    if n < k {
        return Err(DataError::TooFewSamples(format!("{n} samples for {k} clients")));
    }
    let mut rng = node_rng(seed, tags::DATA ^ 0x9A27);
    let sizes: Vec<usize> = (0..k).map(|i| n / k + usize::from(i < n % k)).collect();
    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); k];
    match mode {
        PartitionMode::Iid => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let mut start = 0;
            for (c, &s) in sizes.iter().enumerate() {
                clients[c] = idx[start..start + s].to_vec();
                start += s;
            }
        }
        PartitionMode::ByAttribute { attr } => {
            let card = *ds
                .cardinality
                .get(attr)
                .ok_or_else(|| DataError::BadParams(format!("no attribute {attr}")))?;
            let mut pools: Vec<Vec<usize>> = vec![Vec::new(); card as usize];
            for (i, a) in ds.attrs.iter().enumerate() {
                pools[a[attr] as usize].push(i);
            }
            for p in &mut pools {
                p.shuffle(&mut rng);
            }
            let owner = |c: usize| (c as u32 % card) as usize;
            let owners: Vec<usize> = (0..card as usize)
                .map(|v| (0..k).filter(|&c| owner(c) == v).count())
                .collect();
            let pool_len: Vec<usize> = pools.iter().map(Vec::len).collect();
            // quota of other-valued samples, sized so the dominant share is `skew`
            let mut room = vec![0usize; k];
            for c in 0..k {
                let v = owner(c);
                let rank = (0..c).filter(|&o| owner(o) == v).count();
                let share = pool_len[v] / owners[v] + usize::from(rank < pool_len[v] % owners[v]);
                let dom = ((skew * sizes[c] as Real).round() as usize).min(share);
                room[c] = if skew >= 1.0 {
                    0
                } else if skew <= 0.0 {
                    sizes[c]
                } else {
                    (dom as Real * (1.0 - skew) / skew).round() as usize
                };
                let at = pools[v].len() - dom;
                clients[c].extend(pools[v].split_off(at));
            }
            let mut leftover: Vec<usize> = pools.into_iter().flatten().collect();
            leftover.shuffle(&mut rng);
            let mut spill = Vec::new();
            let mut next = 0;
            for i in leftover {
                let v = ds.attrs[i][attr] as usize;
                let target =
                    (0..k).map(|o| (next + o) % k).find(|&c| room[c] > 0 && owner(c) != v);
                match target {
                    Some(c) => {
                        clients[c].push(i);
                        room[c] -= 1;
                        next = (c + 1) % k;
                    }
                    None => spill.push(i),
                }
            }
            // what no quota absorbs goes to an owner of its value, else the smallest client
            for i in spill {
                let v = ds.attrs[i][attr] as usize;
                let c = (0..k)
                    .filter(|&c| owners[v] == 0 || owner(c) == v)
                    .min_by_key(|&c| (clients[c].len(), c))
                    .expect("k >= 1");
                clients[c].push(i);
            }
        }
    }
    for c in &mut clients {
        c.sort_unstable();
    }
    if let Some(c) = clients.iter().position(|c| c.is_empty()) {
        return Err(DataError::TooFewSamples(format!("client {c} would be empty")));
    }
    Ok(Partition { clients })
}
