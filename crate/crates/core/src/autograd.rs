//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value plus whatever the backward rule needs, so the
//! tape is topologically ordered by construction. [`Graph::backward`] walks it
//! once in reverse.
//!
//! Broadcasting is limited to a single-element operand against a tensor; the
//! layer-shaped ops (`add_row`, `add_channel`) cover bias addition.

use crate::tensor::{Result, Tensor, TensorError};
use crate::Scalar;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Binary { op: BinaryOp, a: Var, b: Var },
    Scale { a: Var, factor: S },
    Square(Var),
    Silu(Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    AddRow { a: Var, bias: Var },
    ConcatCols { a: Var, b: Var, left: usize, right: usize },
    Reshape(Var),
    Sum(Var),
    WeightedMse { pred: Var, target: Var, weights: Vec<S> },
    Conv2d { x: Var, w: Var, bias: Var, cols: Vec<S>, geom: ConvGeom },
    AvgPool2 { x: Var, dims: [usize; 4] },
    Upsample2 { x: Var, dims: [usize; 4] },
    AddChannel { x: Var, v: Var, dims: [usize; 4] },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    requires_grad: bool,
    op: Op<S>,
}

/// Append-only tape of executed operations.
#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    consumed: bool,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf. Gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        let rg = t.requires_grad();
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        self.push(value, rg, Op::Leaf)
    }

    /// Registers a copy of `t` that is never differentiated, regardless of
    /// its `requires_grad` flag.
    pub fn leaf_frozen(&mut self, t: &Tensor<S>) -> Var {
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        self.push(value, false, Op::Leaf)
    }

    /// Registers a constant input that never receives gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.push(t, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradient of `v` into the leaf tensor it was built from.
    pub fn write_grad(&self, v: Var, leaf: &mut Tensor<S>) -> Result<()> {
        match self.grad(v) {
            Some(g) => leaf.accumulate_grad(g),
            None => leaf.accumulate_grad(&vec![S::zero(); leaf.numel()]),
        }
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    fn mismatch(&self, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch { left: self.shape(a).to_vec(), right: self.shape(b).to_vec() }
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let la = self.data(a).len();
        let lb = self.data(b).len();
        let out_shape = if sa == sb || lb == 1 {
            sa.to_vec()
        } else if la == 1 {
            sb.to_vec()
        } else {
            return Err(self.mismatch(a, b));
        };
        let n = la.max(lb);
        let (da, db) = (self.data(a), self.data(b));
        let f = |x: S, y: S| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
        };
        let data: Vec<S> = (0..n)
            .map(|i| f(da[if la == 1 { 0 } else { i }], db[if lb == 1 { 0 } else { i }]))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, data)?, rg, Op::Binary { op, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(value, rg, Op::Scale { a, factor })
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(value, rg, Op::Square(a))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(value, rg, Op::Silu(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch(a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        kernels::mm(self.data(a), self.data(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul { a, b, m, k, n }))
    }

    /// Adds `bias[n]` to every row of `a[m, n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(bias);
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(self.mismatch(a, bias));
        }
        let n = sb[0];
        let bd = self.data(bias);
        let data: Vec<S> =
            self.data(a).iter().enumerate().map(|(i, &x)| x + bd[i % n]).collect();
        let shape = sa.to_vec();
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::AddRow { a, bias }))
    }

    /// `[m, p] ++ [m, q] -> [m, p + q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(self.mismatch(a, b));
        }
        let (m, p, q) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.data(a), self.data(b));
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(&da[i * p..(i + 1) * p]);
            data.extend_from_slice(&db[i * q..(i + 1) * q]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![m, p + q], data)?,
            rg,
            Op::ConcatCols { a, b, left: p, right: q },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, rg, Op::Sum(a))
    }

    /// Mean of squared differences over every element.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let batch = self.shape(pred).first().copied().unwrap_or(1);
        self.weighted_mse(pred, target, &vec![S::one(); batch])
    }

    /// `sum_i w_i * ||pred_i - target_i||^2 / numel`, one weight per
    /// leading-axis sample. All-ones weights reduce to [`Graph::mse_loss`].
    pub fn weighted_mse(&mut self, pred: Var, target: Var, weights: &[S]) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(self.mismatch(pred, target));
        }
        let n = self.data(pred).len();
        let batch = if self.shape(pred).is_empty() { 1 } else { self.shape(pred)[0] };
        if weights.len() != batch || n == 0 {
            return Err(TensorError::ShapeMismatch {
                left: self.shape(pred).to_vec(),
                right: vec![weights.len()],
            });
        }
        let per = n / batch;
        let (dp, dt) = (self.data(pred), self.data(target));
        let mut total = S::zero();
        for (i, &w) in weights.iter().enumerate() {
            let mut row = S::zero();
            for j in i * per..(i + 1) * per {
                let d = dp[j] - dt[j];
                row += d * d;
            }
            total += w * row;
        }
        let loss = total / S::from_usize(n).unwrap();
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::WeightedMse { pred, target, weights: weights.to_vec() },
        ))
    }

    /// Same-padded, stride-1 cross-correlation.
    /// `x[b, c_in, h, w] * w[c_out, c_in, k, k] + bias[c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(bias));
        if sx.len() != 4 || sw.len() != 4 || sb.len() != 1 {
            return Err(self.mismatch(x, w));
        }
        let k = sw[2];
        if sw[1] != sx[1] || sw[3] != k || k % 2 == 0 || sb[0] != sw[0] {
            return Err(self.mismatch(x, w));
        }
        let geom = ConvGeom { batch: sx[0], c_in: sx[1], c_out: sw[0], h: sx[2], w: sx[3], k };
        let hw = geom.h * geom.w;
        let ck = geom.c_in * k * k;
        let mut out = vec![S::zero(); geom.batch * geom.c_out * hw];
        let mut cols = vec![S::zero(); geom.batch * ck * hw];
        let (dx, dw, db) = (self.data(x), self.data(w), self.data(bias));
        for bi in 0..geom.batch {
            let col = &mut cols[bi * ck * hw..(bi + 1) * ck * hw];
            kernels::im2col(&dx[bi * geom.c_in * hw..(bi + 1) * geom.c_in * hw], col, &geom);
            let o = &mut out[bi * geom.c_out * hw..(bi + 1) * geom.c_out * hw];
            for (co, row) in o.chunks_mut(hw).enumerate() {
                row.iter_mut().for_each(|v| *v = db[co]);
            }
            kernels::mm(dw, col, o, geom.c_out, ck, hw);
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(bias);
        if !rg {
            cols = Vec::new();
        }
        let shape = vec![geom.batch, geom.c_out, geom.h, geom.w];
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Conv2d { x, w, bias, cols, geom }))
    }

    /// 2x2 average pooling; spatial extents must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let dims = self.dims4(x)?;
        let [b, c, h, w] = dims;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::BadShape { shape: dims.to_vec(), len: 0 });
        }
        let (ho, wo) = (h / 2, w / 2);
        let quarter = S::lit(0.25);
        let d = self.data(x);
        let mut out = vec![S::zero(); b * c * ho * wo];
        for p in 0..b * c {
            let src = &d[p * h * w..(p + 1) * h * w];
            for i in 0..ho {
                for j in 0..wo {
                    let s = src[2 * i * w + 2 * j]
                        + src[2 * i * w + 2 * j + 1]
                        + src[(2 * i + 1) * w + 2 * j]
                        + src[(2 * i + 1) * w + 2 * j + 1];
                    out[p * ho * wo + i * wo + j] = s * quarter;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![b, c, ho, wo], out)?, rg, Op::AvgPool2 { x, dims }))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let dims = self.dims4(x)?;
        let [b, c, h, w] = dims;
        let (ho, wo) = (2 * h, 2 * w);
        let d = self.data(x);
        let mut out = vec![S::zero(); b * c * ho * wo];
        for p in 0..b * c {
            for i in 0..ho {
                for j in 0..wo {
                    out[p * ho * wo + i * wo + j] = d[p * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![b, c, ho, wo], out)?, rg, Op::Upsample2 { x, dims }))
    }

    /// Adds `v[b, c]` to every spatial position of `x[b, c, h, w]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let dims = self.dims4(x)?;
        let [b, c, h, w] = dims;
        if self.shape(v) != [b, c] {
            return Err(self.mismatch(x, v));
        }
        let hw = h * w;
        let dv = self.data(v);
        let data: Vec<S> =
            self.data(x).iter().enumerate().map(|(i, &val)| val + dv[i / hw]).collect();
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(Tensor::new(dims.to_vec(), data)?, rg, Op::AddChannel { x, v, dims }))
    }

    fn dims4(&self, x: Var) -> Result<[usize; 4]> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(TensorError::BadShape { shape: s.to_vec(), len: self.data(x).len() });
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Populates gradients of every node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[idx] = None;
            } else if grads[idx].is_none() {
                grads[idx] = Some(vec![S::zero(); node.value.numel()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, contrib: Vec<S>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary { op, a, b } => {
                let (da, db) = (self.data(*a), self.data(*b));
                let (la, lb) = (da.len(), db.len());
                let pick = |d: &[S], l: usize, i: usize| d[if l == 1 { 0 } else { i }];
                let (ga, gb): (Vec<S>, Vec<S>) = match op {
                    BinaryOp::Add => (g.to_vec(), g.to_vec()),
                    BinaryOp::Sub => (g.to_vec(), g.iter().map(|&x| -x).collect()),
                    BinaryOp::Mul => (
                        g.iter().enumerate().map(|(i, &x)| x * pick(db, lb, i)).collect(),
                        g.iter().enumerate().map(|(i, &x)| x * pick(da, la, i)).collect(),
                    ),
                };
                let reduce = |full: Vec<S>, l: usize| {
                    if l == 1 && full.len() != 1 {
                        vec![full.into_iter().sum()]
                    } else {
                        full
                    }
                };
                acc(*a, reduce(ga, la));
                acc(*b, reduce(gb, lb));
            }
            Op::Scale { a, factor } => acc(*a, g.iter().map(|&x| x * *factor).collect()),
            Op::Square(a) => {
                let two = S::lit(2.0);
                let d = self.data(*a);
                acc(*a, g.iter().zip(d).map(|(&x, &v)| two * v * x).collect());
            }
            Op::Silu(a) => {
                let d = self.data(*a);
                acc(
                    *a,
                    g.iter()
                        .zip(d)
                        .map(|(&x, &v)| {
                            let s = sigmoid(v);
                            x * (s + v * s * (S::one() - s))
                        })
                        .collect(),
                );
            }
            Op::MatMul { a, b, m, k, n } => {
                if self.rg(*a) {
                    let mut ga = vec![S::zero(); m * k];
                    kernels::mm_a_bt(g, self.data(*b), &mut ga, *m, *n, *k);
                    acc(*a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![S::zero(); k * n];
                    kernels::mm_at_b(self.data(*a), g, &mut gb, *m, *k, *n);
                    acc(*b, gb);
                }
            }
            Op::AddRow { a, bias } => {
                let n = self.shape(*bias)[0];
                let mut gb = vec![S::zero(); n];
                for (i, &x) in g.iter().enumerate() {
                    gb[i % n] += x;
                }
                acc(*a, g.to_vec());
                acc(*bias, gb);
            }
            Op::ConcatCols { a, b, left, right } => {
                let w = left + right;
                let m = g.len() / w;
                let mut ga = Vec::with_capacity(m * left);
                let mut gb = Vec::with_capacity(m * right);
                for i in 0..m {
                    ga.extend_from_slice(&g[i * w..i * w + left]);
                    gb.extend_from_slice(&g[i * w + left..(i + 1) * w]);
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Sum(a) => acc(*a, vec![g[0]; self.data(*a).len()]),
            Op::WeightedMse { pred, target, weights } => {
                let (dp, dt) = (self.data(*pred), self.data(*target));
                let n = dp.len();
                let per = n / weights.len();
                let scale = S::lit(2.0) * g[0] / S::from_usize(n).unwrap();
                let gp: Vec<S> = (0..n).map(|j| scale * weights[j / per] * (dp[j] - dt[j])).collect();
                if self.rg(*target) {
                    acc(*target, gp.iter().map(|&x| -x).collect());
                }
                acc(*pred, gp);
            }
            Op::Conv2d { x, w, bias, cols, geom } => {
                let hw = geom.h * geom.w;
                let ck = geom.c_in * geom.k * geom.k;
                let mut gw = vec![S::zero(); geom.c_out * ck];
                let mut gbias = vec![S::zero(); geom.c_out];
                let mut gx = vec![S::zero(); geom.batch * geom.c_in * hw];
                let mut gcol = vec![S::zero(); ck * hw];
                let wd = self.data(*w);
                for bi in 0..geom.batch {
                    let go = &g[bi * geom.c_out * hw..(bi + 1) * geom.c_out * hw];
                    for (co, row) in go.chunks(hw).enumerate() {
                        gbias[co] += row.iter().copied().sum();
                    }
                    let col = &cols[bi * ck * hw..(bi + 1) * ck * hw];
                    kernels::mm_a_bt(go, col, &mut gw, geom.c_out, hw, ck);
                    if self.rg(*x) {
                        gcol.iter_mut().for_each(|v| *v = S::zero());
                        kernels::mm_at_b(wd, go, &mut gcol, geom.c_out, ck, hw);
                        kernels::col2im(
                            &gcol,
                            &mut gx[bi * geom.c_in * hw..(bi + 1) * geom.c_in * hw],
                            geom,
                        );
                    }
                }
                acc(*x, gx);
                acc(*w, gw);
                acc(*bias, gbias);
            }
            Op::AvgPool2 { x, dims } => {
                let [b, c, h, w] = *dims;
                let (ho, wo) = (h / 2, w / 2);
                let quarter = S::lit(0.25);
                let mut gx = vec![S::zero(); b * c * h * w];
                for p in 0..b * c {
                    for i in 0..h {
                        for j in 0..w {
                            gx[p * h * w + i * w + j] = g[p * ho * wo + (i / 2) * wo + j / 2] * quarter;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Upsample2 { x, dims } => {
                let [b, c, h, w] = *dims;
                let (ho, wo) = (2 * h, 2 * w);
                let mut gx = vec![S::zero(); b * c * h * w];
                for p in 0..b * c {
                    for i in 0..ho {
                        for j in 0..wo {
                            gx[p * h * w + (i / 2) * w + j / 2] += g[p * ho * wo + i * wo + j];
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::AddChannel { x, v, dims } => {
                let hw = dims[2] * dims[3];
                let mut gv = vec![S::zero(); dims[0] * dims[1]];
                for (i, &val) in g.iter().enumerate() {
                    gv[i / hw] += val;
                }
                acc(*x, g.to_vec());
                acc(*v, gv);
            }
        }
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

pub(crate) mod kernels {
    use super::ConvGeom;
    use crate::Scalar;

    /// `c[m, n] += a[m, k] * b[k, n]`.
    pub fn mm<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == S::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += aip * bv;
                }
            }
        }
    }

    /// `c[m, k] += a[m, n] * b[k, n]^T`.
    pub fn mm_a_bt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, n: usize, k: usize) {
        for i in 0..m {
            let arow = &a[i * n..(i + 1) * n];
            for j in 0..k {
                let brow = &b[j * n..(j + 1) * n];
                let mut s = S::zero();
                for (&x, &y) in arow.iter().zip(brow) {
                    s += x * y;
                }
                c[i * k + j] += s;
            }
        }
    }

    /// `c[k, n] += a[m, k]^T * b[m, n]`.
    pub fn mm_at_b<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let brow = &b[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == S::zero() {
                    continue;
                }
                let crow = &mut c[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += aip * bv;
                }
            }
        }
    }

    pub(super) fn im2col<S: Scalar>(x: &[S], col: &mut [S], g: &ConvGeom) {
        let (h, w, k) = (g.h as isize, g.w as isize, g.k as isize);
        let r = k / 2;
        let hw = (h * w) as usize;
        for c in 0..g.c_in {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * g.k * g.k) + (ki * k + kj) as usize;
                    let dst = &mut col[row * hw..(row + 1) * hw];
                    for i in 0..h {
                        let si = i + ki - r;
                        for j in 0..w {
                            let sj = j + kj - r;
                            dst[(i * w + j) as usize] = if si < 0 || si >= h || sj < 0 || sj >= w {
                                S::zero()
                            } else {
                                x[c * hw + (si * w + sj) as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    pub(super) fn col2im<S: Scalar>(col: &[S], x: &mut [S], g: &ConvGeom) {
        let (h, w, k) = (g.h as isize, g.w as isize, g.k as isize);
        let r = k / 2;
        let hw = (h * w) as usize;
        for c in 0..g.c_in {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * g.k * g.k) + (ki * k + kj) as usize;
                    let src = &col[row * hw..(row + 1) * hw];
                    for i in 0..h {
                        let si = i + ki - r;
                        if si < 0 || si >= h {
                            continue;
                        }
                        for j in 0..w {
                            let sj = j + kj - r;
                            if sj < 0 || sj >= w {
                                continue;
                            }
                            x[c * hw + (si * w + sj) as usize] += src[(i * w + j) as usize];
                        }
                    }
                }
            }
        }
    }
}
