//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Graph`] is a single-use tape: forward operations append nodes,
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! for every node that (transitively) depends on a trainable leaf. All
//! values are `f64`; evaluation order is fixed by construction, so a run
//! with the same inputs reproduces bit-identical results.
//!
//! The op set is deliberately small: elementwise arithmetic with NumPy-style
//! broadcasting, reductions, reshape, matmul/linear, a padded 3x3
//! convolution, 2x2 average pooling, log-softmax, per-row gather, and
//! stop-gradient. Everything else in the crate (group norm, feature
//! restyling, the loss heads) is composed from these.

use ndarray::{Array2, ArrayD, Axis, IxDyn, Zip};

use crate::error::{Error, Result};

/// Dynamic-rank f64 tensor, the only value type on the tape.
pub type Arr = ArrayD<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Div(VarId, VarId),
    Neg(VarId),
    AddScalar(VarId),
    MulScalar(VarId, f64),
    Sqrt(VarId),
    Exp(VarId),
    /// ln(min(x + eps, 1)): the clamped log used by the probability losses.
    LnEps(VarId, f64),
    Relu(VarId),
    /// Mean over the given axes, keeping them as size-1 dims.
    MeanAxes(VarId, Vec<usize>),
    /// Sum over the given axes, keeping them as size-1 dims.
    SumAxes(VarId),
    /// Mean over all elements, producing shape [1].
    MeanAll(VarId),
    Reshape(VarId),
    /// [m,k] x [k,n] -> [m,n]
    Matmul(VarId, VarId),
    /// x[B,C] * w[K,C]^T + b[K] -> [B,K]
    Linear { x: VarId, w: VarId, b: VarId },
    /// 3x3 convolution, padding 1, stride 1.
    /// x[B,Cin,H,W], w[Cout,Cin,3,3], b[Cout] -> [B,Cout,H,W].
    /// `col` is the saved im2col matrix for the backward pass.
    Conv3x3 {
        x: VarId,
        w: VarId,
        b: VarId,
        col: Array2<f64>,
    },
    /// 2x2 average pooling with stride 2 (floor semantics on odd sizes).
    AvgPool2(VarId),
    LogSoftmax(VarId, usize),
    /// Per-row gather: x[B, ...] flattened per row, idx[b] picks one entry.
    SelectPerRow(VarId, Vec<usize>),
    /// Identity forward, blocks gradient flow.
    Detach,
}

struct Node {
    op: Op,
    value: Arr,
}

/// Gradients produced by [`Graph::backward`], indexed by [`VarId`].
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    /// Gradient for `id`, if any was accumulated (None for constants and
    /// nodes the loss does not depend on).
    pub fn get(&self, id: VarId) -> Option<&Arr> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: VarId) -> Option<Arr> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

/// Single-use reverse-mode tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    requires: Vec<bool>,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::shape(format!(
                "cannot broadcast shapes {:?} and {:?}",
                a, b
            )));
        }
    }
    Ok(out)
}

fn bc_zip(a: &Arr, b: &Arr, f: impl Fn(f64, f64) -> f64) -> Result<Arr> {
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let av = a
        .broadcast(IxDyn(&shape))
        .ok_or_else(|| Error::shape("broadcast failed".to_string()))?;
    let bv = b
        .broadcast(IxDyn(&shape))
        .ok_or_else(|| Error::shape("broadcast failed".to_string()))?;
    let mut out = Arr::zeros(IxDyn(&shape));
    Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    Ok(out)
}

/// Sum `grad` down to `target` shape, inverting a broadcast.
fn reduce_to_shape(mut grad: Arr, target: &[usize]) -> Arr {
    while grad.ndim() > target.len() {
        grad = grad.sum_axis(Axis(0));
    }
    for ax in 0..target.len() {
        if target[ax] == 1 && grad.shape()[ax] != 1 {
            grad = grad.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    grad
}

fn as2(a: &Arr) -> Array2<f64> {
    a.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected rank-2 array")
        .to_owned()
}

/// Build the im2col matrix for a padded 3x3 convolution.
/// Rows are (b, i, j) in row-major order, columns are (cin, ky, kx).
fn im2col_3x3(x: &Arr) -> Array2<f64> {
    let (bs, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut col = Array2::<f64>::zeros((bs * h * w, cin * 9));
    let xs = x.as_slice().expect("contiguous input");
    let cs = col.as_slice_mut().expect("contiguous col");
    let ncol = cin * 9;
    for b in 0..bs {
        for ci in 0..cin {
            let x_base = (b * cin + ci) * h * w;
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let cc = ci * 9 + ky * 3 + kx;
                    for i in 0..h {
                        let iy = i as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row_base = (b * h + i) * w;
                        let src_base = x_base + iy as usize * w;
                        let (j0, j1) = match kx {
                            0 => (1, w),
                            2 => (0, w.saturating_sub(1)),
                            _ => (0, w),
                        };
                        for j in j0..j1 {
                            let jx = (j as isize + kx as isize - 1) as usize;
                            cs[(row_base + j) * ncol + cc] = xs[src_base + jx];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add the gradient of an im2col matrix back onto the input.
fn col2im_3x3(dcol: &Array2<f64>, bs: usize, cin: usize, h: usize, w: usize) -> Arr {
    let mut dx = Arr::zeros(IxDyn(&[bs, cin, h, w]));
    let ds = dcol.as_slice().expect("contiguous dcol");
    let xs = dx.as_slice_mut().expect("contiguous dx");
    let ncol = cin * 9;
    for b in 0..bs {
        for ci in 0..cin {
            let x_base = (b * cin + ci) * h * w;
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let cc = ci * 9 + ky * 3 + kx;
                    for i in 0..h {
                        let iy = i as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row_base = (b * h + i) * w;
                        let dst_base = x_base + iy as usize * w;
                        let (j0, j1) = match kx {
                            0 => (1, w),
                            2 => (0, w.saturating_sub(1)),
                            _ => (0, w),
                        };
                        for j in j0..j1 {
                            let jx = (j as isize + kx as isize - 1) as usize;
                            xs[dst_base + jx] += ds[(row_base + j) * ncol + cc];
                        }
                    }
                }
            }
        }
    }
    dx
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Arr, requires: bool) -> VarId {
        self.nodes.push(Node { op, value });
        self.requires.push(requires);
        VarId(self.nodes.len() - 1)
    }

    fn req(&self, id: VarId) -> bool {
        self.requires[id.0]
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, value: Arr) -> VarId {
        self.push(Op::Leaf, value, true)
    }

    /// Constant leaf: no gradient is tracked through it.
    pub fn constant(&mut self, value: Arr) -> VarId {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, id: VarId) -> &Arr {
        &self.nodes[id.0].value
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = bc_zip(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v, self.req(a) || self.req(b)))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = bc_zip(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v, self.req(a) || self.req(b)))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = bc_zip(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v, self.req(a) || self.req(b)))
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = bc_zip(self.value(a), self.value(b), |x, y| x / y)?;
        Ok(self.push(Op::Div(a, b), v, self.req(a) || self.req(b)))
    }

    pub fn neg(&mut self, a: VarId) -> VarId {
        let v = self.value(a).mapv(|x| -x);
        self.push(Op::Neg(a), v, self.req(a))
    }

    pub fn add_scalar(&mut self, a: VarId, s: f64) -> VarId {
        let v = self.value(a).mapv(|x| x + s);
        self.push(Op::AddScalar(a), v, self.req(a))
    }

    pub fn mul_scalar(&mut self, a: VarId, s: f64) -> VarId {
        let v = self.value(a).mapv(|x| x * s);
        self.push(Op::MulScalar(a, s), v, self.req(a))
    }

    pub fn sqrt(&mut self, a: VarId) -> VarId {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(Op::Sqrt(a), v, self.req(a))
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        let v = self.value(a).mapv(f64::exp);
        self.push(Op::Exp(a), v, self.req(a))
    }

    /// Clamped logarithm ln(min(x + eps, 1)); keeps probability losses
    /// finite and nonnegative for any finite logits.
    pub fn ln_eps(&mut self, a: VarId, eps: f64) -> VarId {
        let v = self.value(a).mapv(|x| (x + eps).min(1.0).ln());
        self.push(Op::LnEps(a, eps), v, self.req(a))
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(Op::Relu(a), v, self.req(a))
    }

    pub fn mean_axes(&mut self, a: VarId, axes: &[usize]) -> VarId {
        let mut v = self.value(a).clone();
        for &ax in axes {
            let n = v.shape()[ax] as f64;
            v = v.sum_axis(Axis(ax)).insert_axis(Axis(ax)) / n;
        }
        self.push(Op::MeanAxes(a, axes.to_vec()), v, self.req(a))
    }

    pub fn sum_axes(&mut self, a: VarId, axes: &[usize]) -> VarId {
        let mut v = self.value(a).clone();
        for &ax in axes {
            v = v.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        self.push(Op::SumAxes(a), v, self.req(a))
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let n = self.value(a).len().max(1) as f64;
        let v = Arr::from_elem(IxDyn(&[1]), self.value(a).sum() / n);
        self.push(Op::MeanAll(a), v, self.req(a))
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> Result<VarId> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.value(a).shape(),
                shape
            )));
        }
        let v = self
            .value(a)
            .clone()
            .into_shape_clone(IxDyn(shape))
            .map_err(|e| Error::shape(e.to_string()))?;
        Ok(self.push(Op::Reshape(a), v, self.req(a)))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != 2 || vb.ndim() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape(format!(
                "matmul shapes {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let v = as2(va).dot(&as2(vb)).into_dyn();
        Ok(self.push(Op::Matmul(a, b), v, self.req(a) || self.req(b)))
    }

    /// Fully connected layer: x[B,C] -> [B,K] with weight [K,C], bias [K].
    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vx.ndim() != 2 || vw.ndim() != 2 || vx.shape()[1] != vw.shape()[1] {
            return Err(Error::shape(format!(
                "linear shapes x{:?} w{:?}",
                vx.shape(),
                vw.shape()
            )));
        }
        if vb.ndim() != 1 || vb.shape()[0] != vw.shape()[0] {
            return Err(Error::shape(format!(
                "linear bias {:?} vs weight {:?}",
                vb.shape(),
                vw.shape()
            )));
        }
        let mut v = as2(vx).dot(&as2(vw).t()).into_dyn();
        let bias: Vec<f64> = vb.iter().cloned().collect();
        for mut row in v.rows_mut() {
            for (o, bb) in row.iter_mut().zip(bias.iter()) {
                *o += bb;
            }
        }
        let req = self.req(x) || self.req(w) || self.req(b);
        Ok(self.push(Op::Linear { x, w, b }, v, req))
    }

    /// Padded 3x3 convolution, stride 1: x[B,Cin,H,W] -> [B,Cout,H,W].
    pub fn conv3x3(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vx.ndim() != 4 || vw.ndim() != 4 {
            return Err(Error::shape("conv3x3 expects rank-4 input and weight"));
        }
        let (bs, cin, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let cout = vw.shape()[0];
        if vw.shape()[1] != cin || vw.shape()[2] != 3 || vw.shape()[3] != 3 {
            return Err(Error::shape(format!(
                "conv3x3 weight {:?} does not match input channels {}",
                vw.shape(),
                cin
            )));
        }
        if vb.ndim() != 1 || vb.shape()[0] != cout {
            return Err(Error::shape("conv3x3 bias shape"));
        }
        let col = im2col_3x3(vx);
        let w2 = as2(&vw.clone().into_shape_clone(IxDyn(&[cout, cin * 9])).unwrap().into_dyn());
        let mut out2 = col.dot(&w2.t()); // [B*H*W, Cout]
        let bias: Vec<f64> = vb.iter().cloned().collect();
        for mut row in out2.rows_mut() {
            for (o, bb) in row.iter_mut().zip(bias.iter()) {
                *o += bb;
            }
        }
        let v = out2
            .into_shape_clone((bs, h, wd, cout))
            .unwrap()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        let req = self.req(x) || self.req(w) || self.req(b);
        Ok(self.push(Op::Conv3x3 { x, w, b, col }, v, req))
    }

    /// 2x2 average pooling, stride 2. Trailing row/column on odd sizes is dropped.
    pub fn avg_pool2(&mut self, a: VarId) -> Result<VarId> {
        let va = self.value(a);
        if va.ndim() != 4 {
            return Err(Error::shape("avg_pool2 expects rank-4 input"));
        }
        let (bs, c, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2], va.shape()[3]);
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::shape(format!("avg_pool2 input too small: {}x{}", h, w)));
        }
        let mut v = Arr::zeros(IxDyn(&[bs, c, ho, wo]));
        {
            let xs = va.as_slice().expect("contiguous");
            let os = v.as_slice_mut().expect("contiguous");
            for b in 0..bs {
                for ci in 0..c {
                    let ib = (b * c + ci) * h * w;
                    let ob = (b * c + ci) * ho * wo;
                    for i in 0..ho {
                        for j in 0..wo {
                            let p = ib + (2 * i) * w + 2 * j;
                            os[ob + i * wo + j] =
                                0.25 * (xs[p] + xs[p + 1] + xs[p + w] + xs[p + w + 1]);
                        }
                    }
                }
            }
        }
        Ok(self.push(Op::AvgPool2(a), v, self.req(a)))
    }

    /// Numerically stable log-softmax along `axis`.
    pub fn log_softmax(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        let va = self.value(a);
        if axis >= va.ndim() {
            return Err(Error::shape(format!(
                "log_softmax axis {} out of range for {:?}",
                axis,
                va.shape()
            )));
        }
        let max = va.map_axis(Axis(axis), |lane| {
            lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        });
        let max = max.insert_axis(Axis(axis));
        let shifted = va - &max;
        let lse = shifted
            .mapv(f64::exp)
            .sum_axis(Axis(axis))
            .insert_axis(Axis(axis))
            .mapv(f64::ln);
        let v = shifted - &lse;
        Ok(self.push(Op::LogSoftmax(a, axis), v, self.req(a)))
    }

    /// Gather one entry per row: treats `a` as [B, rest...] and picks the
    /// given flat index inside each row, yielding shape [B].
    pub fn select_per_row(&mut self, a: VarId, idx: Vec<usize>) -> Result<VarId> {
        let va = self.value(a);
        if va.ndim() < 2 {
            return Err(Error::shape("select_per_row expects rank >= 2"));
        }
        let bs = va.shape()[0];
        let row = va.len() / bs;
        if idx.len() != bs {
            return Err(Error::shape(format!(
                "select_per_row got {} indices for batch {}",
                idx.len(),
                bs
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= row) {
            return Err(Error::shape(format!(
                "select_per_row index {} out of row size {}",
                bad, row
            )));
        }
        let xs = va.as_slice().expect("contiguous");
        let v = Arr::from_shape_vec(
            IxDyn(&[bs]),
            idx.iter().enumerate().map(|(b, &i)| xs[b * row + i]).collect(),
        )
        .unwrap();
        Ok(self.push(Op::SelectPerRow(a, idx), v, self.req(a)))
    }

    /// Identity forward; gradients do not flow past this node.
    pub fn detach(&mut self, a: VarId) -> VarId {
        let v = self.value(a).clone();
        self.push(Op::Detach, v, false)
    }

    fn accumulate(grads: &mut [Option<Arr>], id: VarId, g: Arr) {
        match &mut grads[id.0] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    /// Run reverse-mode accumulation from a scalar loss node.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Arr>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Arr::ones(self.value(loss).raw_dim()));

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.requires[id] {
                continue;
            }
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g); // keep for the caller
                    continue;
                }
                Op::Add(a, b) => {
                    if self.req(*a) {
                        Self::accumulate(&mut grads, *a, reduce_to_shape(g.clone(), self.value(*a).shape()));
                    }
                    if self.req(*b) {
                        Self::accumulate(&mut grads, *b, reduce_to_shape(g, self.value(*b).shape()));
                    }
                }
                Op::Sub(a, b) => {
                    if self.req(*a) {
                        Self::accumulate(&mut grads, *a, reduce_to_shape(g.clone(), self.value(*a).shape()));
                    }
                    if self.req(*b) {
                        Self::accumulate(&mut grads, *b, reduce_to_shape(g.mapv(|x| -x), self.value(*b).shape()));
                    }
                }
                Op::Mul(a, b) => {
                    if self.req(*a) {
                        let da = bc_zip(&g, self.value(*b), |gg, y| gg * y)?;
                        Self::accumulate(&mut grads, *a, reduce_to_shape(da, self.value(*a).shape()));
                    }
                    if self.req(*b) {
                        let db = bc_zip(&g, self.value(*a), |gg, x| gg * x)?;
                        Self::accumulate(&mut grads, *b, reduce_to_shape(db, self.value(*b).shape()));
                    }
                }
                Op::Div(a, b) => {
                    if self.req(*a) {
                        let da = bc_zip(&g, self.value(*b), |gg, y| gg / y)?;
                        Self::accumulate(&mut grads, *a, reduce_to_shape(da, self.value(*a).shape()));
                    }
                    if self.req(*b) {
                        let gout = bc_zip(&g, &self.nodes[id].value, |gg, o| gg * o)?;
                        let db = bc_zip(&gout, self.value(*b), |go, y| -go / y)?;
                        Self::accumulate(&mut grads, *b, reduce_to_shape(db, self.value(*b).shape()));
                    }
                }
                Op::Neg(a) => {
                    Self::accumulate(&mut grads, *a, g.mapv(|x| -x));
                }
                Op::AddScalar(a) => {
                    Self::accumulate(&mut grads, *a, g);
                }
                Op::MulScalar(a, s) => {
                    Self::accumulate(&mut grads, *a, g.mapv(|x| x * s));
                }
                Op::Sqrt(a) => {
                    let out = &self.nodes[id].value;
                    let da = bc_zip(&g, out, |gg, o| 0.5 * gg / o)?;
                    Self::accumulate(&mut grads, *a, da);
                }
                Op::Exp(a) => {
                    let out = &self.nodes[id].value;
                    let da = bc_zip(&g, out, |gg, o| gg * o)?;
                    Self::accumulate(&mut grads, *a, da);
                }
                Op::LnEps(a, eps) => {
                    let x = self.value(*a);
                    let da = bc_zip(&g, x, |gg, xx| {
                        if xx + eps < 1.0 {
                            gg / (xx + eps)
                        } else {
                            0.0
                        }
                    })?;
                    Self::accumulate(&mut grads, *a, da);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let da = bc_zip(&g, x, |gg, xx| if xx > 0.0 { gg } else { 0.0 })?;
                    Self::accumulate(&mut grads, *a, da);
                }
                Op::MeanAxes(a, axes) => {
                    let shape = self.value(*a).shape().to_vec();
                    let n: usize = axes.iter().map(|&ax| shape[ax]).product();
                    let gb = g
                        .broadcast(IxDyn(&shape))
                        .expect("mean_axes grad broadcast")
                        .to_owned()
                        / n as f64;
                    Self::accumulate(&mut grads, *a, gb);
                }
                Op::SumAxes(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    let gb = g
                        .broadcast(IxDyn(&shape))
                        .expect("sum_axes grad broadcast")
                        .to_owned();
                    Self::accumulate(&mut grads, *a, gb);
                }
                Op::MeanAll(a) => {
                    let shape = self.value(*a).raw_dim();
                    let n = self.value(*a).len().max(1) as f64;
                    let gv = g[[0]] / n;
                    Self::accumulate(&mut grads, *a, Arr::from_elem(shape, gv));
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    let gb = g.into_shape_clone(IxDyn(&shape)).expect("reshape grad");
                    Self::accumulate(&mut grads, *a, gb);
                }
                Op::Matmul(a, b) => {
                    let g2 = as2(&g);
                    if self.req(*a) {
                        let da = g2.dot(&as2(self.value(*b)).t()).into_dyn();
                        Self::accumulate(&mut grads, *a, da);
                    }
                    if self.req(*b) {
                        let db = as2(self.value(*a)).t().dot(&g2).into_dyn();
                        Self::accumulate(&mut grads, *b, db);
                    }
                }
                Op::Linear { x, w, b } => {
                    let g2 = as2(&g);
                    if self.req(*x) {
                        let dx = g2.dot(&as2(self.value(*w))).into_dyn();
                        Self::accumulate(&mut grads, *x, dx);
                    }
                    if self.req(*w) {
                        let dw = g2.t().dot(&as2(self.value(*x))).into_dyn();
                        Self::accumulate(&mut grads, *w, dw);
                    }
                    if self.req(*b) {
                        let db = g2.sum_axis(Axis(0)).into_dyn();
                        Self::accumulate(&mut grads, *b, db);
                    }
                }
                Op::Conv3x3 { x, w, b, col } => {
                    let (bs, cout, h, wd) =
                        (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
                    let cin = self.value(*x).shape()[1];
                    // [B,Cout,H,W] -> [B*H*W, Cout]
                    let g2 = g
                        .view()
                        .permuted_axes(IxDyn(&[0, 2, 3, 1]))
                        .as_standard_layout()
                        .to_owned()
                        .into_shape_clone(IxDyn(&[bs * h * wd, cout]))
                        .unwrap();
                    let g2 = as2(&g2);
                    if self.req(*w) {
                        let dw2 = g2.t().dot(col); // [Cout, Cin*9]
                        let dw = dw2
                            .into_shape_clone((cout, cin, 3, 3))
                            .unwrap()
                            .into_dyn();
                        Self::accumulate(&mut grads, *w, dw);
                    }
                    if self.req(*b) {
                        let db = g2.sum_axis(Axis(0)).into_dyn();
                        Self::accumulate(&mut grads, *b, db);
                    }
                    if self.req(*x) {
                        let w2 = as2(
                            &self
                                .value(*w)
                                .clone()
                                .into_shape_clone(IxDyn(&[cout, cin * 9]))
                                .unwrap(),
                        );
                        let dcol = g2.dot(&w2); // [B*H*W, Cin*9]
                        let dx = col2im_3x3(&dcol, bs, cin, h, wd);
                        Self::accumulate(&mut grads, *x, dx);
                    }
                }
                Op::AvgPool2(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    let (bs, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let (ho, wo) = (h / 2, w / 2);
                    let mut dx = Arr::zeros(IxDyn(&shape));
                    {
                        let gs = g.as_slice().expect("contiguous");
                        let xs = dx.as_slice_mut().expect("contiguous");
                        for b in 0..bs {
                            for ci in 0..c {
                                let ib = (b * c + ci) * h * w;
                                let ob = (b * c + ci) * ho * wo;
                                for i in 0..ho {
                                    for j in 0..wo {
                                        let gv = 0.25 * gs[ob + i * wo + j];
                                        let p = ib + (2 * i) * w + 2 * j;
                                        xs[p] += gv;
                                        xs[p + 1] += gv;
                                        xs[p + w] += gv;
                                        xs[p + w + 1] += gv;
                                    }
                                }
                            }
                        }
                    }
                    Self::accumulate(&mut grads, *a, dx);
                }
                Op::LogSoftmax(a, axis) => {
                    let out = &self.nodes[id].value;
                    let gsum = g.sum_axis(Axis(*axis)).insert_axis(Axis(*axis));
                    let soft = out.mapv(f64::exp);
                    let da = &g - &(&soft * &gsum);
                    Self::accumulate(&mut grads, *a, da);
                }
                Op::SelectPerRow(a, idx) => {
                    let shape = self.value(*a).shape().to_vec();
                    let bs = shape[0];
                    let row = self.value(*a).len() / bs;
                    let mut dx = Arr::zeros(IxDyn(&shape));
                    {
                        let xs = dx.as_slice_mut().expect("contiguous");
                        let gs = g.as_slice().expect("contiguous");
                        for b in 0..bs {
                            xs[b * row + idx[b]] += gs[b];
                        }
                    }
                    Self::accumulate(&mut grads, *a, dx);
                }
                Op::Detach => {}
            }
        }
        Ok(Gradients { grads })
    }
}

/// Numerical verification helpers used by the test and acceptance suites.
pub mod check {
    /// Central finite difference of a scalar function of a flat parameter
    /// vector, evaluated coordinate by coordinate.
    pub fn central_diff<F: FnMut(&[f64]) -> f64>(x: &[f64], h: f64, mut f: F) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        let mut buf = x.to_vec();
        for i in 0..x.len() {
            let orig = buf[i];
            buf[i] = orig + h;
            let fp = f(&buf);
            buf[i] = orig - h;
            let fm = f(&buf);
            buf[i] = orig;
            out.push((fp - fm) / (2.0 * h));
        }
        out
    }

    /// Relative error with an absolute floor, symmetric in its arguments.
    pub fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }
}
