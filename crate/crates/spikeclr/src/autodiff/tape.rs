//! Reverse-mode autodiff over a flat tape. Forward ops execute eagerly and
//! append a node; `backward` walks the tape once in reverse id order (a
//! valid reverse topological order, since parents always precede children).

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels;
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

/// Forward behaviour of the spike nonlinearity. The backward pass uses the
/// same arctan-derivative surrogate in both modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateMode {
    /// Hard threshold: binary spikes, surrogate gradient.
    Spiking,
    /// Smoothed threshold: the whole network becomes differentiable, so
    /// finite differences can validate the backward pass end to end.
    Smooth,
}

enum Op {
    Leaf,
    Constant,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Scale(ValueId, f64),
    AddScalar(ValueId),
    /// out = x * coeff + y + offset, with coeff/offset fixed tensors
    /// (only coeff is needed for the backward pass).
    MulAddConst {
        x: ValueId,
        y: ValueId,
        coeff: Tensor,
    },
    AddBiasChannel(ValueId, ValueId),
    AddBiasRow(ValueId, ValueId),
    Matmul(ValueId, ValueId),
    Transpose2(ValueId),
    Conv2d {
        x: ValueId,
        w: ValueId,
        stride: usize,
        pad: usize,
    },
    SumPool2 {
        x: ValueId,
        k: usize,
    },
    GlobalAvgPool(ValueId),
    Relu(ValueId),
    Exp(ValueId),
    Log(ValueId),
    L2NormalizeRows(ValueId),
    Concat0(Vec<ValueId>),
    Slice0 {
        x: ValueId,
        start: usize,
    },
    SumAxis {
        x: ValueId,
        axis: usize,
    },
    MeanAxis {
        x: ValueId,
        axis: usize,
    },
    MeanAll(ValueId),
    RowLogSumExp(ValueId),
    LogSoftmaxRows(ValueId),
    SpikeSurrogate {
        x: ValueId,
        alpha: f64,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Per-leaf gradients produced by `Tape::backward`.
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, id: ValueId) -> Option<Tensor> {
        self.slots.get_mut(id.0).and_then(|s| s.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const DEAD_ROW_EPS: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> ValueId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn rg(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Trainable input; gradients are collected for it.
    pub fn leaf(&mut self, value: Tensor) -> ValueId {
        self.push(value, true, Op::Leaf)
    }

    /// Fixed input; backward never flows into it.
    pub fn constant(&mut self, value: Tensor) -> ValueId {
        self.push(value, false, Op::Constant)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> ValueId {
        let v = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(v, rg, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: ValueId, c: f64) -> ValueId {
        let v = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(v, rg, Op::AddScalar(x))
    }

    /// Fused `x * coeff + y + offset` with constant `coeff` and `offset`.
    /// Keeps recurrent state updates to a single node.
    pub fn mul_add_const(
        &mut self,
        x: ValueId,
        y: ValueId,
        coeff: Tensor,
        offset: Tensor,
    ) -> Result<ValueId> {
        let xv = self.value(x);
        if xv.shape() != coeff.shape() || xv.shape() != offset.shape() {
            return Err(Error::shape(
                "mul_add_const",
                format!(
                    "x {:?}, coeff {:?}, offset {:?}",
                    xv.shape(),
                    coeff.shape(),
                    offset.shape()
                ),
            ));
        }
        let yv = self.value(y);
        if yv.shape() != xv.shape() {
            return Err(Error::shape(
                "mul_add_const",
                format!("x {:?} vs y {:?}", xv.shape(), yv.shape()),
            ));
        }
        let mut v = Tensor::zeros(xv.shape());
        for (i, o) in v.data_mut().iter_mut().enumerate() {
            *o = xv.data()[i] * coeff.data()[i] + yv.data()[i] + offset.data()[i];
        }
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(v, rg, Op::MulAddConst { x, y, coeff }))
    }

    pub fn add_bias_channel(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if xv.shape().len() != 4 || bv.shape().len() != 1 || bv.shape()[0] != xv.shape()[1] {
            return Err(Error::shape(
                "add_bias_channel",
                format!("x {:?}, bias {:?}", xv.shape(), bv.shape()),
            ));
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let plane = xv.shape()[2] * xv.shape()[3];
        let mut v = xv.clone();
        for ni in 0..n {
            for ci in 0..c {
                let b = bv.data()[ci];
                for o in &mut v.data_mut()[(ni * c + ci) * plane..(ni * c + ci + 1) * plane] {
                    *o += b;
                }
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(v, rg, Op::AddBiasChannel(x, bias)))
    }

    pub fn add_bias_row(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if xv.shape().len() != 2 || bv.shape().len() != 1 || bv.shape()[0] != xv.shape()[1] {
            return Err(Error::shape(
                "add_bias_row",
                format!("x {:?}, bias {:?}", xv.shape(), bv.shape()),
            ));
        }
        let d = xv.shape()[1];
        let mut v = xv.clone();
        for (i, o) in v.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % d];
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(v, rg, Op::AddBiasRow(x, bias)))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, rg, Op::Matmul(a, b)))
    }

    pub fn transpose2(&mut self, x: ValueId) -> Result<ValueId> {
        let v = kernels::transpose2(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(v, rg, Op::Transpose2(x)))
    }

    pub fn conv2d(&mut self, x: ValueId, w: ValueId, stride: usize, pad: usize) -> Result<ValueId> {
        let v = kernels::conv2d_forward(self.value(x), self.value(w), stride, pad)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(v, rg, Op::Conv2d { x, w, stride, pad }))
    }

    pub fn sum_pool2(&mut self, x: ValueId, k: usize) -> Result<ValueId> {
        let v = kernels::sum_pool2_forward(self.value(x), k)?;
        let rg = self.rg(x);
        Ok(self.push(v, rg, Op::SumPool2 { x, k }))
    }

    pub fn global_avg_pool(&mut self, x: ValueId) -> Result<ValueId> {
        let xv = self.value(x);
        if xv.shape().len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("{:?}", xv.shape())));
        }
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let mut v = Tensor::zeros(&[n, c]);
        for p in 0..n * c {
            let s: f64 = xv.data()[p * h * w..(p + 1) * h * w].iter().sum();
            v.data_mut()[p] = s / (h * w) as f64;
        }
        let rg = self.rg(x);
        Ok(self.push(v, rg, Op::GlobalAvgPool(x)))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let v = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(v, rg, Op::Relu(x))
    }

    pub fn exp(&mut self, x: ValueId) -> ValueId {
        let v = self.value(x).map(f64::exp);
        let rg = self.rg(x);
        self.push(v, rg, Op::Exp(x))
    }

    pub fn log(&mut self, x: ValueId) -> ValueId {
        let v = self.value(x).map(f64::ln);
        let rg = self.rg(x);
        self.push(v, rg, Op::Log(x))
    }

    /// Normalize each row to unit L2 norm. Rows with norm below 1e-12 map
    /// to the first basis vector and receive zero gradient.
    pub fn l2_normalize_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(Error::shape("l2_normalize_rows", format!("{:?}", xv.shape())));
        }
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        let mut v = Tensor::zeros(&[n, d]);
        for i in 0..n {
            let row = &xv.data()[i * d..(i + 1) * d];
            let norm = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
            let out = &mut v.data_mut()[i * d..(i + 1) * d];
            if norm < DEAD_ROW_EPS {
                out[0] = 1.0;
            } else {
                for (o, &r) in out.iter_mut().zip(row) {
                    *o = r / norm;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(v, rg, Op::L2NormalizeRows(x)))
    }

    /// Number of rows of a `[N, D]` value whose L2 norm falls below the
    /// dead-row threshold used by `l2_normalize_rows`.
    pub fn count_dead_rows(&self, x: ValueId) -> usize {
        let xv = self.value(x);
        let d = xv.shape()[xv.shape().len() - 1];
        xv.data()
            .chunks(d)
            .filter(|row| row.iter().map(|&v| v * v).sum::<f64>().sqrt() < DEAD_ROW_EPS)
            .count()
    }

    pub fn concat0(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::shape("concat0", "no inputs".to_string()));
        }
        let tail = self.value(parts[0]).shape()[1..].to_vec();
        let mut rows = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s[1..] != tail[..] {
                return Err(Error::shape(
                    "concat0",
                    format!("trailing dims differ: {:?} vs {:?}", &s[1..], tail),
                ));
            }
            rows += s[0];
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let mut data = Vec::with_capacity(shape.iter().product());
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Concat0(parts.to_vec())))
    }

    pub fn slice0(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let xv = self.value(x);
        if xv.shape().is_empty() || start + len > xv.shape()[0] {
            return Err(Error::shape(
                "slice0",
                format!("rows {}..{} of {:?}", start, start + len, xv.shape()),
            ));
        }
        let inner: usize = xv.shape()[1..].iter().product();
        let mut shape = vec![len];
        shape.extend_from_slice(&xv.shape()[1..]);
        let data = xv.data()[start * inner..(start + len) * inner].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Slice0 { x, start }))
    }

    fn axis_reduce(&mut self, x: ValueId, axis: usize, mean: bool) -> Result<ValueId> {
        let xv = self.value(x);
        if axis >= xv.shape().len() {
            return Err(Error::shape(
                "axis_reduce",
                format!("axis {} of {:?}", axis, xv.shape()),
            ));
        }
        let outer: usize = xv.shape()[..axis].iter().product();
        let mid = xv.shape()[axis];
        let inner: usize = xv.shape()[axis + 1..].iter().product();
        let mut shape: Vec<usize> = xv.shape()[..axis].to_vec();
        shape.extend_from_slice(&xv.shape()[axis + 1..]);
        if shape.is_empty() {
            shape.push(1);
        }
        let mut out = Tensor::zeros(&shape);
        for o in 0..outer {
            for m in 0..mid {
                let src = &xv.data()[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                let dst = &mut out.data_mut()[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            let inv = 1.0 / mid as f64;
            for v in out.data_mut() {
                *v *= inv;
            }
        }
        let rg = self.rg(x);
        let op = if mean {
            Op::MeanAxis { x, axis }
        } else {
            Op::SumAxis { x, axis }
        };
        Ok(self.push(out, rg, op))
    }

    pub fn sum_axis(&mut self, x: ValueId, axis: usize) -> Result<ValueId> {
        self.axis_reduce(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: ValueId, axis: usize) -> Result<ValueId> {
        self.axis_reduce(x, axis, true)
    }

    pub fn mean_all(&mut self, x: ValueId) -> ValueId {
        let xv = self.value(x);
        let v = Tensor::scalar(xv.sum() / xv.numel() as f64);
        let rg = self.rg(x);
        self.push(v, rg, Op::MeanAll(x))
    }

    /// Per-row log(sum(exp(x))) with max subtraction, `[N, D] -> [N]`.
    pub fn row_logsumexp(&mut self, x: ValueId) -> Result<ValueId> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(Error::shape("row_logsumexp", format!("{:?}", xv.shape())));
        }
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        let mut v = Tensor::zeros(&[n]);
        for i in 0..n {
            let row = &xv.data()[i * d..(i + 1) * d];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let s: f64 = row.iter().map(|&r| (r - m).exp()).sum();
            v.data_mut()[i] = m + s.ln();
        }
        let rg = self.rg(x);
        Ok(self.push(v, rg, Op::RowLogSumExp(x)))
    }

    pub fn log_softmax_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(Error::shape("log_softmax_rows", format!("{:?}", xv.shape())));
        }
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        let mut v = xv.clone();
        for i in 0..n {
            let row = &mut v.data_mut()[i * d..(i + 1) * d];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|&r| (r - m).exp()).sum::<f64>().ln();
            for r in row.iter_mut() {
                *r -= lse;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(v, rg, Op::LogSoftmaxRows(x)))
    }

    /// Spike nonlinearity on centered membrane potential (u - v_th).
    /// Spiking mode thresholds with the tie convention spike(0) = 1;
    /// smooth mode applies (1/pi) * atan(pi * alpha * x) + 1/2.
    pub fn spike_surrogate(&mut self, x: ValueId, alpha: f64, mode: SurrogateMode) -> Result<ValueId> {
        if !(alpha > 0.0) {
            return Err(Error::shape(
                "spike_surrogate",
                format!("alpha must be positive, got {}", alpha),
            ));
        }
        let v = match mode {
            SurrogateMode::Spiking => self.value(x).map(|v| if v >= 0.0 { 1.0 } else { 0.0 }),
            SurrogateMode::Smooth => self
                .value(x)
                .map(|v| (std::f64::consts::PI * alpha * v).atan() / std::f64::consts::PI + 0.5),
        };
        let rg = self.rg(x);
        Ok(self.push(v, rg, Op::SpikeSurrogate { x, alpha }))
    }

    fn acc(&self, slots: &mut [Option<Tensor>], id: ValueId, delta: Tensor) {
        if !self.rg(id) {
            return;
        }
        match &mut slots[id.0] {
            Some(t) => t.add_assign(&delta).expect("gradient shape mismatch"),
            slot => *slot = Some(delta),
        }
    }

    /// Reverse pass from a scalar loss. Returns per-leaf gradients.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, shape is {:?}", ln.value.shape()),
            ));
        }
        let mut slots: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        slots.resize_with(loss.0 + 1, || None);
        if !ln.requires_grad {
            return Ok(Gradients { slots });
        }
        slots[loss.0] = Some(Tensor::full(ln.value.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                slots[id] = None;
                continue;
            }
            let Some(g) = slots[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    slots[id] = Some(g);
                }
                Op::Constant => {}
                Op::Add(a, b) => {
                    self.acc(&mut slots, *a, g.clone());
                    self.acc(&mut slots, *b, g);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut slots, *a, g.clone());
                    self.acc(&mut slots, *b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let da = g.zip_map(self.value(*b), "mul_bwd", |gv, bv| gv * bv)?;
                        self.acc(&mut slots, *a, da);
                    }
                    if self.rg(*b) {
                        let db = g.zip_map(self.value(*a), "mul_bwd", |gv, av| gv * av)?;
                        self.acc(&mut slots, *b, db);
                    }
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    self.acc(&mut slots, *x, g.map(|v| v * c));
                }
                Op::AddScalar(x) => {
                    self.acc(&mut slots, *x, g);
                }
                Op::MulAddConst { x, y, coeff } => {
                    if self.rg(*x) {
                        let dx = g.zip_map(coeff, "mul_add_const_bwd", |gv, cv| gv * cv)?;
                        self.acc(&mut slots, *x, dx);
                    }
                    self.acc(&mut slots, *y, g);
                }
                Op::AddBiasChannel(x, bias) => {
                    if self.rg(*bias) {
                        let xs = node.value.shape();
                        let (n, c) = (xs[0], xs[1]);
                        let plane = xs[2] * xs[3];
                        let mut db = Tensor::zeros(&[c]);
                        for ni in 0..n {
                            for ci in 0..c {
                                let s: f64 = g.data()
                                    [(ni * c + ci) * plane..(ni * c + ci + 1) * plane]
                                    .iter()
                                    .sum();
                                db.data_mut()[ci] += s;
                            }
                        }
                        self.acc(&mut slots, *bias, db);
                    }
                    self.acc(&mut slots, *x, g);
                }
                Op::AddBiasRow(x, bias) => {
                    if self.rg(*bias) {
                        let d = node.value.shape()[1];
                        let mut db = Tensor::zeros(&[d]);
                        for (i, &gv) in g.data().iter().enumerate() {
                            db.data_mut()[i % d] += gv;
                        }
                        self.acc(&mut slots, *bias, db);
                    }
                    self.acc(&mut slots, *x, g);
                }
                Op::Matmul(a, b) => {
                    if self.rg(*a) {
                        let bt = kernels::transpose2(self.value(*b))?;
                        self.acc(&mut slots, *a, kernels::matmul(&g, &bt)?);
                    }
                    if self.rg(*b) {
                        let at = kernels::transpose2(self.value(*a))?;
                        self.acc(&mut slots, *b, kernels::matmul(&at, &g)?);
                    }
                }
                Op::Transpose2(x) => {
                    self.acc(&mut slots, *x, kernels::transpose2(&g)?);
                }
                Op::Conv2d { x, w, stride, pad } => {
                    if self.rg(*x) {
                        let gx = kernels::conv2d_backward_input(
                            self.value(*x).shape(),
                            self.value(*w),
                            &g,
                            *stride,
                            *pad,
                        );
                        self.acc(&mut slots, *x, gx);
                    }
                    if self.rg(*w) {
                        let gw = kernels::conv2d_backward_weight(
                            self.value(*x),
                            self.value(*w).shape(),
                            &g,
                            *stride,
                            *pad,
                        );
                        self.acc(&mut slots, *w, gw);
                    }
                }
                Op::SumPool2 { x, k } => {
                    let gx = kernels::sum_pool2_backward(self.value(*x).shape(), &g, *k);
                    self.acc(&mut slots, *x, gx);
                }
                Op::GlobalAvgPool(x) => {
                    let xs = self.value(*x).shape();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let inv = 1.0 / (h * w) as f64;
                    let mut gx = Tensor::zeros(xs);
                    for p in 0..n * c {
                        let gv = g.data()[p] * inv;
                        for o in &mut gx.data_mut()[p * h * w..(p + 1) * h * w] {
                            *o = gv;
                        }
                    }
                    self.acc(&mut slots, *x, gx);
                }
                Op::Relu(x) => {
                    let dx = g.zip_map(self.value(*x), "relu_bwd", |gv, xv| {
                        if xv > 0.0 {
                            gv
                        } else {
                            0.0
                        }
                    })?;
                    self.acc(&mut slots, *x, dx);
                }
                Op::Exp(x) => {
                    let dx = g.zip_map(&node.value, "exp_bwd", |gv, ov| gv * ov)?;
                    self.acc(&mut slots, *x, dx);
                }
                Op::Log(x) => {
                    let dx = g.zip_map(self.value(*x), "log_bwd", |gv, xv| gv / xv)?;
                    self.acc(&mut slots, *x, dx);
                }
                Op::L2NormalizeRows(x) => {
                    let xv = self.value(*x);
                    let (n, d) = (xv.shape()[0], xv.shape()[1]);
                    let mut gx = Tensor::zeros(xv.shape());
                    for i in 0..n {
                        let row = &xv.data()[i * d..(i + 1) * d];
                        let norm = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
                        if norm < DEAD_ROW_EPS {
                            continue;
                        }
                        let out_row = &node.value.data()[i * d..(i + 1) * d];
                        let g_row = &g.data()[i * d..(i + 1) * d];
                        let dot: f64 = g_row.iter().zip(out_row).map(|(&a, &b)| a * b).sum();
                        let dst = &mut gx.data_mut()[i * d..(i + 1) * d];
                        for j in 0..d {
                            dst[j] = (g_row[j] - dot * out_row[j]) / norm;
                        }
                    }
                    self.acc(&mut slots, *x, gx);
                }
                Op::Concat0(parts) => {
                    let inner: usize = node.value.shape()[1..].iter().product();
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).shape()[0];
                        if self.rg(p) {
                            let data = g.data()[offset * inner..(offset + rows) * inner].to_vec();
                            let dp = Tensor::new(self.value(p).shape().to_vec(), data)?;
                            self.acc(&mut slots, p, dp);
                        }
                        offset += rows;
                    }
                }
                Op::Slice0 { x, start } => {
                    let xv = self.value(*x);
                    let inner: usize = xv.shape()[1..].iter().product();
                    let mut gx = Tensor::zeros(xv.shape());
                    let rows = node.value.shape()[0];
                    gx.data_mut()[start * inner..(start + rows) * inner].copy_from_slice(g.data());
                    self.acc(&mut slots, *x, gx);
                }
                Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                    let xv = self.value(*x);
                    let outer: usize = xv.shape()[..*axis].iter().product();
                    let mid = xv.shape()[*axis];
                    let inner: usize = xv.shape()[*axis + 1..].iter().product();
                    let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                        1.0 / mid as f64
                    } else {
                        1.0
                    };
                    let mut gx = Tensor::zeros(xv.shape());
                    for o in 0..outer {
                        let src = &g.data()[o * inner..(o + 1) * inner];
                        for m in 0..mid {
                            let dst = &mut gx.data_mut()
                                [(o * mid + m) * inner..(o * mid + m + 1) * inner];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d = s * scale;
                            }
                        }
                    }
                    self.acc(&mut slots, *x, gx);
                }
                Op::MeanAll(x) => {
                    let xv = self.value(*x);
                    let gv = g.data()[0] / xv.numel() as f64;
                    self.acc(&mut slots, *x, Tensor::full(xv.shape(), gv));
                }
                Op::RowLogSumExp(x) => {
                    let xv = self.value(*x);
                    let (n, d) = (xv.shape()[0], xv.shape()[1]);
                    let mut gx = Tensor::zeros(xv.shape());
                    for i in 0..n {
                        let lse = node.value.data()[i];
                        let gv = g.data()[i];
                        let row = &xv.data()[i * d..(i + 1) * d];
                        let dst = &mut gx.data_mut()[i * d..(i + 1) * d];
                        for j in 0..d {
                            dst[j] = gv * (row[j] - lse).exp();
                        }
                    }
                    self.acc(&mut slots, *x, gx);
                }
                Op::LogSoftmaxRows(x) => {
                    let (n, d) = (node.value.shape()[0], node.value.shape()[1]);
                    let mut gx = Tensor::zeros(node.value.shape());
                    for i in 0..n {
                        let g_row = &g.data()[i * d..(i + 1) * d];
                        let gsum: f64 = g_row.iter().sum();
                        let out_row = &node.value.data()[i * d..(i + 1) * d];
                        let dst = &mut gx.data_mut()[i * d..(i + 1) * d];
                        for j in 0..d {
                            dst[j] = g_row[j] - out_row[j].exp() * gsum;
                        }
                    }
                    self.acc(&mut slots, *x, gx);
                }
                Op::SpikeSurrogate { x, alpha } => {
                    let a = *alpha;
                    let dx = g.zip_map(self.value(*x), "spike_bwd", |gv, xv| {
                        let z = std::f64::consts::PI * a * xv;
                        gv * a / (1.0 + z * z)
                    })?;
                    self.acc(&mut slots, *x, dx);
                }
            }
        }
        Ok(Gradients { slots })
    }
}
