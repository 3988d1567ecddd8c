//! Tape of recorded operations with reverse-mode gradient propagation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Graph::backward`] walks it once in reverse.

use super::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Real> {
    Constant,
    Leaf,
    Param(ParamId),
    Conv2d { input: Var, kernel: Var, geom: ConvGeom },
    BiasAdd { input: Var, bias: Var },
    Relu(Var),
    Softplus(Var),
    AvgPoolGlobal(Var),
    Sum(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Square(Var),
    SliceRows { input: Var, start: usize },
    Reshape(Var),
    SquaredError { pred: Var, target: Vec<T>, scale: f64 },
    PairwiseHinge { counts: Var, pairs: Vec<(usize, usize)>, margin: f64 },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

#[derive(Debug)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, grad: &[T]) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(grad) {
                *a = T::from_f64(a.to_f64() + b.to_f64());
            }
        }
        None => *slot = Some(grad.to_vec()),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Constant, false, "constant")
    }

    /// A differentiable input whose gradient is kept on the node.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, true, "leaf")
    }

    /// Records the current value of a parameter; `backward` accumulates its
    /// gradient into the store.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        self.push(store.get(id).value.clone(), Op::Param(id), true, "param")
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.value(input).shape(), self.value(kernel).shape(), stride, pad)?;
        let out = conv2d_forward(self.value(input).data(), self.value(kernel).data(), &geom);
        let value = Tensor::new(geom.output_shape(), out)?;
        let rg = self.rg(input) || self.rg(kernel);
        self.push(value, Op::Conv2d { input, kernel, geom }, rg, "conv2d")
    }

    /// Adds a per-channel bias `[C]` to an `[N, C, H, W]` tensor.
    pub fn bias_add(&mut self, input: Var, bias: Var) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        let bshape = self.value(bias).shape();
        if shape.len() != 4 || bshape != [shape[1]] {
            return Err(Error::shape("bias_add", format!("bias {bshape:?} does not match input {shape:?}")));
        }
        let plane = shape[2] * shape[3];
        let b = self.value(bias).data().to_vec();
        let x = self.value(input).data();
        let out: Vec<T> =
            x.iter().enumerate().map(|(i, v)| T::from_f64(v.to_f64() + b[(i / plane) % shape[1]].to_f64())).collect();
        let rg = self.rg(input) || self.rg(bias);
        self.push(Tensor::new(shape, out)?, Op::BiasAdd { input, bias }, rg, "bias_add")
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op<T>, name: &'static str) -> Result<Var> {
        let src = self.value(x);
        let out = src.data().iter().map(|v| T::from_f64(f(v.to_f64()))).collect();
        let value = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.rg(x);
        self.push(value, op, rg, name)
    }

    /// Smallest `|x|` over the inputs of every recorded ReLU, or `None` if
    /// there are none. Finite differences with a step well below this margin
    /// cannot cross a kink.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => {
                    Some(self.value(x).data().iter().map(|v| v.to_f64().abs()).fold(f64::INFINITY, f64::min))
                }
                _ => None,
            })
            .reduce(f64::min)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, |v| v.max(0.0), Op::Relu(x), "relu")
    }

    /// `ln(1 + e^x)`, a smooth non-negative map.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, softplus, Op::Softplus(x), "softplus")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, |v| v * v, Op::Square(x), "square")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map_unary(x, |v| c * v, Op::Scale(x, c), "scale")
    }

    /// Adds the constant `c` to every element.
    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map_unary(x, |v| v + c, Op::Shift(x), "shift")
    }

    /// Mean over the spatial positions of `[N, F, H, W]`, giving `[N, F]`.
    pub fn avg_pool_global(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let shape = src.shape();
        if shape.len() != 4 {
            return Err(Error::shape("avg_pool_global", format!("expected 4-D input, got {shape:?}")));
        }
        let (n, f, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        let out = src
            .data()
            .chunks_exact(plane)
            .map(|c| T::from_f64(c.iter().map(|v| v.to_f64()).sum::<f64>() / plane as f64))
            .collect();
        let value = Tensor::new(vec![n, f], out)?;
        let rg = self.rg(x);
        self.push(value, Op::AvgPoolGlobal(x), rg, "avg_pool_global")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).sum_f64();
        let rg = self.rg(x);
        self.push(Tensor::scalar(T::from_f64(total)), Op::Sum(x), rg, "sum")
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op<T>, name: &'static str) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let out = va.data().iter().zip(vb.data()).map(|(x, y)| T::from_f64(f(x.to_f64(), y.to_f64()))).collect();
        let value = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    /// Rows `start..start + len` along the leading (batch) dimension.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        let shape = src.shape();
        if shape.is_empty() || len == 0 || start + len > shape[0] {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} out of range for {shape:?}", start + len),
            ));
        }
        let row = src.numel() / shape[0];
        let mut new_shape = shape.to_vec();
        new_shape[0] = len;
        let out = src.data()[start * row..(start + len) * row].to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(new_shape, out)?, Op::SliceRows { input: x, start }, rg, "slice_rows")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        self.push(value, Op::Reshape(x), rg, "reshape")
    }

    /// `scale * sum((pred - target)^2)` over every element.
    pub fn squared_error(&mut self, pred: Var, target: Vec<T>, scale: f64) -> Result<Var> {
        let p = self.value(pred);
        if p.numel() != target.len() {
            return Err(Error::shape(
                "squared_error",
                format!("prediction has {} values, target {}", p.numel(), target.len()),
            ));
        }
        let total: f64 = p
            .data()
            .iter()
            .zip(&target)
            .map(|(a, b)| {
                let d = a.to_f64() - b.to_f64();
                d * d
            })
            .sum();
        let rg = self.rg(pred);
        self.push(
            Tensor::scalar(T::from_f64(scale * total)),
            Op::SquaredError { pred, target, scale },
            rg,
            "squared_error",
        )
    }

    /// `sum over (hi, lo) of max(0, c[lo] - c[hi] + margin)` on a 1-D count
    /// vector, where `hi` is the row expected to hold the larger count.
    ///
    /// The subgradient at exactly zero is taken as zero.
    pub fn pairwise_hinge(&mut self, counts: Var, pairs: Vec<(usize, usize)>, margin: f64) -> Result<Var> {
        let c = self.value(counts);
        if c.shape().len() != 1 {
            return Err(Error::shape("pairwise_hinge", format!("expected 1-D counts, got {:?}", c.shape())));
        }
        let b = c.numel();
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= b || j >= b) {
            return Err(Error::PairOutOfRange(i, j, b));
        }
        let data = c.data();
        let total: f64 = pairs.iter().map(|&(hi, lo)| (data[lo].to_f64() - data[hi].to_f64() + margin).max(0.0)).sum();
        let rg = self.rg(counts);
        self.push(Tensor::scalar(T::from_f64(total)), Op::PairwiseHinge { counts, pairs, margin }, rg, "pairwise_hinge")
    }

    /// Propagates d(loss)/d(node) to every node reachable from `loss`.
    ///
    /// Parameter gradients are added to `params`; calling this twice without
    /// [`ParamStore::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: Var, params: &mut ParamStore<T>) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(shape));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![T::ONE]);

        for idx in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[idx].grad.take() else { continue };
            if !self.nodes[idx].requires_grad {
                self.nodes[idx].grad = Some(grad);
                continue;
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            let contributions = self.local_grads(idx, &grad, params)?;
            self.nodes[idx].grad = Some(grad);
            for (target, g) in contributions {
                if self.nodes[target.0].requires_grad {
                    add_into(&mut self.nodes[target.0].grad, &g);
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, g: &[T], params: &mut ParamStore<T>) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[idx];
        let map = |x: Var, f: &dyn Fn(f64, f64) -> f64| -> Vec<T> {
            self.value(x).data().iter().zip(g).map(|(v, gv)| T::from_f64(f(v.to_f64(), gv.to_f64()))).collect()
        };
        Ok(match &node.op {
            Op::Constant | Op::Leaf => Vec::new(),
            Op::Param(id) => {
                params.accumulate_grad(*id, g);
                Vec::new()
            }
            Op::Conv2d { input, kernel, geom } => {
                let (dx, dk) = conv2d_backward(
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    geom,
                    self.rg(*input),
                    self.rg(*kernel),
                );
                let mut out = Vec::new();
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                if let Some(dk) = dk {
                    out.push((*kernel, dk));
                }
                out
            }
            Op::BiasAdd { input, bias } => {
                let shape = node.value.shape();
                let (c, plane) = (shape[1], shape[2] * shape[3]);
                let mut db = vec![0.0f64; c];
                for (i, gv) in g.iter().enumerate() {
                    db[(i / plane) % c] += gv.to_f64();
                }
                vec![(*input, g.to_vec()), (*bias, db.into_iter().map(T::from_f64).collect())]
            }
            Op::Relu(x) => vec![(*x, map(*x, &|v, gv| if v > 0.0 { gv } else { 0.0 }))],
            Op::Softplus(x) => vec![(*x, map(*x, &|v, gv| gv * sigmoid(v)))],
            Op::Square(x) => vec![(*x, map(*x, &|v, gv| 2.0 * v * gv))],
            Op::Scale(x, c) => vec![(*x, g.iter().map(|gv| T::from_f64(c * gv.to_f64())).collect())],
            Op::Shift(x) => vec![(*x, g.to_vec())],
            Op::AvgPoolGlobal(x) => {
                let shape = self.value(*x).shape();
                let plane = shape[2] * shape[3];
                let dx = g
                    .iter()
                    .flat_map(|gv| std::iter::repeat_n(T::from_f64(gv.to_f64() / plane as f64), plane))
                    .collect();
                vec![(*x, dx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => vec![(*a, map(*b, &|v, gv| v * gv)), (*b, map(*a, &|v, gv| v * gv))],
            Op::SliceRows { input, start } => {
                let src = self.value(*input);
                let row = src.numel() / src.shape()[0];
                let mut dx = vec![T::ZERO; src.numel()];
                dx[start * row..start * row + g.len()].copy_from_slice(g);
                vec![(*input, dx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::SquaredError { pred, target, scale } => {
                let gv = g[0].to_f64();
                let dx = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(p, t)| T::from_f64(gv * scale * 2.0 * (p.to_f64() - t.to_f64())))
                    .collect();
                vec![(*pred, dx)]
            }
            Op::PairwiseHinge { counts, pairs, margin } => {
                let gv = g[0].to_f64();
                let c = self.value(*counts).data();
                let mut dc = vec![0.0f64; c.len()];
                for &(hi, lo) in pairs {
                    if c[lo].to_f64() - c[hi].to_f64() + margin > 0.0 {
                        dc[lo] += gv;
                        dc[hi] -= gv;
                    }
                }
                vec![(*counts, dc.into_iter().map(T::from_f64).collect())]
            }
        })
    }
}
