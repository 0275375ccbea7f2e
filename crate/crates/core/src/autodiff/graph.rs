use std::f64::consts::PI;

use super::tensor::{broadcast_dims, broadcast_index, numel, split_axis, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Log,
    Exp,
    Sigmoid,
    LogSigmoid,
    Relu,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    LogSumExp,
}

/// Axis along which [`Graph::normalize`] standardizes a 2-D input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Per feature, over the rows of the batch.
    Batch,
    /// Per row, over its features.
    Layer,
}

pub const NORM_EPS: f64 = 1e-6;
pub const NORM_MOMENTUM: f64 = 0.99;
const MIN_VARIANCE: f64 = 1e-12;

/// Exponential moving averages of batch statistics for one normalization site.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        RunningStats {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Scale(Var, f64),
    Offset(Var),
    GaussPdf { x: Var, mean: Var, var: Var },
    GaussLogPdf { x: Var, mean: Var, var: Var },
    Reduce(ReduceOp, Var, usize),
    SumAll(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    NormalizeSum(Var, usize),
    Normalize {
        input: Var,
        mode: NormMode,
        inv_std: Vec<f64>,
        fixed: bool,
    },
    Concat(Vec<Var>, usize),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    ClampAbsMin(Var, f64),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run tape for reverse-mode differentiation.
///
/// Every operation appends a node whose inputs were recorded earlier, so the
/// node list is already in topological order and [`Graph::backward`] is a
/// single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    dims: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.dims[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.dims[var.0]))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable leaf; gradients are tracked through it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; no gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Which side of its kink every input to a piecewise op lies on
    /// (`relu`: `x > 0`; `clamp_abs_min`: `|x| >= eps`), in tape order.
    /// Two points with equal patterns lie on the same smooth piece.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Unary(UnaryOp::Relu, a) => out.extend(self.value(a).data().iter().map(|&x| x > 0.0)),
                Op::ClampAbsMin(a, eps) => out.extend(self.value(a).data().iter().map(|&x| x.abs() >= eps)),
                _ => {}
            }
        }
        out
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a), self.dims(b));
        if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
            return Err(Error::shape(format!("matmul of {ad:?} by {bd:?}")));
        }
        let (m, k, n) = (ad[0], ad[1], bd[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), needs))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let out_dims = broadcast_dims(self.dims(a), self.dims(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        if op == BinaryOp::Div && bv.data().contains(&0.0) {
            return Err(Error::domain("division by zero"));
        }
        let f = |x: f64, y: f64| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        let data: Vec<f64> = if av.dims() == bv.dims() {
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            let ia = broadcast_index(&out_dims, av.dims());
            let ib = broadcast_index(&out_dims, bv.dims());
            ia.iter()
                .zip(&ib)
                .map(|(&i, &j)| f(av.data()[i], bv.data()[j]))
                .collect()
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&out_dims, data)?, Op::Binary(op, a, b), needs))
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

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let av = self.value(a);
        if op == UnaryOp::Log && av.data().iter().any(|&x| !(x > 0.0)) {
            return Err(Error::domain("log of non-positive value"));
        }
        let out = av.map(|x| match op {
            UnaryOp::Neg => -x,
            UnaryOp::Log => x.ln(),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::LogSigmoid => log_sigmoid(x),
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Square => x * x,
        });
        let needs = self.needs(a);
        Ok(self.push(out, Op::Unary(op, a), needs))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    /// `log(sigmoid(a))`, evaluated without overflow.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::LogSigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let needs = self.needs(a);
        self.push(out, Op::Scale(a, factor), needs)
    }

    pub fn offset(&mut self, a: Var, amount: f64) -> Var {
        let out = self.value(a).map(|x| x + amount);
        let needs = self.needs(a);
        self.push(out, Op::Offset(a), needs)
    }

    /// Gaussian density `N(x; mean, var)`, broadcasting all three operands.
    pub fn gauss_pdf(&mut self, x: Var, mean: Var, var: Var) -> Result<Var> {
        let (dims, values) = self.gauss_eval(x, mean, var, |lp| lp.exp())?;
        let needs = self.needs(x) || self.needs(mean) || self.needs(var);
        Ok(self.push(
            Tensor::new(&dims, values)?,
            Op::GaussPdf { x, mean, var },
            needs,
        ))
    }

    /// Log of [`Graph::gauss_pdf`].
    pub fn gauss_log_pdf(&mut self, x: Var, mean: Var, var: Var) -> Result<Var> {
        let (dims, values) = self.gauss_eval(x, mean, var, |lp| lp)?;
        let needs = self.needs(x) || self.needs(mean) || self.needs(var);
        Ok(self.push(
            Tensor::new(&dims, values)?,
            Op::GaussLogPdf { x, mean, var },
            needs,
        ))
    }

    fn gauss_eval(
        &self,
        x: Var,
        mean: Var,
        var: Var,
        finish: impl Fn(f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        if self.value(var).data().iter().any(|&v| !(v > 0.0)) {
            return Err(Error::domain("gaussian variance must be positive"));
        }
        let dims = broadcast_dims(self.dims(x), self.dims(mean))?;
        let dims = broadcast_dims(&dims, self.dims(var))?;
        let [ix, im, iv] = [x, mean, var].map(|t| broadcast_index(&dims, self.dims(t)));
        let (xv, mv, vv) = (
            self.value(x).data(),
            self.value(mean).data(),
            self.value(var).data(),
        );
        let values = (0..numel(&dims))
            .map(|e| finish(gauss_log_density(xv[ix[e]], mv[im[e]], vv[iv[e]])))
            .collect();
        Ok((dims, values))
    }

    /// Keeps `|a| >= eps`, preserving sign (zero maps to `+eps`).
    pub fn clamp_abs_min(&mut self, a: Var, eps: f64) -> Var {
        let out = self.value(a).map(|x| {
            if x.abs() >= eps {
                x
            } else if x < 0.0 {
                -eps
            } else {
                eps
            }
        });
        let needs = self.needs(a);
        self.push(out, Op::ClampAbsMin(a, eps), needs)
    }

    // ---- reductions -----------------------------------------------------

    /// Reduces over `axis`, removing it from the shape.
    pub fn reduce(&mut self, op: ReduceOp, a: Var, axis: usize) -> Result<Var> {
        let dims = self.dims(a).to_vec();
        let (outer, len, inner) = split_axis(&dims, axis)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| src[(o * len + k) * inner + i];
                out[o * inner + i] = match op {
                    ReduceOp::Sum => (0..len).map(at).sum(),
                    ReduceOp::Mean => (0..len).map(at).sum::<f64>() / len as f64,
                    ReduceOp::LogSumExp => {
                        let max = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
                        if max == f64::NEG_INFINITY {
                            max
                        } else {
                            max + (0..len).map(|k| (at(k) - max).exp()).sum::<f64>().ln()
                        }
                    }
                };
            }
        }
        let mut out_dims = dims;
        out_dims.remove(axis);
        if out_dims.is_empty() {
            out_dims.push(1);
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(&out_dims, out)?, Op::Reduce(op, a, axis), needs))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceOp::Sum, a, axis)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceOp::Mean, a, axis)
    }

    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceOp::LogSumExp, a, axis)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(total), Op::SumAll(a), needs)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    // ---- normalizations -------------------------------------------------

    /// Softmax along `axis`, computed after subtracting the per-slice maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = softmax_values(self.value(a), axis, false)?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::Softmax(a, axis), needs))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = softmax_values(self.value(a), axis, true)?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::LogSoftmax(a, axis), needs))
    }

    /// Divides non-negative values by their sum along `axis`. Slices that sum
    /// to zero become uniform (and pass no gradient).
    pub fn normalize_sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        if av.data().iter().any(|&x| x < 0.0) {
            return Err(Error::domain("normalize_sum of negative value"));
        }
        let (outer, len, inner) = split_axis(av.dims(), axis)?;
        let src = av.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let total: f64 = (0..len).map(|k| src[idx(k)]).sum();
                for k in 0..len {
                    out[idx(k)] = if total > 0.0 {
                        src[idx(k)] / total
                    } else {
                        1.0 / len as f64
                    };
                }
            }
        }
        let out = Tensor::new(av.dims(), out)?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::NormalizeSum(a, axis), needs))
    }

    /// Standardizes a 2-D `[rows, features]` input to zero mean and unit
    /// variance (no scale or shift; compose those with [`Graph::mul`] and
    /// [`Graph::add`]).
    ///
    /// Batch mode with `training` computes batch statistics and, when
    /// `running` is supplied as `(stats, momentum)`, folds them in as
    /// `stats = momentum * stats + (1 - momentum) * batch`. Batch mode
    /// without `training` uses the running stats as fixed statistics.
    /// Layer mode ignores both.
    pub fn normalize(
        &mut self,
        a: Var,
        mode: NormMode,
        running: Option<(&mut RunningStats, f64)>,
        training: bool,
    ) -> Result<Var> {
        let av = self.value(a);
        if av.dims().len() != 2 {
            return Err(Error::shape(format!(
                "normalize expects 2-D input, got {:?}",
                av.dims()
            )));
        }
        let (rows, cols) = (av.dims()[0], av.dims()[1]);
        let src = av.data();
        let mut out = vec![0.0; src.len()];
        let (inv_std, fixed) = match mode {
            NormMode::Layer => {
                let mut inv = Vec::with_capacity(rows);
                for r in 0..rows {
                    let row = &src[r * cols..(r + 1) * cols];
                    let (mean, var) = moments(row.iter().copied());
                    let s = 1.0 / (var.max(MIN_VARIANCE) + NORM_EPS).sqrt();
                    for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                        *o = (x - mean) * s;
                    }
                    inv.push(s);
                }
                (inv, false)
            }
            NormMode::Batch => {
                let (means, vars, fixed) = if training {
                    if rows < 2 {
                        return Err(Error::contract(
                            "batch normalization needs at least two rows while training",
                        ));
                    }
                    let mut means = Vec::with_capacity(cols);
                    let mut vars = Vec::with_capacity(cols);
                    for c in 0..cols {
                        let (m, v) = moments((0..rows).map(|r| src[r * cols + c]));
                        means.push(m);
                        vars.push(v);
                    }
                    if let Some((rs, momentum)) = running {
                        if rs.mean.len() != cols {
                            return Err(Error::shape("running stats width mismatch"));
                        }
                        for c in 0..cols {
                            rs.mean[c] = momentum * rs.mean[c] + (1.0 - momentum) * means[c];
                            rs.var[c] = momentum * rs.var[c] + (1.0 - momentum) * vars[c];
                        }
                    }
                    (means, vars, false)
                } else {
                    let (rs, _) = running.ok_or_else(|| {
                        Error::contract("batch normalization in eval mode needs running stats")
                    })?;
                    if rs.mean.len() != cols {
                        return Err(Error::shape("running stats width mismatch"));
                    }
                    (rs.mean.clone(), rs.var.clone(), true)
                };
                let inv: Vec<f64> = vars
                    .iter()
                    .map(|v| 1.0 / (v.max(MIN_VARIANCE) + NORM_EPS).sqrt())
                    .collect();
                for r in 0..rows {
                    for c in 0..cols {
                        out[r * cols + c] = (src[r * cols + c] - means[c]) * inv[c];
                    }
                }
                (inv, fixed)
            }
        };
        let out = Tensor::new(&[rows, cols], out)?;
        let needs = self.needs(a);
        Ok(self.push(
            out,
            Op::Normalize {
                input: a,
                mode,
                inv_std,
                fixed,
            },
            needs,
        ))
    }

    // ---- shape manipulation ---------------------------------------------

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(dims)?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::Reshape(a), needs))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of nothing"))?;
        let base = self.dims(*first).to_vec();
        let (outer, _, inner) = split_axis(&base, axis)?;
        let mut total_len = 0;
        for &p in parts {
            let d = self.dims(p);
            if d.len() != base.len()
                || d.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::shape(format!("concat of {base:?} with {d:?}")));
            }
            total_len += d[axis];
        }
        let mut out = Vec::with_capacity(outer * total_len * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.dims(p)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut dims = base;
        dims[axis] = total_len;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(&dims, out)?, Op::Concat(parts.to_vec(), axis), needs))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let dims = self.dims(a).to_vec();
        let (outer, len, inner) = split_axis(&dims, axis)?;
        if start >= end || end > len {
            return Err(Error::shape(format!(
                "slice {start}..{end} of axis with length {len}"
            )));
        }
        let src = self.value(a).data();
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut out_dims = dims;
        out_dims[axis] = width;
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(&out_dims, out)?,
            Op::Slice {
                input: a,
                axis,
                start,
            },
            needs,
        ))
    }

    // ---- reverse sweep --------------------------------------------------

    /// Backpropagates from a scalar `loss` to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.dims(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.dims(loss), vec![1.0])?);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            dims: self.nodes.iter().map(|n| n.value.dims().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, contribution: Tensor) {
        if !self.needs(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Sums `full` (shaped like `out_dims`) down onto the shape of `target`.
    fn unbroadcast(&self, target: Var, out_dims: &[usize], full: Vec<f64>) -> Tensor {
        let tdims = self.dims(target);
        if tdims == out_dims {
            return Tensor::new(tdims, full).expect("same shape");
        }
        let idx = broadcast_index(out_dims, tdims);
        let mut acc = vec![0.0; numel(tdims)];
        for (&i, v) in idx.iter().zip(full) {
            acc[i] += v;
        }
        Tensor::new(tdims, acc).expect("target shape")
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &self.nodes[id].value;
        let gd = g.data();
        match &self.nodes[id].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.dims(a)[0], self.dims(a)[1]);
                let n = self.dims(b)[1];
                if self.needs(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, self.value(b).data(), true, &mut da);
                    self.accumulate(grads, a, Tensor::new(&[m, k], da)?);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(a).data(), true, gd, false, &mut db);
                    self.accumulate(grads, b, Tensor::new(&[k, n], db)?);
                }
            }
            &Op::Binary(op, a, b) => {
                let dims = out.dims();
                let (av, bv) = (self.value(a), self.value(b));
                let same = av.dims() == dims && bv.dims() == dims;
                let (ia, ib) = if same {
                    (Vec::new(), Vec::new())
                } else {
                    (broadcast_index(dims, av.dims()), broadcast_index(dims, bv.dims()))
                };
                let x = |e: usize| if same { av.data()[e] } else { av.data()[ia[e]] };
                let y = |e: usize| if same { bv.data()[e] } else { bv.data()[ib[e]] };
                if self.needs(a) {
                    let full: Vec<f64> = (0..gd.len())
                        .map(|e| match op {
                            BinaryOp::Add | BinaryOp::Sub => gd[e],
                            BinaryOp::Mul => gd[e] * y(e),
                            BinaryOp::Div => gd[e] / y(e),
                        })
                        .collect();
                    let t = self.unbroadcast(a, dims, full);
                    self.accumulate(grads, a, t);
                }
                if self.needs(b) {
                    let full: Vec<f64> = (0..gd.len())
                        .map(|e| match op {
                            BinaryOp::Add => gd[e],
                            BinaryOp::Sub => -gd[e],
                            BinaryOp::Mul => gd[e] * x(e),
                            BinaryOp::Div => -gd[e] * x(e) / (y(e) * y(e)),
                        })
                        .collect();
                    let t = self.unbroadcast(b, dims, full);
                    self.accumulate(grads, b, t);
                }
            }
            &Op::Unary(op, a) => {
                let xs = self.value(a).data();
                let ys = out.data();
                let d: Vec<f64> = (0..gd.len())
                    .map(|e| {
                        let (x, y) = (xs[e], ys[e]);
                        gd[e]
                            * match op {
                                UnaryOp::Neg => -1.0,
                                UnaryOp::Log => 1.0 / x,
                                UnaryOp::Exp => y,
                                UnaryOp::Sigmoid => y * (1.0 - y),
                                UnaryOp::LogSigmoid => sigmoid(-x),
                                UnaryOp::Relu => {
                                    if x > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                UnaryOp::Square => 2.0 * x,
                            }
                    })
                    .collect();
                self.accumulate(grads, a, Tensor::new(out.dims(), d)?);
            }
            &Op::Scale(a, factor) => {
                self.accumulate(grads, a, g.map(|v| v * factor));
            }
            &Op::Offset(a) => {
                self.accumulate(grads, a, g.clone());
            }
            &Op::GaussPdf { x, mean, var } | &Op::GaussLogPdf { x, mean, var } => {
                let log_form = matches!(self.nodes[id].op, Op::GaussLogPdf { .. });
                let dims = out.dims();
                let [ix, im, iv] = [x, mean, var].map(|t| broadcast_index(dims, self.dims(t)));
                let (xv, mv, vv) = (
                    self.value(x).data(),
                    self.value(mean).data(),
                    self.value(var).data(),
                );
                let n = gd.len();
                // Derivatives of the log density; the pdf form multiplies by the density.
                let mut d_mean = vec![0.0; n];
                let mut d_var = vec![0.0; n];
                for e in 0..n {
                    let diff = xv[ix[e]] - mv[im[e]];
                    let v = vv[iv[e]];
                    let w = if log_form { gd[e] } else { gd[e] * out.data()[e] };
                    d_mean[e] = w * diff / v;
                    d_var[e] = w * (diff * diff / (2.0 * v * v) - 0.5 / v);
                }
                if self.needs(x) {
                    let dx: Vec<f64> = d_mean.iter().map(|d| -d).collect();
                    let t = self.unbroadcast(x, dims, dx);
                    self.accumulate(grads, x, t);
                }
                if self.needs(mean) {
                    let t = self.unbroadcast(mean, dims, d_mean);
                    self.accumulate(grads, mean, t);
                }
                if self.needs(var) {
                    let t = self.unbroadcast(var, dims, d_var);
                    self.accumulate(grads, var, t);
                }
            }
            &Op::ClampAbsMin(a, eps) => {
                let xs = self.value(a).data();
                let d: Vec<f64> = gd
                    .iter()
                    .zip(xs)
                    .map(|(&gv, &x)| if x.abs() >= eps { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, a, Tensor::new(out.dims(), d)?);
            }
            &Op::Reduce(op, a, axis) => {
                let adims = self.dims(a);
                let (outer, len, inner) = split_axis(adims, axis)?;
                let src = self.value(a).data();
                let mut d = vec![0.0; src.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let go = gd[o * inner + i];
                        for k in 0..len {
                            let e = (o * len + k) * inner + i;
                            d[e] = match op {
                                ReduceOp::Sum => go,
                                ReduceOp::Mean => go / len as f64,
                                ReduceOp::LogSumExp => {
                                    let lse = out.data()[o * inner + i];
                                    if lse == f64::NEG_INFINITY {
                                        0.0
                                    } else {
                                        go * (src[e] - lse).exp()
                                    }
                                }
                            };
                        }
                    }
                }
                self.accumulate(grads, a, Tensor::new(adims, d)?);
            }
            &Op::SumAll(a) => {
                let t = Tensor::full(self.dims(a), gd[0]);
                self.accumulate(grads, a, t);
            }
            &Op::Softmax(a, axis) => {
                let (outer, len, inner) = split_axis(out.dims(), axis)?;
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| gd[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            d[idx(k)] = y[idx(k)] * (gd[idx(k)] - dot);
                        }
                    }
                }
                self.accumulate(grads, a, Tensor::new(out.dims(), d)?);
            }
            &Op::LogSoftmax(a, axis) => {
                let (outer, len, inner) = split_axis(out.dims(), axis)?;
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let total: f64 = (0..len).map(|k| gd[idx(k)]).sum();
                        for k in 0..len {
                            d[idx(k)] = gd[idx(k)] - y[idx(k)].exp() * total;
                        }
                    }
                }
                self.accumulate(grads, a, Tensor::new(out.dims(), d)?);
            }
            &Op::NormalizeSum(a, axis) => {
                let (outer, len, inner) = split_axis(out.dims(), axis)?;
                let src = self.value(a).data();
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let total: f64 = (0..len).map(|k| src[idx(k)]).sum();
                        if total > 0.0 {
                            let dot: f64 = (0..len).map(|k| gd[idx(k)] * y[idx(k)]).sum();
                            for k in 0..len {
                                d[idx(k)] = (gd[idx(k)] - dot) / total;
                            }
                        }
                    }
                }
                self.accumulate(grads, a, Tensor::new(out.dims(), d)?);
            }
            Op::Normalize {
                input,
                mode,
                inv_std,
                fixed,
            } => {
                let (rows, cols) = (out.dims()[0], out.dims()[1]);
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                // Each normalization group: rows for layer mode, columns for batch mode.
                let (groups, size) = match mode {
                    NormMode::Layer => (rows, cols),
                    NormMode::Batch => (cols, rows),
                };
                let at = |grp: usize, j: usize| match mode {
                    NormMode::Layer => grp * cols + j,
                    NormMode::Batch => j * cols + grp,
                };
                for grp in 0..groups {
                    let s = inv_std[grp];
                    if *fixed {
                        for j in 0..size {
                            d[at(grp, j)] = gd[at(grp, j)] * s;
                        }
                        continue;
                    }
                    let n = size as f64;
                    let sum_g: f64 = (0..size).map(|j| gd[at(grp, j)]).sum();
                    let sum_gy: f64 = (0..size).map(|j| gd[at(grp, j)] * y[at(grp, j)]).sum();
                    for j in 0..size {
                        let e = at(grp, j);
                        d[e] = s / n * (n * gd[e] - sum_g - y[e] * sum_gy);
                    }
                }
                self.accumulate(grads, *input, Tensor::new(out.dims(), d)?);
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = split_axis(out.dims(), *axis)?;
                let total_len = out.dims()[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.dims(p)[*axis];
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total_len + offset) * inner;
                            d.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        let t = Tensor::new(self.dims(p), d)?;
                        self.accumulate(grads, p, t);
                    }
                    offset += len;
                }
            }
            &Op::Slice { input, axis, start } => {
                let idims = self.dims(input);
                let (outer, len, inner) = split_axis(idims, axis)?;
                let width = out.dims()[axis];
                let mut d = vec![0.0; numel(idims)];
                for o in 0..outer {
                    let src = &gd[o * width * inner..(o + 1) * width * inner];
                    let dst = (o * len + start) * inner;
                    d[dst..dst + width * inner].copy_from_slice(src);
                }
                self.accumulate(grads, input, Tensor::new(idims, d)?);
            }
            &Op::Reshape(a) => {
                let t = g.clone().reshape(self.dims(a))?;
                self.accumulate(grads, a, t);
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn gauss_log_density(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (2.0 * PI * var).ln() - d * d / (2.0 * var)
}

fn moments(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

fn softmax_values(t: &Tensor, axis: usize, log: bool) -> Result<Tensor> {
    let (outer, len, inner) = split_axis(t.dims(), axis)?;
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..len).map(|k| (src[idx(k)] - max).exp()).sum();
            for k in 0..len {
                let shifted = src[idx(k)] - max;
                out[idx(k)] = if log {
                    shifted - total.ln()
                } else {
                    shifted.exp() / total
                };
            }
        }
    }
    Tensor::new(t.dims(), out)
}

/// `c = op(a) * op(b)` where `op` optionally transposes. `a` is stored as
/// `[m, k]` (or `[k, m]` when transposed) and `b` as `[k, n]` (or `[n, k]`).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every slice to the extents implied by the
    // strides, so all reads and writes stay in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
