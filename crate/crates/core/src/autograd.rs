//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over the
//! tape visits every node after all of its consumers.

use crate::energy::{self, PairKernel};
use crate::error::{shape_err, Error, Result};
use crate::parallel::ExecPolicy;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics observed by a train-mode batch-norm node.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMulNt(Var, Var),
    AddRowBias(Var, Var),
    Relu(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Exp(Var),
    Ln(Var),
    /// Scalar-valued op whose input gradients were computed eagerly.
    Fused {
        inputs: Vec<(Var, Tensor)>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A differentiable computation recorded as it is evaluated.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    policy: ExecPolicy,
}

/// Gradients of a scalar with respect to every node that requires one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_policy(policy: ExecPolicy) -> Self {
        Self {
            nodes: Vec::new(),
            policy,
        }
    }

    pub fn policy(&self) -> ExecPolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the value of `v` into a new constant, blocking gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// `x · wᵀ` for `x: [n, in]`, `w: [out, in]`.
    pub fn matmul_nt(&mut self, x: Var, w: Var) -> Result<Var> {
        let value = self.value(x).matmul_nt(self.value(w))?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(value, Op::MatMulNt(x, w), rg))
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        let (_, m) = xv.require_matrix("add_row_bias")?;
        if bv.len() != m {
            return shape_err(format!("bias length {} vs width {m}", bv.len()));
        }
        let mut value = xv.clone();
        for row in value.data_mut().chunks_mut(m.max(1)) {
            for (a, &c) in row.iter_mut().zip(bv.data()) {
                *a += c;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(value, Op::AddRowBias(x, b), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// Per-feature batch normalization.
    ///
    /// With `running = None` the batch statistics are used (train mode) and
    /// returned; otherwise the supplied `(mean, var)` are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BnStats>)> {
        let xv = self.value(x);
        let (n, d) = xv.require_matrix("batch_norm")?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return shape_err("batch_norm affine width");
        }
        let (mean, var_biased, stats) = match running {
            None => {
                if n < 2 {
                    return Err(Error::BatchTooSmall(n));
                }
                let mut mean = vec![0.0; d];
                for row in xv.row_iter() {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; d];
                for row in xv.row_iter() {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                let biased: Vec<f64> = var.iter().map(|s| s / n as f64).collect();
                let unbiased: Vec<f64> = var.iter().map(|s| s / (n - 1) as f64).collect();
                let stats = BnStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, biased, Some(stats))
            }
            Some((m, v)) => {
                if m.len() != d || v.len() != d {
                    return shape_err("batch_norm running stats width");
                }
                (m.to_vec(), v.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var_biased
            .iter()
            .map(|v| 1.0 / (v + BN_EPS).sqrt())
            .collect();
        let mut xhat = xv.clone();
        for row in xhat.data_mut().chunks_mut(d.max(1)) {
            for j in 0..d {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut value = xhat.clone();
        for row in value.data_mut().chunks_mut(d.max(1)) {
            for j in 0..d {
                row[j] = g[j] * row[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let batch_stats = stats.is_some();
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Differentiable row-wise projection onto the unit sphere.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (_, d) = xv.require_matrix("normalize_rows")?;
        let mut value = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for (i, row) in value.data_mut().chunks_mut(d.max(1)).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < eps {
                return Err(Error::DegenerateVector { row: i, norm });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::NormalizeRows { x, norms }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        self.push(value, Op::Ln(a), rg)
    }

    /// Sum of `kernel(x_i, x_j)` over ordered pairs `i != j` of rows of `x`.
    pub fn pair_kernel_sum(&mut self, x: Var, kernel: PairKernel) -> Result<Var> {
        let rg = self.rg(&[x]);
        let xv = self.value(x);
        xv.require_matrix("pair_kernel_sum")?;
        if rg {
            let (value, grad) = energy::pair_sum_with_grad(xv, kernel, self.policy);
            Ok(self.push(
                Tensor::scalar(value),
                Op::Fused {
                    inputs: vec![(x, grad)],
                },
                true,
            ))
        } else {
            let value = energy::pair_sum(xv, kernel, self.policy);
            Ok(self.push(Tensor::scalar(value), Op::Leaf, false))
        }
    }

    /// Scalar node whose gradients with respect to `inputs` were computed
    /// by the caller; they are scaled by the upstream gradient on backward.
    pub fn custom_scalar(&mut self, value: f64, inputs: Vec<(Var, Tensor)>) -> Result<Var> {
        for (v, g) in &inputs {
            self.value(*v)
                .require_same_shape(g, "custom_scalar gradient")?;
        }
        let rg = inputs.iter().any(|(v, _)| self.requires_grad(*v));
        Ok(self.push(Tensor::scalar(value), Op::Fused { inputs }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return shape_err(format!("gather index {bad} out of {} rows", xv.rows()));
        }
        let value = xv.select_rows(&idx);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GatherRows { x, idx }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&tensors)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Graph(format!("node {} not in graph", loss.0)))?;
        if node.value.len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(node.value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let acc = |v: Var, g: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => {
                        for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gy);
                    continue;
                }
                Op::MatMulNt(x, w) => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    if self.requires_grad(*x) {
                        acc(*x, gy.matmul(wv)?, &mut grads);
                    }
                    if self.requires_grad(*w) {
                        acc(*w, gy.matmul_tn(xv)?, &mut grads);
                    }
                }
                Op::AddRowBias(x, b) => {
                    let m = gy.cols();
                    let mut gb = vec![0.0; m];
                    for row in gy.row_iter() {
                        for (s, &v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    let bshape = self.value(*b).shape().to_vec();
                    acc(*b, Tensor::new(bshape, gb)?, &mut grads);
                    acc(*x, gy, &mut grads);
                }
                Op::Relu(x) => {
                    let g = gy.zip_map(&node.value, |g, y| if y > 0.0 { g } else { 0.0 })?;
                    acc(*x, g, &mut grads);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (n, d) = gy.require_matrix("batch_norm backward")?;
                    let gam = self.value(*gamma).data();
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for (gr, xr) in gy.row_iter().zip(xhat.row_iter()) {
                        for j in 0..d {
                            dgamma[j] += gr[j] * xr[j];
                            dbeta[j] += gr[j];
                        }
                    }
                    let gshape = self.value(*gamma).shape().to_vec();
                    let bshape = self.value(*beta).shape().to_vec();
                    if self.requires_grad(*x) {
                        let mut dx = vec![0.0; n * d];
                        if *batch_stats {
                            // dxhat = gy * gamma; sums reuse dbeta/dgamma
                            let nf = n as f64;
                            for i in 0..n {
                                for j in 0..d {
                                    let dxh = gy.data()[i * d + j] * gam[j];
                                    let sum_dxh = dbeta[j] * gam[j];
                                    let sum_dxh_xh = dgamma[j] * gam[j];
                                    dx[i * d + j] = inv_std[j] / nf
                                        * (nf * dxh
                                            - sum_dxh
                                            - xhat.data()[i * d + j] * sum_dxh_xh);
                                }
                            }
                        } else {
                            for i in 0..n {
                                for j in 0..d {
                                    dx[i * d + j] = gy.data()[i * d + j] * gam[j] * inv_std[j];
                                }
                            }
                        }
                        acc(*x, Tensor::new(vec![n, d], dx)?, &mut grads);
                    }
                    acc(*gamma, Tensor::new(gshape, dgamma)?, &mut grads);
                    acc(*beta, Tensor::new(bshape, dbeta)?, &mut grads);
                }
                Op::NormalizeRows { x, norms } => {
                    let d = gy.cols();
                    let mut dx = gy.clone();
                    for (i, row) in dx.data_mut().chunks_mut(d.max(1)).enumerate() {
                        let y = node.value.row(i);
                        let proj: f64 = y.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
                        for (r, &yv) in row.iter_mut().zip(y) {
                            *r = (*r - yv * proj) / norms[i];
                        }
                    }
                    acc(*x, dx, &mut grads);
                }
                Op::Add(a, b) => {
                    acc(*a, gy.clone(), &mut grads);
                    acc(*b, gy, &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*a, gy.clone(), &mut grads);
                    acc(*b, gy.scale(-1.0), &mut grads);
                }
                Op::Mul(a, b) => {
                    let ga = gy.zip_map(self.value(*b), |g, v| g * v)?;
                    let gb = gy.zip_map(self.value(*a), |g, v| g * v)?;
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::Scale(a, c) => acc(*a, gy.scale(*c), &mut grads),
                Op::Sum(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    acc(*a, Tensor::full(&shape, gy.item()), &mut grads);
                }
                Op::Exp(a) => acc(*a, gy.zip_map(&node.value, |g, y| g * y)?, &mut grads),
                Op::Ln(a) => acc(*a, gy.zip_map(self.value(*a), |g, x| g / x)?, &mut grads),
                Op::Fused { inputs } => {
                    let s = gy.item();
                    for (v, g) in inputs {
                        acc(*v, g.scale(s), &mut grads);
                    }
                }
                Op::GatherRows { x, idx } => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    for (r, &i) in idx.iter().enumerate() {
                        for (a, &b) in dx.row_mut(i).iter_mut().zip(gy.row(r)) {
                            *a += b;
                        }
                    }
                    acc(*x, dx, &mut grads);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let n = pv.len();
                        let g = Tensor::new(
                            pv.shape().to_vec(),
                            gy.data()[offset..offset + n].to_vec(),
                        )?;
                        offset += n;
                        acc(*p, g, &mut grads);
                    }
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    acc(*x, gy.reshape(shape)?, &mut grads);
                }
            }
        }
        Ok(Gradients { grads })
    }
}
