//! Multi-layer perceptrons with optional batch normalization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BnStats, Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Running-statistics momentum for batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// A named trainable tensor and its gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }

    /// Biases and batch-norm affine parameters.
    pub fn is_bias_or_norm(&self) -> bool {
        self.name.ends_with(".bias") || self.name.contains(".bn.")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm1d {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm1d {
    pub fn new(prefix: &str, width: usize) -> Self {
        Self {
            gamma: Parameter::new(format!("{prefix}.bn.gamma"), Tensor::full(&[width], 1.0)),
            beta: Parameter::new(format!("{prefix}.bn.beta"), Tensor::zeros(&[width])),
            running_mean: Tensor::zeros(&[width]),
            running_var: Tensor::full(&[width], 1.0),
        }
    }

    pub fn commit(&mut self, stats: &BnStats) {
        let m = BN_MOMENTUM;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// `linear -> [batch norm] -> [relu]`
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Parameter,
    pub bias: Parameter,
    pub bn: Option<BatchNorm1d>,
    pub relu: bool,
}

impl Layer {
    pub fn in_width(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_width(&self) -> usize {
        self.weight.value.shape()[0]
    }
}

/// Widths and per-layer normalization of an MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    /// Batch norm (followed by ReLU) after hidden layer `i`.
    pub hidden_bn: Vec<bool>,
}

impl MlpSpec {
    /// Hidden layers all get batch norm (when `bn`) and ReLU.
    pub fn uniform(widths: &[usize], bn: bool) -> Self {
        Self {
            widths: widths.to_vec(),
            hidden_bn: vec![bn; widths.len().saturating_sub(2)],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub name: String,
    pub layers: Vec<Layer>,
}

/// Everything a forward pass recorded.
pub struct MlpTrace {
    pub output: Var,
    /// Output of every layer, after its activation.
    pub activations: Vec<Var>,
    /// Inputs to each ReLU, one per hidden layer.
    pub pre_relu: Vec<Var>,
    /// Graph nodes of the parameters in [`Mlp::params`] order.
    pub param_vars: Vec<Var>,
    /// Train-mode batch statistics per layer (None without batch norm).
    pub batch_stats: Vec<Option<BnStats>>,
}

impl Mlp {
    /// Kaiming-uniform weights, `U(-b, b)` with `b = sqrt(6 / fan_in)`; zero biases.
    pub fn init<R: Rng + ?Sized>(name: &str, spec: &MlpSpec, rng: &mut R) -> Result<Self> {
        if spec.widths.len() < 2 || spec.hidden_bn.len() + 2 != spec.widths.len() {
            return shape_err(format!("invalid MLP spec {spec:?}"));
        }
        if spec.widths.contains(&0) {
            return shape_err("zero-width layer");
        }
        let n_layers = spec.widths.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
            let prefix = format!("{name}.layer{l}");
            let bound = (6.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let hidden = l + 1 < n_layers;
            layers.push(Layer {
                weight: Parameter::new(
                    format!("{prefix}.weight"),
                    Tensor::new(vec![fan_out, fan_in], w)?,
                ),
                bias: Parameter::new(format!("{prefix}.bias"), Tensor::zeros(&[fan_out])),
                bn: (hidden && spec.hidden_bn[l]).then(|| BatchNorm1d::new(&prefix, fan_out)),
                relu: hidden,
            });
        }
        Ok(Self {
            name: name.to_string(),
            layers,
        })
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].in_width()
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map_or(0, Layer::out_width)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
            if let Some(bn) = &l.bn {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            if let Some(bn) = &mut l.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    /// Weight matrices, one per layer; rows are neurons.
    pub fn weights(&self) -> Vec<&Parameter> {
        self.layers.iter().map(|l| &l.weight).collect()
    }

    /// Running statistics as `(name, tensor)` buffers.
    pub fn buffers(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(bn) = &l.bn {
                out.push((
                    format!("{}.layer{i}.bn.running_mean", self.name),
                    &bn.running_mean,
                ));
                out.push((
                    format!("{}.layer{i}.bn.running_var", self.name),
                    &bn.running_var,
                ));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let name = self.name.clone();
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            if let Some(bn) = &mut l.bn {
                out.push((
                    format!("{name}.layer{i}.bn.running_mean"),
                    &mut bn.running_mean,
                ));
                out.push((
                    format!("{name}.layer{i}.bn.running_var"),
                    &mut bn.running_var,
                ));
            }
        }
        out
    }

    /// Adds the parameters to `g` in [`Mlp::params`] order, as
    /// differentiable leaves when `trainable` and constants otherwise.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|p| {
                if trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Records the forward pass in `g` with freshly bound parameters.
    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode, trainable: bool) -> Result<MlpTrace> {
        let vars = self.bind(g, trainable);
        self.forward_bound(g, x, mode, &vars)
    }

    /// Records the forward pass using parameter nodes from [`Mlp::bind`], so
    /// several passes can share one set of leaves.
    pub fn forward_bound(
        &self,
        g: &mut Graph,
        x: Var,
        mode: Mode,
        vars: &[Var],
    ) -> Result<MlpTrace> {
        let (_, d) = g.value(x).require_matrix("mlp input")?;
        if d != self.in_width() {
            return shape_err(format!(
                "{}: input width {d}, expected {}",
                self.name,
                self.in_width()
            ));
        }
        if vars.len() != self.params().len() {
            return shape_err(format!(
                "{}: {} bound parameters, expected {}",
                self.name,
                vars.len(),
                self.params().len()
            ));
        }
        let mut next = vars.iter().copied();
        let mut h = x;
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut batch_stats = Vec::with_capacity(self.layers.len());
        let mut pre_relu = Vec::new();
        for layer in &self.layers {
            let (w, b) = (next.next().unwrap(), next.next().unwrap());
            h = g.matmul_nt(h, w)?;
            h = g.add_row_bias(h, b)?;
            let mut stats = None;
            if let Some(bn) = &layer.bn {
                let (gamma, beta) = (next.next().unwrap(), next.next().unwrap());
                let running = match mode {
                    Mode::Train => None,
                    Mode::Eval => Some((bn.running_mean.data(), bn.running_var.data())),
                };
                let (y, s) = g.batch_norm(h, gamma, beta, running)?;
                h = y;
                stats = s;
            }
            if layer.relu {
                pre_relu.push(h);
                h = g.relu(h);
            }
            activations.push(h);
            batch_stats.push(stats);
        }
        Ok(MlpTrace {
            output: h,
            activations,
            pre_relu,
            param_vars: vars.to_vec(),
            batch_stats,
        })
    }

    /// Forward pass without gradient tracking.
    pub fn forward_tensor(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let trace = self.forward(&mut g, xv, mode, false)?;
        Ok(g.value(trace.output).clone())
    }

    /// Applies train-mode batch statistics to the running estimates.
    pub fn commit_stats(&mut self, stats: &[Option<BnStats>]) {
        for (layer, s) in self.layers.iter_mut().zip(stats) {
            if let (Some(bn), Some(s)) = (&mut layer.bn, s) {
                bn.commit(s);
            }
        }
    }

    /// Adds gradients from a backward pass into the parameters.
    pub fn accumulate_grads(
        &mut self,
        grads: &crate::autograd::Gradients,
        vars: &[Var],
        weight: f64,
    ) {
        for (p, &v) in self.params_mut().into_iter().zip(vars) {
            if let Some(gv) = grads.get(v) {
                p.grad
                    .axpy(weight, gv)
                    .expect("gradient shape matches parameter");
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}
