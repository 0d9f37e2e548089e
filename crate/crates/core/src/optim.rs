//! SGD and LARS with momentum.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::nn::Parameter;
use crate::tensor::Tensor;

/// Plain SGD: `v <- m v + g + wd w; w <- w - lr v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Parameter], lr: f64) {
        for p in params.iter_mut() {
            let v = velocity_for(&mut self.velocity, p);
            for ((vi, wi), &gi) in v
                .data_mut()
                .iter_mut()
                .zip(p.value.data_mut())
                .zip(p.grad.data())
            {
                *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                *wi -= lr * *vi;
            }
        }
    }
}

/// Layer-wise adaptive rate scaling.
///
/// For parameters not excluded, the step is scaled by the trust ratio
/// `eta ||w|| / (||g|| + wd ||w|| + 1e-9)` and weight decay is added to the
/// gradient. Excluded parameters (biases, batch-norm affine) take a plain
/// momentum step without weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lars {
    pub momentum: f64,
    pub weight_decay: f64,
    pub trust_coefficient: f64,
    pub velocity: BTreeMap<String, Tensor>,
}

impl Lars {
    pub const DEFAULT_TRUST: f64 = 0.001;

    pub fn new(momentum: f64, weight_decay: f64, trust_coefficient: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            trust_coefficient,
            velocity: BTreeMap::new(),
        }
    }

    /// Local learning-rate multiplier for one parameter tensor.
    pub fn trust_ratio(&self, w: &Tensor, g: &Tensor) -> f64 {
        let wn = w.norm();
        let gn = g.norm();
        self.trust_coefficient * wn / (gn + self.weight_decay * wn + 1e-9)
    }

    pub fn step(
        &mut self,
        params: &mut [&mut Parameter],
        lr: f64,
        exclude: impl Fn(&Parameter) -> bool,
    ) {
        for p in params.iter_mut() {
            let excluded = exclude(p);
            let (scale, wd) = if excluded {
                (1.0, 0.0)
            } else {
                (self.trust_ratio(&p.value, &p.grad), self.weight_decay)
            };
            let v = velocity_for(&mut self.velocity, p);
            for ((vi, wi), &gi) in v
                .data_mut()
                .iter_mut()
                .zip(p.value.data_mut())
                .zip(p.grad.data())
            {
                *vi = self.momentum * *vi + lr * scale * (gi + wd * *wi);
                *wi -= *vi;
            }
        }
    }
}

fn velocity_for<'a>(map: &'a mut BTreeMap<String, Tensor>, p: &Parameter) -> &'a mut Tensor {
    map.entry(p.name.clone())
        .or_insert_with(|| Tensor::zeros(p.value.shape()))
}

/// Optimizer used by a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd(Sgd),
    Lars(Lars),
}

impl Optimizer {
    /// Steps every parameter; LARS excludes biases and batch-norm affine.
    pub fn step(&mut self, params: &mut [&mut Parameter], lr: f64) {
        match self {
            Optimizer::Sgd(o) => o.step(params, lr),
            Optimizer::Lars(o) => o.step(params, lr, Parameter::is_bias_or_norm),
        }
    }

    pub fn velocity(&self) -> &BTreeMap<String, Tensor> {
        match self {
            Optimizer::Sgd(o) => &o.velocity,
            Optimizer::Lars(o) => &o.velocity,
        }
    }

    pub fn velocity_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        match self {
            Optimizer::Sgd(o) => &mut o.velocity,
            Optimizer::Lars(o) => &mut o.velocity,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(name: &str, w: &[f64], g: &[f64]) -> Parameter {
        let mut p = Parameter::new(name, Tensor::new(vec![w.len()], w.to_vec()).unwrap());
        p.grad = Tensor::new(vec![g.len()], g.to_vec()).unwrap();
        p
    }

    #[test]
    fn sgd_examples() {
        let mut p = param("w", &[1.0], &[1.0]);
        Sgd::new(0.0, 0.0).step(&mut [&mut p], 0.1);
        assert!((p.value.data()[0] - 0.9).abs() < 1e-15);

        let mut p = param("w", &[1.0], &[0.0]);
        Sgd::new(0.0, 0.1).step(&mut [&mut p], 1.0);
        assert!((p.value.data()[0] - 0.9).abs() < 1e-15);

        let mut p = param("w", &[0.0], &[1.0]);
        let mut o = Sgd::new(0.9, 0.0);
        o.step(&mut [&mut p], 0.0);
        o.step(&mut [&mut p], 0.0);
        assert!((o.velocity["w"].data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn lars_excluded_is_plain_sgd() {
        let mut p = param("l.bias", &[0.0, 0.0], &[1.0, -2.0]);
        let mut o = Lars::new(0.0, 0.5, 0.001);
        o.step(&mut [&mut p], 0.1, Parameter::is_bias_or_norm);
        assert_eq!(p.value.data(), &[-0.1, 0.2]);
    }

    #[test]
    fn lars_equal_norms() {
        let mut p = param("l.weight", &[1.0, 0.0], &[1.0, 0.0]);
        let o = Lars::new(0.0, 0.0, 1.0);
        assert!((o.trust_ratio(&p.value, &p.grad) - 1.0).abs() < 1e-8);
        let mut o = o;
        o.step(&mut [&mut p], 0.5, Parameter::is_bias_or_norm);
        assert!((p.value.data()[0] - 0.5).abs() < 1e-8);
        assert_eq!(p.value.data()[1], 0.0);
    }

    #[test]
    fn lars_matches_scalar_recomputation() {
        let w = [0.3, -1.2, 0.7, 2.0];
        let g = [0.05, 0.4, -0.9, 0.1];
        let (lr, wd, eta) = (0.7, 0.01, 0.02);
        let mut p = param("x.weight", &w, &g);
        Lars::new(0.0, wd, eta).step(&mut [&mut p], lr, Parameter::is_bias_or_norm);

        let mut wn = 0.0;
        let mut gn = 0.0;
        for i in 0..4 {
            wn += w[i] * w[i];
            gn += g[i] * g[i];
        }
        let (wn, gn) = (f64::sqrt(wn), f64::sqrt(gn));
        let local = eta * wn / (gn + wd * wn + 1e-9);
        for i in 0..4 {
            let want = w[i] - lr * local * (g[i] + wd * w[i]);
            assert!((p.value.data()[i] - want).abs() < 1e-15);
        }
    }
}
