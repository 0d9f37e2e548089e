//! Hyperspherical energy functionals and uniformity diagnostics.
//!
//! All pairwise sums run over ordered pairs `i != j`. Euclidean distances are
//! floored at [`DIST_FLOOR`] and dot products are clamped by
//! [`ACOS_CLAMP`] before `arccos`, so energies stay finite when neurons or
//! representations coincide.

mod kde;

pub use kde::{bessel_i0, gaussian_kde_2d, vmf_kde, Grid2d, KdeCircle, KdePlane};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::engine::ByolModel;
use crate::error::{Error, Result};
use crate::parallel::{self, ExecPolicy};
use crate::tensor::{self, Tensor};

pub const DIST_FLOOR: f64 = 1e-8;
pub const ACOS_CLAMP: f64 = 1e-12;
/// Rows kept when estimating representation energy of a large batch.
pub const REPR_SAMPLE_CAP: usize = 512;
/// Tolerance on unit norm for neuron sets.
pub const UNIT_TOL: f64 = 1e-10;

/// Pairwise potential used in ordered-pair sums.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PairKernel {
    /// `||x_i - x_j||^-s`, or `-ln ||x_i - x_j||` for `s = 0`.
    Riesz { s: f64 },
    /// Riesz kernel on the geodesic distance `arccos(x_i . x_j)`.
    Angular { s: f64 },
    /// `exp(-t ||x_i - x_j||^2)`.
    Gaussian { t: f64 },
}

impl PairKernel {
    pub fn energy(mode: DistanceMode, s: RieszPower) -> Self {
        let s = s.as_f64();
        match mode {
            DistanceMode::Euclidean => PairKernel::Riesz { s },
            DistanceMode::Angular => PairKernel::Angular { s },
        }
    }

    /// Kernel value and its derivative with respect to `a`.
    #[inline]
    fn eval(self, a: &[f64], b: &[f64], grad: Option<&mut [f64]>) -> f64 {
        match self {
            PairKernel::Riesz { s } => {
                let d = tensor::sq_dist(a, b).sqrt();
                let floored = d < DIST_FLOOR;
                let dd = if floored { DIST_FLOOR } else { d };
                let value = riesz(dd, s);
                if let (Some(g), false) = (grad, floored) {
                    // d/da r_s(|a - b|) = r_s'(d) (a - b) / d
                    let coef = if s == 0.0 {
                        -1.0 / (d * d)
                    } else {
                        -s * d.powf(-s - 2.0)
                    };
                    for ((gv, &x), &y) in g.iter_mut().zip(a).zip(b) {
                        *gv += coef * (x - y);
                    }
                }
                value
            }
            PairKernel::Angular { s } => {
                let raw = tensor::dot(a, b);
                let c = raw.clamp(-1.0 + ACOS_CLAMP, 1.0 - ACOS_CLAMP);
                let theta = c.acos();
                let value = riesz(theta, s);
                if let (Some(g), true) = (grad, c == raw) {
                    let dk = if s == 0.0 {
                        -1.0 / theta
                    } else {
                        -s * theta.powf(-s - 1.0)
                    };
                    let coef = dk * (-1.0 / (1.0 - c * c).sqrt());
                    for (gv, &y) in g.iter_mut().zip(b) {
                        *gv += coef * y;
                    }
                }
                value
            }
            PairKernel::Gaussian { t } => {
                let value = (-t * tensor::sq_dist(a, b)).exp();
                if let Some(g) = grad {
                    let coef = -2.0 * t * value;
                    for ((gv, &x), &y) in g.iter_mut().zip(a).zip(b) {
                        *gv += coef * (x - y);
                    }
                }
                value
            }
        }
    }
}

#[inline]
fn riesz(z: f64, s: f64) -> f64 {
    if s == 0.0 {
        -z.ln()
    } else {
        z.powf(-s)
    }
}

/// Sum of `kernel` over ordered pairs of rows of `x`.
pub fn pair_sum(x: &Tensor, kernel: PairKernel, policy: ExecPolicy) -> f64 {
    let n = x.rows();
    let partial = parallel::map_indices(policy, n, |i| {
        let xi = x.row(i);
        let mut s = 0.0;
        for j in 0..n {
            if j != i {
                s += kernel.eval(xi, x.row(j), None);
            }
        }
        s
    });
    partial.iter().sum()
}

/// [`pair_sum`] together with its gradient with respect to `x`.
pub fn pair_sum_with_grad(x: &Tensor, kernel: PairKernel, policy: ExecPolicy) -> (f64, Tensor) {
    let n = x.rows();
    let d = x.cols();
    let partial = parallel::map_indices(policy, n, |i| {
        let xi = x.row(i);
        let mut g = vec![0.0; d];
        let mut s = 0.0;
        for j in 0..n {
            if j != i {
                s += kernel.eval(xi, x.row(j), Some(&mut g));
            }
        }
        // both (i, j) and (j, i) depend on x_i symmetrically
        g.iter_mut().for_each(|v| *v *= 2.0);
        (s, g)
    });
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(n * d);
    for (s, g) in partial {
        total += s;
        grad.extend(g);
    }
    (
        total,
        Tensor::new(x.shape().to_vec(), grad).expect("shape preserved"),
    )
}

/// Riesz power `s`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RieszPower {
    Log,
    One,
    Two,
}

impl RieszPower {
    pub fn from_int(s: u8) -> Result<Self> {
        match s {
            0 => Ok(RieszPower::Log),
            1 => Ok(RieszPower::One),
            2 => Ok(RieszPower::Two),
            other => Err(Error::Config(format!(
                "Riesz power must be 0, 1 or 2, got {other}"
            ))),
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            RieszPower::Log => 0,
            RieszPower::One => 1,
            RieszPower::Two => 2,
        }
    }

    pub fn as_f64(self) -> f64 {
        self.as_u8() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMode {
    Euclidean,
    Angular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubNetwork {
    Encoder,
    Projector,
    Predictor,
}

impl SubNetwork {
    pub const ALL: [SubNetwork; 3] = [
        SubNetwork::Encoder,
        SubNetwork::Projector,
        SubNetwork::Predictor,
    ];
}

/// Hyperspherical-energy regularization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergySpec {
    pub s: RieszPower,
    pub mode: DistanceMode,
    pub lambda: f64,
    pub selection: Vec<SubNetwork>,
}

impl Default for EnergySpec {
    fn default() -> Self {
        Self {
            s: RieszPower::Two,
            mode: DistanceMode::Angular,
            lambda: 1.0,
            selection: SubNetwork::ALL.to_vec(),
        }
    }
}

impl EnergySpec {
    pub fn new(s: u8, mode: DistanceMode, lambda: f64, selection: Vec<SubNetwork>) -> Result<Self> {
        let spec = Self {
            s: RieszPower::from_int(s)?,
            mode,
            lambda,
            selection,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda_mhe must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.lambda > 0.0 && self.selection.is_empty() {
            return Err(Error::Config("MHE selection is empty".into()));
        }
        Ok(())
    }

    pub fn kernel(&self) -> PairKernel {
        PairKernel::energy(self.mode, self.s)
    }

    /// Short name in the `0/1/2/a0/a1/a2` convention.
    pub fn power_tag(&self) -> String {
        let prefix = if self.mode == DistanceMode::Angular {
            "a"
        } else {
            ""
        };
        format!("{prefix}{}", self.s.as_u8())
    }
}

/// Neuron weight vectors projected onto the unit hypersphere, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronSet {
    weights: Tensor,
    layer: String,
}

impl NeuronSet {
    /// Wraps rows that are already unit-norm.
    pub fn new(weights: Tensor, layer: impl Into<String>) -> Result<Self> {
        weights.require_matrix("neuron set")?;
        for (i, row) in weights.row_iter().enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(Error::NotNormalized { row: i, norm });
            }
        }
        Ok(Self {
            weights,
            layer: layer.into(),
        })
    }

    /// Normalizes raw weight rows (each an output unit's incoming weights).
    pub fn from_weights(raw: &Tensor, layer: impl Into<String>) -> Result<Self> {
        Ok(Self {
            weights: tensor::l2_normalize(raw, 1e-12)?,
            layer: layer.into(),
        })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn layer(&self) -> &str {
        &self.layer
    }

    pub fn len(&self) -> usize {
        self.weights.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn require_pairs(&self) -> Result<()> {
        if self.len() < 2 {
            return Err(Error::TooFewNeurons(self.len()));
        }
        Ok(())
    }
}

/// Riesz s-energy with Euclidean (chord) distance.
pub fn riesz_energy(w: &NeuronSet, s: RieszPower) -> Result<f64> {
    w.require_pairs()?;
    Ok(pair_sum(
        &w.weights,
        PairKernel::Riesz { s: s.as_f64() },
        ExecPolicy::default(),
    ))
}

/// Riesz s-energy with geodesic distance.
pub fn angular_energy(w: &NeuronSet, s: RieszPower) -> Result<f64> {
    w.require_pairs()?;
    Ok(pair_sum(
        &w.weights,
        PairKernel::Angular { s: s.as_f64() },
        ExecPolicy::default(),
    ))
}

/// Energy divided by the number of ordered pairs `N (N - 1)`.
pub fn normalized_layer_energy(w: &NeuronSet, spec: &EnergySpec) -> Result<f64> {
    let e = match spec.mode {
        DistanceMode::Euclidean => riesz_energy(w, spec.s)?,
        DistanceMode::Angular => angular_energy(w, spec.s)?,
    };
    let n = w.len() as f64;
    Ok(e / (n * (n - 1.0)))
}

/// Mean Gaussian potential over ordered pairs. Rows are expected unit-norm.
pub fn gaussian_potential_g2(x: &Tensor, t: f64) -> Result<f64> {
    gaussian_potential_g2_with(x, t, ExecPolicy::default())
}

pub fn gaussian_potential_g2_with(x: &Tensor, t: f64, policy: ExecPolicy) -> Result<f64> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    if !(t > 0.0) {
        return Err(Error::Config(format!("t must be positive, got {t}")));
    }
    let total = pair_sum(x, PairKernel::Gaussian { t }, policy);
    Ok(total / (n as f64 * (n as f64 - 1.0)))
}

/// Log of [`gaussian_potential_g2`]; lower means more uniform.
pub fn uniformity_metric(x: &Tensor, t: f64) -> Result<f64> {
    Ok(gaussian_potential_g2(x, t)?.ln())
}

/// Normalized energy of l2-normalized representations.
///
/// Batches larger than [`REPR_SAMPLE_CAP`] are subsampled with `seed`.
pub fn representation_energy(x: &Tensor, spec: &EnergySpec, seed: u64) -> Result<f64> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let x = if n > REPR_SAMPLE_CAP {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = index::sample(&mut rng, n, REPR_SAMPLE_CAP).into_vec();
        idx.sort_unstable();
        x.select_rows(&idx)
    } else {
        x.clone()
    };
    let unit = tensor::l2_normalize(&x, 1e-12)?;
    normalized_layer_energy(
        &NeuronSet {
            weights: unit,
            layer: String::new(),
        },
        spec,
    )
}

/// Adds `lambda * sum_j E_j / (N_j (N_j - 1))` over the given weight
/// matrices to the graph. Rows are normalized inside the graph.
pub fn mhe_term(g: &mut Graph, weights: &[Var], spec: &EnergySpec) -> Result<Option<Var>> {
    if spec.lambda == 0.0 {
        return Ok(None);
    }
    spec.validate()?;
    let mut total: Option<Var> = None;
    for &w in weights {
        let n = g.value(w).rows();
        if n < 2 {
            return Err(Error::TooFewNeurons(n));
        }
        let unit = g.normalize_rows(w, 1e-12)?;
        let e = g.pair_kernel_sum(unit, spec.kernel())?;
        let e = g.scale(e, 1.0 / (n as f64 * (n as f64 - 1.0)));
        total = Some(match total {
            Some(t) => g.add(t, e)?,
            None => e,
        });
    }
    let total = total.ok_or_else(|| Error::Config("MHE selection resolves to no layers".into()))?;
    Ok(Some(g.scale(total, spec.lambda)))
}

/// Value of the weight regularizer for the online side of `model`.
pub fn mhe_regularizer(model: &ByolModel, spec: &EnergySpec) -> Result<f64> {
    spec.validate()?;
    if spec.lambda == 0.0 {
        return Ok(0.0);
    }
    if spec.selection.is_empty() {
        return Err(Error::Config("MHE selection is empty".into()));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = model
        .selected_weights(&spec.selection)
        .into_iter()
        .map(|p| g.constant(p.value.clone()))
        .collect();
    Ok(mhe_term(&mut g, &vars, spec)?.map_or(0.0, |v| g.value(v).item()))
}
