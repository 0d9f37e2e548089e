//! Slow reference implementations used to check the fast paths.
//!
//! Everything here is written as literal loops with no shared kernels, so a
//! bug in the vectorized code cannot hide in its own oracle.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::PairBatch;
use crate::energy::{DistanceMode, EnergySpec, RieszPower, SubNetwork};
use crate::engine::{loss_and_gradients, ByolModel, ModelSpec, Objective, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::objectives;
use crate::parallel::{map_indices, ExecPolicy};
use crate::tensor::Tensor;

/// Largest point set [`bruteforce_pair_loss`] accepts.
pub const BRUTEFORCE_MAX_N: usize = 2048;

/// Gradient entries smaller than this are compared in absolute terms.
/// At a step of 1e-5 the roundoff in a central difference is around 1e-11,
/// so smaller entries carry no relative information.
pub const REL_ERR_FLOOR: f64 = 1e-5;

/// Toy batches are redrawn until every ReLU input is at least this far from
/// zero, so no finite-difference probe straddles a kink.
pub const KINK_MARGIN: f64 = 1e-3;

/// Auditable output of one oracle run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub method: String,
    pub seed: Option<u64>,
    pub samples: Option<usize>,
    pub steps: Option<usize>,
    pub values: BTreeMap<String, f64>,
}

impl OracleResult {
    fn new(method: &str, seed: Option<u64>) -> Self {
        Self {
            method: method.to_string(),
            seed,
            samples: None,
            steps: None,
            values: BTreeMap::new(),
        }
    }

    fn with(mut self, key: &str, v: f64) -> Self {
        self.values.insert(key.to_string(), v);
        self
    }
}

fn oracle_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Oracle(msg.into()))
}

fn gaussian_point<R: rand::Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|a| a / n).collect();
        }
    }
}

/// Central differences `(f(x + e_i eps) - f(x - e_i eps)) / (2 eps)`.
pub fn finite_diff_gradient(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return oracle_err(format!("step must be positive, got {eps}"));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe)?;
        probe[i] = x[i] - eps;
        let down = f(&probe)?;
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return oracle_err(format!("non-finite probe at coordinate {i}"));
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, REL_ERR_FLOOR)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}

/// Loss whose analytic gradient [`gradient_check`] compares with finite
/// differences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTarget {
    InfoNce,
    Alignment,
    Uniformity,
    Byol,
    ByolUni,
    ByolMhe { mode: DistanceMode, s: RieszPower },
}

impl GradTarget {
    /// Every target, with MHE in both modes and all three powers.
    pub fn all() -> Vec<GradTarget> {
        let mut out = vec![
            GradTarget::InfoNce,
            GradTarget::Alignment,
            GradTarget::Uniformity,
            GradTarget::Byol,
            GradTarget::ByolUni,
        ];
        for mode in [DistanceMode::Euclidean, DistanceMode::Angular] {
            for s in [RieszPower::Log, RieszPower::One, RieszPower::Two] {
                out.push(GradTarget::ByolMhe { mode, s });
            }
        }
        out
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mhe = |mode, p: u8| {
            Ok(GradTarget::ByolMhe {
                mode,
                s: RieszPower::from_int(p)?,
            })
        };
        match s {
            "info_nce" | "info-nce" => Ok(GradTarget::InfoNce),
            "alignment" => Ok(GradTarget::Alignment),
            "uniformity" => Ok(GradTarget::Uniformity),
            "byol" => Ok(GradTarget::Byol),
            "byol_uni" | "byol-uni" => Ok(GradTarget::ByolUni),
            "byol_mhe" | "byol-mhe" => mhe(DistanceMode::Angular, 2),
            _ => {
                let tag = s
                    .strip_prefix("byol_mhe_")
                    .or_else(|| s.strip_prefix("byol-mhe-"))
                    .ok_or_else(|| Error::Config(format!("unknown gradient target {s:?}")))?;
                let (mode, p) = match tag.strip_prefix('a') {
                    Some(p) => (DistanceMode::Angular, p),
                    None => (DistanceMode::Euclidean, tag),
                };
                let p: u8 = p
                    .parse()
                    .map_err(|_| Error::Config(format!("bad power in {s:?}")))?;
                mhe(mode, p)
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            GradTarget::InfoNce => "info_nce".into(),
            GradTarget::Alignment => "alignment".into(),
            GradTarget::Uniformity => "uniformity".into(),
            GradTarget::Byol => "byol".into(),
            GradTarget::ByolUni => "byol_uni".into(),
            GradTarget::ByolMhe { mode, s } => {
                let a = if *mode == DistanceMode::Angular {
                    "a"
                } else {
                    ""
                };
                format!("byol_mhe_{a}{}", s.as_u8())
            }
        }
    }
}

/// Small model used by gradient checks and replay tests.
pub fn toy_model_spec(input_dim: usize) -> ModelSpec {
    ModelSpec {
        input_dim,
        encoder_hidden: vec![16],
        repr_dim: 6,
        proj_hidden: 16,
        proj_dim: 4,
        pred_hidden: 16,
        batch_norm: true,
    }
}

/// Smallest `|ReLU input|` over every train-mode pass a step makes.
fn relu_margin(model: &ByolModel, batch: &PairBatch) -> Result<f64> {
    let mut margin = f64::INFINITY;
    for view in [&batch.view1, &batch.view2] {
        for chain in [
            vec![
                &model.online_encoder,
                &model.online_projector,
                &model.predictor,
            ],
            vec![&model.target_encoder, &model.target_projector],
        ] {
            let mut g = Graph::new();
            let mut h = g.constant(view.clone());
            for net in chain {
                let trace = net.forward(&mut g, h, Mode::Train, false)?;
                for &p in &trace.pre_relu {
                    margin = g.value(p).data().iter().fold(margin, |m, v| m.min(v.abs()));
                }
                h = trace.output;
            }
        }
    }
    Ok(margin)
}

/// Seeded toy model, config and batch for `objective`. The batch is redrawn
/// until it keeps [`KINK_MARGIN`] away from every ReLU kink.
pub fn toy_setup(
    objective: Objective,
    energy: EnergySpec,
    seed: u64,
) -> Result<(ByolModel, TrainConfig, PairBatch)> {
    let dim = 5;
    let batch = 8;
    let mut cfg = TrainConfig::new(dim);
    cfg.model = toy_model_spec(dim);
    cfg.objective = objective;
    cfg.energy = energy;
    cfg.batch_size = batch;
    cfg.seed = seed;
    // a target distinct from the online net so BYOL gradients are non-trivial
    cfg.independent_target = true;
    let model = ByolModel::init(&cfg.model, seed, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut view = || {
        let v: Vec<f64> = (0..batch * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Tensor::new(vec![batch, dim], v)
    };
    for _ in 0..1000 {
        let pairs = PairBatch {
            view1: view()?,
            view2: view()?,
            ids: (0..batch as u64).collect(),
        };
        if relu_margin(&model, &pairs)? >= KINK_MARGIN {
            return Ok((model, cfg, pairs));
        }
    }
    oracle_err(format!("no kink-free toy batch for seed {seed}"))
}

fn graph_loss(
    target: GradTarget,
    inputs: &[Tensor],
    g: &mut Graph,
    grad: bool,
) -> Result<(f64, Vec<Tensor>)> {
    let vars: Vec<_> = inputs
        .iter()
        .map(|x| {
            if grad {
                g.param(x.clone())
            } else {
                g.constant(x.clone())
            }
        })
        .collect();
    let unit: Vec<_> = vars
        .iter()
        .map(|&v| g.normalize_rows(v, 1e-12))
        .collect::<Result<_>>()?;
    let loss = match target {
        GradTarget::InfoNce => {
            let b = g.value(unit[0]).rows();
            let m = g.value(unit[0]).cols();
            let negs = g.reshape(unit[2], vec![b, g.value(unit[2]).rows() / b, m])?;
            objectives::info_nce_graph(g, unit[0], unit[1], negs, 0.5)?
        }
        GradTarget::Alignment => objectives::alignment_loss_graph(g, unit[0], unit[1], 2.0)?,
        GradTarget::Uniformity => objectives::uniformity_loss_graph(g, unit[0], 2.0)?,
        _ => unreachable!("model targets go through the training engine"),
    };
    let value = g.value(loss).item();
    if !grad {
        return Ok((value, Vec::new()));
    }
    let grads = g.backward(loss)?;
    Ok((
        value,
        vars.iter()
            .zip(inputs)
            .map(|(&v, x)| grads.get_or_zeros(v, x.shape()))
            .collect(),
    ))
}

fn flatten(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflatten(flat: &[f64], like: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut off = 0;
    like.iter()
        .map(|t| {
            let n = t.len();
            let out = Tensor::new(t.shape().to_vec(), flat[off..off + n].to_vec());
            off += n;
            out
        })
        .collect()
}

fn loss_inputs(target: GradTarget, seed: u64) -> Result<Vec<Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mat = |r: usize, c: usize| {
        let v: Vec<f64> = (0..r * c)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Tensor::new(vec![r, c], v)
    };
    match target {
        GradTarget::InfoNce => Ok(vec![mat(4, 3)?, mat(4, 3)?, mat(12, 3)?]),
        GradTarget::Alignment => Ok(vec![mat(6, 4)?, mat(6, 4)?]),
        GradTarget::Uniformity => Ok(vec![mat(7, 3)?]),
        _ => unreachable!(),
    }
}

/// Compares backpropagated gradients with central differences for one
/// seeded instance. Reports the largest relative error.
pub fn gradient_check(target: GradTarget, seed: u64, eps: f64) -> Result<OracleResult> {
    let (analytic, numeric) = match target {
        GradTarget::InfoNce | GradTarget::Alignment | GradTarget::Uniformity => {
            let inputs = loss_inputs(target, seed)?;
            let (_, grads) = graph_loss(target, &inputs, &mut Graph::new(), true)?;
            let numeric = finite_diff_gradient(
                |x| Ok(graph_loss(target, &unflatten(x, &inputs)?, &mut Graph::new(), false)?.0),
                &flatten(&inputs),
                eps,
            )?;
            (flatten(&grads), numeric)
        }
        _ => {
            let (objective, energy) = match target {
                GradTarget::Byol => (Objective::Byol, EnergySpec::default()),
                GradTarget::ByolUni => (Objective::ByolUni, EnergySpec::default()),
                GradTarget::ByolMhe { mode, s } => (
                    Objective::ByolMhe,
                    EnergySpec {
                        s,
                        mode,
                        lambda: 1.0,
                        selection: SubNetwork::ALL.to_vec(),
                    },
                ),
                _ => unreachable!(),
            };
            let (model, cfg, batch) = toy_setup(objective, energy, seed)?;
            let (_, grads) = loss_and_gradients(&model, &cfg, &batch)?;
            let like: Vec<Tensor> = model
                .online_params()
                .iter()
                .map(|p| p.value.clone())
                .collect();
            let numeric = finite_diff_gradient(
                |x| {
                    let mut m = model.clone();
                    for (p, t) in m.online_params_mut().into_iter().zip(unflatten(x, &like)?) {
                        p.value = t;
                    }
                    Ok(loss_and_gradients(&m, &cfg, &batch)?.0.total)
                },
                &flatten(&like),
                eps,
            )?;
            (flatten(&grads), numeric)
        }
    };
    let err = max_relative_error(&analytic, &numeric);
    let mut r = OracleResult::new(&format!("finite_diff/{}", target.name()), Some(seed))
        .with("max_rel_err", err);
    r.samples = Some(analytic.len());
    Ok(r)
}

fn pair_potential(a: &[f64], b: &[f64], mode: DistanceMode, s: RieszPower) -> Result<f64> {
    let z = match mode {
        DistanceMode::Euclidean => {
            let mut acc = 0.0;
            for k in 0..a.len() {
                acc += (a[k] - b[k]) * (a[k] - b[k]);
            }
            acc.sqrt()
        }
        DistanceMode::Angular => {
            let mut c = 0.0;
            for k in 0..a.len() {
                c += a[k] * b[k];
            }
            c.clamp(-1.0, 1.0).acos()
        }
    };
    if z == 0.0 {
        return oracle_err("coincident points");
    }
    Ok(match s {
        RieszPower::Log => -z.ln(),
        RieszPower::One => 1.0 / z,
        RieszPower::Two => 1.0 / (z * z),
    })
}

fn thomson_energy(x: &[Vec<f64>], mode: DistanceMode, s: RieszPower) -> Result<f64> {
    let mut e = 0.0;
    for i in 0..x.len() {
        for j in 0..x.len() {
            if i != j {
                e += pair_potential(&x[i], &x[j], mode, s)?;
            }
        }
    }
    Ok(e)
}

/// Riemannian gradient of the ordered-pair energy at every point.
fn thomson_gradient(x: &[Vec<f64>], mode: DistanceMode, s: RieszPower) -> Vec<Vec<f64>> {
    let n = x.len();
    let dim = x[0].len();
    let p = s.as_f64();
    let mut out = vec![vec![0.0; dim]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            // each unordered pair appears twice, so the factor is 2
            match mode {
                DistanceMode::Euclidean => {
                    let diff: Vec<f64> = (0..dim).map(|k| x[i][k] - x[j][k]).collect();
                    let r = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dk = if p == 0.0 {
                        -1.0 / r
                    } else {
                        -p * r.powf(-p - 1.0)
                    };
                    for k in 0..dim {
                        out[i][k] += 2.0 * dk * diff[k] / r;
                    }
                }
                DistanceMode::Angular => {
                    let c: f64 = (0..dim)
                        .map(|k| x[i][k] * x[j][k])
                        .sum::<f64>()
                        .clamp(-1.0, 1.0);
                    let theta = c.acos();
                    let dk = if p == 0.0 {
                        -1.0 / theta
                    } else {
                        -p * theta.powf(-p - 1.0)
                    };
                    // unit tangent at x_i pointing toward x_j; theta grows away from it
                    let tangent: Vec<f64> = (0..dim).map(|k| x[j][k] - c * x[i][k]).collect();
                    let tn = tangent.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if tn > 0.0 {
                        for k in 0..dim {
                            out[i][k] -= 2.0 * dk * tangent[k] / tn;
                        }
                    }
                }
            }
        }
        let radial: f64 = (0..dim).map(|k| out[i][k] * x[i][k]).sum();
        for k in 0..dim {
            out[i][k] -= radial * x[i][k];
        }
    }
    out
}

/// Final configuration and energy after every step.
#[derive(Clone, Debug, PartialEq)]
pub struct ThomsonRun {
    pub points: Vec<Vec<f64>>,
    pub trace: Vec<f64>,
}

impl ThomsonRun {
    /// Smallest and largest pairwise dot product.
    pub fn dot_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..self.points.len() {
            for j in i + 1..self.points.len() {
                let d: f64 = self.points[i]
                    .iter()
                    .zip(&self.points[j])
                    .map(|(a, b)| a * b)
                    .sum();
                lo = lo.min(d);
                hi = hi.max(d);
            }
        }
        (lo, hi)
    }

    pub fn result(&self, seed: u64) -> OracleResult {
        let (lo, hi) = self.dot_range();
        let mut r = OracleResult::new("thomson_descent", Some(seed))
            .with("energy", *self.trace.last().unwrap_or(&f64::NAN))
            .with("min_dot", lo)
            .with("max_dot", hi)
            .with("max_angle_deg", lo.clamp(-1.0, 1.0).acos().to_degrees())
            .with("min_angle_deg", hi.clamp(-1.0, 1.0).acos().to_degrees());
        r.samples = Some(self.points.len());
        r.steps = Some(self.trace.len());
        r
    }
}

/// Projected gradient descent for `n` points on the sphere `S^d` (ambient
/// dimension `d + 1`) from a seeded uniform start.
///
/// Each step moves along the negative Riemannian gradient and renormalizes.
/// A step that would raise the energy is halved until it does not (at most
/// 40 times), so the trace is non-increasing.
pub fn thomson_descent(
    n: usize,
    d: usize,
    s: RieszPower,
    mode: DistanceMode,
    seed: u64,
    steps: usize,
    lr: f64,
) -> Result<ThomsonRun> {
    if n < 2 {
        return oracle_err(format!("need at least 2 points, got {n}"));
    }
    if d < 1 || !(lr > 0.0) {
        return oracle_err("sphere dimension must be >= 1 and lr positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<Vec<f64>> = (0..n).map(|_| gaussian_point(&mut rng, d + 1)).collect();
    let mut e = thomson_energy(&x, mode, s)?;
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let g = thomson_gradient(&x, mode, s);
        if g.iter().flatten().any(|v| !v.is_finite()) {
            return oracle_err(format!("gradient diverged at step {step}"));
        }
        let mut h = lr;
        for _ in 0..40 {
            let cand: Vec<Vec<f64>> = x
                .iter()
                .zip(&g)
                .map(|(p, gp)| {
                    let q: Vec<f64> = p.iter().zip(gp).map(|(a, b)| a - h * b).collect();
                    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                    q.into_iter().map(|v| v / norm).collect()
                })
                .collect();
            match thomson_energy(&cand, mode, s) {
                Ok(ce) if ce <= e => {
                    x = cand;
                    e = ce;
                    break;
                }
                _ => h /= 2.0,
            }
        }
        if !e.is_finite() {
            return oracle_err(format!("energy diverged at step {step}"));
        }
        trace.push(e);
    }
    Ok(ThomsonRun { points: x, trace })
}

/// `log` of the mean Gaussian potential `exp(-t ||x - y||^2)` over all
/// ordered pairs of `n` uniform samples on `S^{d-1}` (ambient dimension `d`).
pub fn mc_uniform_uniformity(d: usize, t: f64, n: usize, seed: u64) -> Result<OracleResult> {
    if d < 2 || n < 2 {
        return oracle_err("need ambient dimension >= 2 and at least 2 samples");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<Vec<f64>> = (0..n).map(|_| gaussian_point(&mut rng, d)).collect();
    let rows = map_indices(ExecPolicy::default(), n, |i| {
        let mut acc = 0.0;
        for j in 0..n {
            if i != j {
                let mut sq = 0.0;
                for k in 0..d {
                    sq += (x[i][k] - x[j][k]) * (x[i][k] - x[j][k]);
                }
                acc += (-t * sq).exp();
            }
        }
        acc
    });
    let mean = rows.iter().sum::<f64>() / (n as f64 * (n as f64 - 1.0));
    let mut r = OracleResult::new("mc_uniform_uniformity", Some(seed))
        .with("uniformity", mean.ln())
        .with("d", d as f64)
        .with("t", t);
    r.samples = Some(n);
    Ok(r)
}

/// Pair statistic recomputed by [`bruteforce_pair_loss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PairLossKind {
    Uniformity { t: f64 },
    G2 { t: f64 },
    EnergyEuclidean { s: RieszPower },
    EnergyAngular { s: RieszPower },
}

/// Literal double loop over ordered pairs of rows. Energies are raw sums;
/// G2 is the mean and uniformity its log. No distance floors: coincident
/// points are an error for energies.
pub fn bruteforce_pair_loss(x: &Tensor, kind: PairLossKind) -> Result<f64> {
    let (n, d) = x.require_matrix("bruteforce input")?;
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    if n > BRUTEFORCE_MAX_N {
        return oracle_err(format!("at most {BRUTEFORCE_MAX_N} points, got {n}"));
    }
    let data = x.data();
    let row = |i: usize| &data[i * d..(i + 1) * d];
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            total += match kind {
                PairLossKind::Uniformity { t } | PairLossKind::G2 { t } => {
                    let mut sq = 0.0;
                    for k in 0..d {
                        sq += (row(i)[k] - row(j)[k]) * (row(i)[k] - row(j)[k]);
                    }
                    (-t * sq).exp()
                }
                PairLossKind::EnergyEuclidean { s } => {
                    pair_potential(row(i), row(j), DistanceMode::Euclidean, s)?
                }
                PairLossKind::EnergyAngular { s } => {
                    pair_potential(row(i), row(j), DistanceMode::Angular, s)?
                }
            };
        }
    }
    let pairs = (n * (n - 1)) as f64;
    Ok(match kind {
        PairLossKind::Uniformity { .. } => (total / pairs).ln(),
        PairLossKind::G2 { .. } => total / pairs,
        _ => total,
    })
}

/// Uniform random unit rows, for brute-force comparisons.
pub fn random_sphere_points(n: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| gaussian_point(&mut rng, dim)).collect();
    Tensor::from_rows(&rows).expect("equal row lengths")
}
