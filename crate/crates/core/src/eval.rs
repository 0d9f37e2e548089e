//! Frozen-representation evaluation: linear probe, weighted k-NN, collapse
//! metrics and the diagnostic energy report.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::energy::{self, EnergySpec, NeuronSet, SubNetwork};
use crate::energy::{gaussian_kde_2d, vmf_kde, Grid2d, KdeCircle, KdePlane};
use crate::engine::ByolModel;
use crate::error::{shape_err, Error, Result};
use crate::nn::Mode;
use crate::parallel::{map_indices, ExecPolicy};
use crate::tensor::{l2_normalize, Tensor};

/// Below this mean per-dimension std the representation counts as collapsed.
pub const COLLAPSE_STD: f64 = 0.01;

/// Encoder outputs with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationSet {
    pub reps: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: String,
}

impl RepresentationSet {
    pub fn new(reps: Tensor, labels: Vec<usize>, num_classes: usize, split: &str) -> Result<Self> {
        let (n, _) = reps.require_matrix("representations")?;
        if n != labels.len() {
            return shape_err(format!("{n} representations but {} labels", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Config(format!(
                "label {bad} out of {num_classes} classes"
            )));
        }
        Ok(Self {
            reps,
            labels,
            num_classes,
            split: split.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Eval-mode encoder outputs for every sample, in dataset order.
pub fn extract_representations(
    model: &ByolModel,
    data: &Dataset,
    split: &str,
    policy: ExecPolicy,
) -> Result<RepresentationSet> {
    if data.input_dim() != model.spec.input_dim {
        return shape_err(format!(
            "dataset width {} does not match encoder input {}",
            data.input_dim(),
            model.spec.input_dim
        ));
    }
    let x = data.eval_matrix(policy);
    let reps = model.encode(&x, Mode::Eval)?;
    RepresentationSet::new(reps, data.labels(), data.num_classes, split)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ft_epochs: usize,
    pub ft_lr: f64,
    pub ft_momentum: f64,
    pub ft_weight_decay: f64,
    pub ft_batch_size: usize,
    pub knn_k: usize,
    pub knn_temperature: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ft_epochs: 80,
            ft_lr: 0.2,
            ft_momentum: 0.9,
            ft_weight_decay: 0.0,
            ft_batch_size: 256,
            knn_k: 10,
            knn_temperature: 0.07,
            seed: 0,
        }
    }
}

/// Accuracies in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub top1: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub top5: Option<f64>,
}

fn check_pair(train: &RepresentationSet, test: &RepresentationSet) -> Result<()> {
    if train.reps.cols() != test.reps.cols() {
        return shape_err(format!(
            "train width {} differs from test width {}",
            train.reps.cols(),
            test.reps.cols()
        ));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::TooFewSamples {
            needed: 1,
            got: train.len().min(test.len()),
        });
    }
    let first = train.labels[0];
    if train.labels.iter().all(|&l| l == first) {
        return Err(Error::DegenerateLabels);
    }
    Ok(())
}

/// Indices of the `k` largest entries, ties to the lower index.
fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Softmax regression on frozen representations with momentum SGD and a
/// cosine learning rate. Weights start at zero and inputs are divided by
/// their mean row norm, so the result is invariant to rotations.
pub fn linear_eval(
    train: &RepresentationSet,
    test: &RepresentationSet,
    cfg: &EvalConfig,
) -> Result<Accuracy> {
    check_pair(train, test)?;
    if cfg.ft_batch_size == 0 || !(cfg.ft_lr >= 0.0) {
        return Err(Error::Config(
            "ft_batch_size must be positive and ft_lr non-negative".into(),
        ));
    }
    let c = train.num_classes.max(test.num_classes);
    let d = train.reps.cols();
    let mean_norm = train
        .reps
        .row_iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / train.len() as f64;
    let scale = if mean_norm > 0.0 {
        1.0 / mean_norm
    } else {
        1.0
    };
    let xtr = train.reps.scale(scale);
    let xte = test.reps.scale(scale);

    let mut w = Tensor::zeros(&[c, d]);
    let mut b = vec![0.0; c];
    let mut vw = Tensor::zeros(&[c, d]);
    let mut vb = vec![0.0; c];
    let n = train.len();
    let bs = cfg.ft_batch_size.min(n);
    let steps_per_epoch = n.div_ceil(bs);
    let total = (cfg.ft_epochs * steps_per_epoch).max(1) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    for _ in 0..cfg.ft_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let lr = cfg.ft_lr * ((std::f64::consts::PI * step as f64 / total).cos() + 1.0) / 2.0;
            let xb = xtr.select_rows(chunk);
            let mut logits = xb.matmul_nt(&w)?;
            // dL/dlogits = softmax - onehot, averaged over the batch
            for (r, &i) in chunk.iter().enumerate() {
                let row = logits.row_mut(r);
                for (j, v) in row.iter_mut().enumerate() {
                    *v += b[j];
                }
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z * chunk.len() as f64;
                }
                row[train.labels[i]] -= 1.0 / chunk.len() as f64;
            }
            let gw = logits.matmul_tn(&xb)?;
            for j in 0..c {
                let gb: f64 = (0..chunk.len()).map(|r| logits.row(r)[j]).sum();
                vb[j] = cfg.ft_momentum * vb[j] + gb;
                b[j] -= lr * vb[j];
            }
            for ((v, wi), &g) in vw.data_mut().iter_mut().zip(w.data_mut()).zip(gw.data()) {
                *v = cfg.ft_momentum * *v + g + cfg.ft_weight_decay * *wi;
                *wi -= lr * *v;
            }
            step += 1;
        }
    }

    let logits = xte.matmul_nt(&w)?;
    let mut hit1 = 0usize;
    let mut hit5 = 0usize;
    for (r, &label) in test.labels.iter().enumerate() {
        let scores: Vec<f64> = logits.row(r).iter().zip(&b).map(|(l, bb)| l + bb).collect();
        let ranked = top_k(&scores, 5);
        hit1 += (ranked[0] == label) as usize;
        hit5 += ranked.contains(&label) as usize;
    }
    let pct = |h: usize| 100.0 * h as f64 / test.len() as f64;
    Ok(Accuracy {
        top1: pct(hit1),
        top5: (c >= 5).then(|| pct(hit5)),
    })
}

/// Cosine-similarity k-NN; each neighbor votes `exp(sim / temperature)`.
/// Equal votes go to the lowest class index.
pub fn knn_eval(
    train: &RepresentationSet,
    test: &RepresentationSet,
    cfg: &EvalConfig,
    policy: ExecPolicy,
) -> Result<Accuracy> {
    check_pair(train, test)?;
    if cfg.knn_k == 0 || cfg.knn_k > train.len() {
        return Err(Error::Config(format!(
            "knn_k must be in [1, {}], got {}",
            train.len(),
            cfg.knn_k
        )));
    }
    if !(cfg.knn_temperature > 0.0) {
        return Err(Error::Config("knn_temperature must be positive".into()));
    }
    let a = l2_normalize(&train.reps, 1e-12)?;
    let q = l2_normalize(&test.reps, 1e-12)?;
    let c = train.num_classes.max(test.num_classes);
    let hits = map_indices(policy, test.len(), |r| {
        let sims: Vec<f64> = a
            .row_iter()
            .map(|t| crate::tensor::dot(t, q.row(r)))
            .collect();
        let nn = top_k(&sims, cfg.knn_k);
        // shift by the best similarity so tiny temperatures do not overflow
        let top = sims[nn[0]];
        let mut votes = vec![0.0; c];
        for &i in &nn {
            votes[train.labels[i]] += ((sims[i] - top) / cfg.knn_temperature).exp();
        }
        let pred = top_k(&votes, 1)[0];
        (pred == test.labels[r]) as usize
    });
    Ok(Accuracy {
        top1: 100.0 * hits.iter().sum::<usize>() as f64 / test.len() as f64,
        top5: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseMetrics {
    /// Mean per-dimension std of the l2-normalized representations.
    pub feature_std: f64,
    pub g2: f64,
    pub uniformity: f64,
    /// `None` when fewer than two representations are non-zero.
    pub repr_energy: Option<f64>,
    pub collapsed: bool,
}

/// Row-normalized copy; rows of (near) zero norm stay zero instead of failing.
fn unit_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let inv = if n >= 1e-12 { 1.0 / n } else { 0.0 };
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// Representation energy over the rows that are not (near) zero; `None`
/// when fewer than two remain.
fn nonzero_repr_energy(x: &Tensor, spec: &EnergySpec, seed: u64) -> Result<Option<f64>> {
    let keep: Vec<usize> = (0..x.rows())
        .filter(|&i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt() >= 1e-12)
        .collect();
    if keep.len() < 2 {
        return Ok(None);
    }
    energy::representation_energy(&x.select_rows(&keep), spec, seed).map(Some)
}

pub fn feature_std(reps: &Tensor) -> Result<f64> {
    let z = unit_rows(reps);
    let (n, d) = z.require_matrix("feature_std")?;
    let mut total = 0.0;
    for j in 0..d {
        let mean = (0..n).map(|i| z.row(i)[j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (z.row(i)[j] - mean).powi(2)).sum::<f64>() / n as f64;
        total += var.sqrt();
    }
    Ok(total / d as f64)
}

/// Spread and uniformity of a representation batch. G2 and uniformity use
/// the l2-normalized rows with kernel parameter `t`.
pub fn collapse_metrics(
    reps: &Tensor,
    t: f64,
    spec: &EnergySpec,
    seed: u64,
) -> Result<CollapseMetrics> {
    let n = reps.rows();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let fs = feature_std(reps)?;
    let g2 = energy::gaussian_potential_g2(&unit_rows(reps), t)?;
    Ok(CollapseMetrics {
        feature_std: fs,
        g2,
        uniformity: g2.ln(),
        repr_energy: nonzero_repr_energy(reps, spec, seed)?,
        collapsed: fs < COLLAPSE_STD,
    })
}

/// Top principal directions by power iteration with deflation.
pub fn principal_directions(
    x: &Tensor,
    k: usize,
    max_iters: usize,
    tol: f64,
) -> Result<Vec<Vec<f64>>> {
    let (n, d) = x.require_matrix("principal_directions")?;
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| x.row(i)[j]).sum::<f64>() / n as f64)
        .collect();
    let mut centered = x.clone();
    for i in 0..n {
        for (v, m) in centered.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let mut cov = centered.matmul_tn(&centered)?.scale(1.0 / n as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(k);
    for _ in 0..k.min(d) {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        normalize(&mut v);
        let mut lambda = 0.0;
        for _ in 0..max_iters {
            let mut w: Vec<f64> = (0..d).map(|i| crate::tensor::dot(cov.row(i), &v)).collect();
            lambda = w.iter().map(|a| a * a).sum::<f64>().sqrt();
            if lambda == 0.0 {
                break;
            }
            normalize(&mut w);
            let delta = w
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            v = w;
            if delta < tol {
                break;
            }
        }
        for i in 0..d {
            for j in 0..d {
                cov.row_mut(i)[j] -= lambda * v[i] * v[j];
            }
        }
        out.push(v);
    }
    Ok(out)
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|a| *a /= n);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseConfig {
    pub probe_size: usize,
    pub t: f64,
    pub kappa: f64,
    pub circle_grid: usize,
    pub bandwidth: f64,
    pub plane_grid: usize,
    pub seed: u64,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            probe_size: energy::REPR_SAMPLE_CAP,
            t: 2.0,
            kappa: 50.0,
            circle_grid: 360,
            bandwidth: 0.1,
            plane_grid: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEnergy {
    pub layer: String,
    pub energy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub n_samples: usize,
    pub repr_dim: usize,
    pub feature_std: f64,
    pub g2: f64,
    pub uniformity: f64,
    pub repr_energy: Option<f64>,
    pub collapsed: bool,
    /// `native` when the projector head or the representation is 2-D,
    /// `pca` otherwise.
    pub projection: String,
    pub neuron_energy: Vec<LayerEnergy>,
    pub layer_repr_energy: Vec<LayerEnergy>,
    pub energy_spec: EnergySpec,
}

/// Report plus the density curves behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnosis {
    pub report: EnergyReport,
    pub circle: KdeCircle,
    pub plane: KdePlane,
}

/// Energy diagnostics of a model on a dataset.
///
/// Neuron energies cover every online weight matrix. Representation
/// energies use the first `probe_size` samples at every encoder, projector
/// and predictor layer output. The KDEs use the projector output when it is
/// 2-D, else the top two principal components of the encoder output, in
/// both cases l2-normalized onto the circle.
pub fn diagnose(
    model: &ByolModel,
    data: &Dataset,
    spec: &EnergySpec,
    cfg: &DiagnoseConfig,
) -> Result<Diagnosis> {
    let reps = extract_representations(model, data, "all", ExecPolicy::default())?;
    let cm = collapse_metrics(&reps.reps, cfg.t, spec, cfg.seed)?;

    let mut neuron_energy = Vec::new();
    for p in model.selected_weights(&SubNetwork::ALL) {
        let set = NeuronSet::from_weights(&p.value, p.name.clone())?;
        neuron_energy.push(LayerEnergy {
            layer: p.name.clone(),
            energy: Some(energy::normalized_layer_energy(&set, spec)?),
        });
    }

    let probe_idx: Vec<usize> = (0..data.len().min(cfg.probe_size)).collect();
    let probe = data.subset(&probe_idx).eval_matrix(ExecPolicy::default());
    let mut layer_repr_energy = Vec::new();
    let mut g = crate::autograd::Graph::new();
    let x = g.constant(probe);
    let mut input = x;
    for net in [
        &model.online_encoder,
        &model.online_projector,
        &model.predictor,
    ] {
        let trace = net.forward(&mut g, input, Mode::Eval, false)?;
        for (i, &a) in trace.activations.iter().enumerate() {
            layer_repr_energy.push(LayerEnergy {
                layer: format!("{}.layer{i}", net.name),
                energy: nonzero_repr_energy(g.value(a), spec, cfg.seed)?,
            });
        }
        input = trace.output;
    }

    let d = reps.reps.cols();
    let (flat, projection) = if model.spec.proj_dim == 2 {
        (
            model
                .online_projector
                .forward_tensor(&reps.reps, Mode::Eval)?,
            "native",
        )
    } else if d == 2 {
        (reps.reps.clone(), "native")
    } else {
        let dirs = principal_directions(&reps.reps, 2, 100, 1e-10)?;
        let rows: Vec<Vec<f64>> = reps
            .reps
            .row_iter()
            .map(|r| dirs.iter().map(|u| crate::tensor::dot(r, u)).collect())
            .collect();
        (Tensor::from_rows(&rows)?, "pca")
    };
    let on_circle = unit_rows(&flat);
    let angles: Vec<f64> = on_circle
        .row_iter()
        .map(|r| r[1].atan2(r[0]).rem_euclid(std::f64::consts::TAU))
        .collect();
    let circle = vmf_kde(&angles, cfg.kappa, cfg.circle_grid)?;
    let plane = gaussian_kde_2d(
        &on_circle,
        cfg.bandwidth,
        Grid2d::square(1.25, cfg.plane_grid),
    )?;

    Ok(Diagnosis {
        report: EnergyReport {
            n_samples: reps.len(),
            repr_dim: d,
            feature_std: cm.feature_std,
            g2: cm.g2,
            uniformity: cm.uniformity,
            repr_energy: cm.repr_energy,
            collapsed: cm.collapsed,
            projection: projection.to_string(),
            neuron_energy,
            layer_repr_energy,
            energy_spec: spec.clone(),
        },
        circle,
        plane,
    })
}

impl Diagnosis {
    /// Writes `report.json`, `kde_circle.csv`, `kde_plane.csv` and
    /// `layer_energy.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("report.json"),
            serde_json::to_vec_pretty(&self.report)?,
        )?;
        let mut s = String::from("theta,density\n");
        for (t, v) in self.circle.theta.iter().zip(&self.circle.density) {
            s.push_str(&format!("{t},{v}\n"));
        }
        std::fs::write(dir.join("kde_circle.csv"), s)?;
        let mut s = String::from("x,y,density\n");
        for (iy, y) in self.plane.ys.iter().enumerate() {
            for (ix, x) in self.plane.xs.iter().enumerate() {
                s.push_str(&format!("{x},{y},{}\n", self.plane.at(ix, iy)));
            }
        }
        std::fs::write(dir.join("kde_plane.csv"), s)?;
        let mut s = String::from("kind,layer,energy\n");
        let rows = (self.report.neuron_energy.iter().map(|l| ("neuron", l))).chain(
            self.report
                .layer_repr_energy
                .iter()
                .map(|l| ("representation", l)),
        );
        for (kind, l) in rows {
            let e = l.energy.map(|e| e.to_string()).unwrap_or_default();
            s.push_str(&format!("{kind},{},{e}\n", l.layer));
        }
        std::fs::write(dir.join("layer_energy.csv"), s)?;
        Ok(())
    }
}
