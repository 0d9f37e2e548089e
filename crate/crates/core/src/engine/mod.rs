//! Self-supervised training: model, per-step updates and full runs.

mod model;
mod run;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{BnStats, Graph, Var};
use crate::data::{AugmentConfig, PairBatch};
use crate::energy::{self, EnergySpec};
use crate::error::{Error, Result};
use crate::nn::{Mlp, Mode};
use crate::objectives::{self, LossBreakdown, LossConfig};
use crate::optim::{Lars, Optimizer, Sgd};
use crate::parallel::ExecPolicy;
use crate::schedule::ScheduleState;
use crate::tensor::Tensor;
pub use model::{ByolModel, ModelSpec};
pub use run::{read_metrics, run_training, RunDir, RunOptions, RunSummary};

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Byol,
    ByolUni,
    ByolMhe,
    Contrastive,
}

impl Objective {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "byol" => Ok(Self::Byol),
            "byol_uni" => Ok(Self::ByolUni),
            "byol_mhe" => Ok(Self::ByolMhe),
            "contrastive" => Ok(Self::Contrastive),
            _ => Err(Error::Config(format!(
                "unknown objective {s:?} (byol, byol_uni, byol_mhe, contrastive)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Lars,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub objective: Objective,
    pub loss: LossConfig,
    pub energy: EnergySpec,
    pub augment: AugmentConfig,
    pub optimizer: OptimizerKind,
    /// Scaled by `batch_size * accumulation_steps / 256`.
    pub lr_base: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lars_trust: f64,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub epochs: u64,
    /// Clamped to `epochs`.
    pub warmup_epochs: u64,
    pub tau_base: f64,
    /// Average the loss over both prediction directions.
    pub symmetric: bool,
    pub seed: u64,
    /// Log energies every this many steps; 0 disables.
    pub energy_every: u64,
    pub disable_predictor: bool,
    pub disable_stop_gradient: bool,
    pub independent_target: bool,
    #[serde(skip)]
    pub policy: ExecPolicy,
}

impl TrainConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            model: ModelSpec::new(input_dim),
            objective: Objective::Byol,
            loss: LossConfig::default(),
            energy: EnergySpec::default(),
            augment: AugmentConfig::default(),
            optimizer: OptimizerKind::Lars,
            lr_base: 0.2,
            momentum: 0.9,
            weight_decay: 1e-6,
            lars_trust: Lars::DEFAULT_TRUST,
            batch_size: 128,
            accumulation_steps: 1,
            epochs: 50,
            warmup_epochs: 10,
            tau_base: 0.99,
            symmetric: true,
            seed: 0,
            energy_every: 0,
            disable_predictor: false,
            disable_stop_gradient: false,
            independent_target: false,
            policy: ExecPolicy::default(),
        }
    }

    pub fn effective_lr(&self) -> f64 {
        self.lr_base * (self.batch_size * self.accumulation_steps) as f64 / 256.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if self.accumulation_steps == 0 {
            return bad("accumulation_steps must be at least 1".into());
        }
        if !(self.lr_base >= 0.0) || !self.lr_base.is_finite() {
            return bad(format!(
                "lr_base must be finite and non-negative, got {}",
                self.lr_base
            ));
        }
        if !(0.0..=1.0).contains(&self.tau_base) {
            return bad(format!("tau_base must be in [0,1], got {}", self.tau_base));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0,1), got {}", self.momentum));
        }
        if self.weight_decay < 0.0 || self.lars_trust <= 0.0 {
            return bad("weight_decay must be >= 0 and lars_trust > 0".into());
        }
        if !(self.loss.temperature > 0.0) || !(self.loss.t > 0.0) || self.loss.lambda_uni < 0.0 {
            return bad("temperature and t must be positive, lambda_uni non-negative".into());
        }
        self.energy.validate()?;
        self.augment.validate()
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> Result<u64> {
        let per_step = self.batch_size * self.accumulation_steps;
        let k = n_train / per_step;
        if k == 0 {
            return Err(Error::Config(format!(
                "{n_train} training samples cannot fill one step of {per_step}"
            )));
        }
        Ok(k as u64)
    }

    pub fn build_optimizer(&self) -> Optimizer {
        match self.optimizer {
            OptimizerKind::Lars => {
                Optimizer::Lars(Lars::new(self.momentum, self.weight_decay, self.lars_trust))
            }
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(self.momentum, self.weight_decay)),
        }
    }
}

/// Model, optimizer and schedule position; everything needed to resume.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: ByolModel,
    pub optimizer: Optimizer,
    pub schedule: ScheduleState,
    /// Completed epochs.
    pub epoch: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, steps_per_epoch: u64) -> Result<Self> {
        cfg.validate()?;
        let model = ByolModel::init(&cfg.model, cfg.seed, cfg.independent_target)?;
        let total = cfg.epochs * steps_per_epoch;
        Ok(Self {
            model,
            optimizer: cfg.build_optimizer(),
            schedule: ScheduleState::new(
                total,
                cfg.warmup_epochs * steps_per_epoch,
                cfg.effective_lr(),
                cfg.tau_base,
            ),
            epoch: 0,
        })
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub loss_byol: f64,
    pub loss_uni: f64,
    pub loss_mhe: f64,
    pub tau: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub repr_energy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub g2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub layer_energy: Option<BTreeMap<String, f64>>,
}

struct MicroResult {
    loss: LossBreakdown,
    grads: Vec<Tensor>,
    online_stats: [Vec<Vec<Option<BnStats>>>; 3],
    target_stats: [Vec<Vec<Option<BnStats>>>; 2],
    representations: Tensor,
}

struct OnlinePass {
    h: Var,
    z: Var,
    p: Option<Var>,
}

fn weight_positions(net: &Mlp) -> Vec<usize> {
    let mut pos = Vec::new();
    let mut i = 0;
    for l in &net.layers {
        pos.push(i);
        i += if l.bn.is_some() { 4 } else { 2 };
    }
    pos
}

fn forward_backward(
    model: &ByolModel,
    cfg: &TrainConfig,
    batch: &PairBatch,
) -> Result<MicroResult> {
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall(batch.len()));
    }
    let mut g = Graph::with_policy(cfg.policy);
    let nets = [
        &model.online_encoder,
        &model.online_projector,
        &model.predictor,
    ];
    let use_pred = !cfg.disable_predictor && cfg.objective != Objective::Contrastive;
    let bound: Vec<Vec<Var>> = nets
        .iter()
        .enumerate()
        .map(|(k, n)| n.bind(&mut g, k < 2 || use_pred))
        .collect();
    let views = [
        g.constant(batch.view1.clone()),
        g.constant(batch.view2.clone()),
    ];
    let mut online_stats: [Vec<Vec<Option<BnStats>>>; 3] = Default::default();
    let mut target_stats: [Vec<Vec<Option<BnStats>>>; 2] = Default::default();

    let online = |g: &mut Graph,
                  v: usize,
                  stats: &mut [Vec<Vec<Option<BnStats>>>; 3]|
     -> Result<OnlinePass> {
        let h = model
            .online_encoder
            .forward_bound(g, views[v], Mode::Train, &bound[0])?;
        let z = model
            .online_projector
            .forward_bound(g, h.output, Mode::Train, &bound[1])?;
        stats[0].push(h.batch_stats);
        stats[1].push(z.batch_stats);
        let p = if use_pred {
            let p = model
                .predictor
                .forward_bound(g, z.output, Mode::Train, &bound[2])?;
            stats[2].push(p.batch_stats);
            Some(p.output)
        } else {
            None
        };
        Ok(OnlinePass {
            h: h.output,
            z: z.output,
            p,
        })
    };
    let passes = [
        online(&mut g, 0, &mut online_stats)?,
        online(&mut g, 1, &mut online_stats)?,
    ];
    let representations = g.value(passes[0].h).clone();

    let mut loss = LossBreakdown::default();
    let mut total;
    if cfg.objective == Objective::Contrastive {
        let za = g.normalize_rows(passes[0].z, NORM_EPS)?;
        let zb = g.normalize_rows(passes[1].z, NORM_EPS)?;
        let all = g.concat_rows(&[za, zb])?;
        let b = batch.len();
        let n = 2 * b;
        let partner: Vec<usize> = (0..n).map(|i| (i + b) % n).collect();
        let neg_idx: Vec<usize> = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i && j != (i + b) % n))
            .collect();
        let m = g.value(all).cols();
        let anchors = g.gather_rows(all, partner)?;
        let negs = g.gather_rows(all, neg_idx)?;
        let negs = g.reshape(negs, vec![n, n - 2, m])?;
        total = objectives::info_nce_graph(&mut g, anchors, all, negs, cfg.loss.temperature)?;
        loss.byol = g.value(total).item();
    } else {
        let mut targets = Vec::with_capacity(2);
        for v in 0..2 {
            let t = if cfg.disable_stop_gradient {
                passes[v].z
            } else {
                let h = model
                    .target_encoder
                    .forward(&mut g, views[v], Mode::Train, false)?;
                let z = model
                    .target_projector
                    .forward(&mut g, h.output, Mode::Train, false)?;
                target_stats[0].push(h.batch_stats);
                target_stats[1].push(z.batch_stats);
                z.output
            };
            targets.push(g.normalize_rows(t, NORM_EPS)?);
        }
        let dirs: &[(usize, usize)] = if cfg.symmetric {
            &[(0, 1), (1, 0)]
        } else {
            &[(0, 1)]
        };
        let mut byol: Option<Var> = None;
        for &(a, b) in dirs {
            let q = passes[a].p.unwrap_or(passes[a].z);
            let q = g.normalize_rows(q, NORM_EPS)?;
            let l = objectives::byol_loss_graph(&mut g, q, targets[b])?;
            byol = Some(match byol {
                Some(acc) => g.add(acc, l)?,
                None => l,
            });
        }
        let byol = g.scale(
            byol.expect("at least one direction"),
            1.0 / dirs.len() as f64,
        );
        loss.byol = g.value(byol).item();
        total = byol;
        if cfg.objective == Objective::ByolUni && cfg.loss.lambda_uni != 0.0 {
            let z = g.concat_rows(&[passes[0].z, passes[1].z])?;
            let z = g.normalize_rows(z, NORM_EPS)?;
            let u = objectives::uniformity_loss_graph(&mut g, z, cfg.loss.t)?;
            loss.uni = g.value(u).item();
            let scaled = g.scale(u, cfg.loss.lambda_uni);
            total = g.add(total, scaled)?;
        }
        if cfg.objective == Objective::ByolMhe {
            let mut ws = Vec::new();
            for &s in &cfg.energy.selection {
                let k = match s {
                    energy::SubNetwork::Encoder => 0,
                    energy::SubNetwork::Projector => 1,
                    energy::SubNetwork::Predictor => 2,
                };
                ws.extend(weight_positions(nets[k]).into_iter().map(|i| bound[k][i]));
            }
            if let Some(m) = energy::mhe_term(&mut g, &ws, &cfg.energy)? {
                loss.mhe = g.value(m).item();
                total = g.add(total, m)?;
            }
        }
    }
    loss.total = g.value(total).item();

    let grads = g.backward(total)?;
    let grads = nets
        .iter()
        .zip(&bound)
        .flat_map(|(net, vars)| {
            net.params()
                .into_iter()
                .zip(vars)
                .map(|(p, &v)| grads.get_or_zeros(v, p.value.shape()))
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(MicroResult {
        loss,
        grads,
        online_stats,
        target_stats,
        representations,
    })
}

/// One optimizer step over the given micro-batches: gradients are averaged,
/// then the online networks step and the target networks follow by EMA.
/// On divergence the state is left untouched.
pub fn accumulate_gradients(
    state: &mut TrainState,
    cfg: &TrainConfig,
    micro: &[PairBatch],
) -> Result<StepMetrics> {
    if micro.is_empty() {
        return Err(Error::Config("no micro-batches".into()));
    }
    let step = state.schedule.step;
    let weight = 1.0 / micro.len() as f64;
    let mut results = Vec::with_capacity(micro.len());
    for mb in micro {
        results.push(forward_backward(&state.model, cfg, mb)?);
    }
    let mut loss = LossBreakdown::default();
    for r in &results {
        loss.total += weight * r.loss.total;
        loss.byol += weight * r.loss.byol;
        loss.uni += weight * r.loss.uni;
        loss.mhe += weight * r.loss.mhe;
    }
    let grads_finite = results
        .iter()
        .all(|r| r.grads.iter().all(Tensor::is_finite));
    if !loss.total.is_finite() || !grads_finite {
        return Err(Error::Divergence {
            step,
            detail: format!("loss {} (gradients finite: {grads_finite})", loss.total),
        });
    }

    let mut metrics = StepMetrics {
        step,
        epoch: state.epoch,
        loss: loss.total,
        loss_byol: loss.byol,
        loss_uni: loss.uni,
        loss_mhe: loss.mhe,
        tau: state.schedule.tau(),
        lr: state.schedule.lr(),
        repr_energy: None,
        g2: None,
        layer_energy: None,
    };
    if cfg.energy_every > 0 && step.is_multiple_of(cfg.energy_every) {
        let h = &results[0].representations;
        metrics.repr_energy = Some(energy::representation_energy(
            h,
            &cfg.energy,
            cfg.seed ^ step,
        )?);
        let z = crate::tensor::l2_normalize(h, NORM_EPS)?;
        metrics.g2 = Some(energy::gaussian_potential_g2_with(
            &z, cfg.loss.t, cfg.policy,
        )?);
        let mut layers = BTreeMap::new();
        for p in state.model.selected_weights(&energy::SubNetwork::ALL) {
            let set = energy::NeuronSet::from_weights(&p.value, p.name.clone())?;
            layers.insert(
                p.name.clone(),
                energy::normalized_layer_energy(&set, &cfg.energy)?,
            );
        }
        metrics.layer_energy = Some(layers);
    }

    let model = &mut state.model;
    model.zero_grad();
    for r in &results {
        for (p, g) in model.online_params_mut().into_iter().zip(&r.grads) {
            p.grad.axpy(weight, g)?;
        }
        for (net, stats) in [
            &mut model.online_encoder,
            &mut model.online_projector,
            &mut model.predictor,
        ]
        .into_iter()
        .zip(&r.online_stats)
        {
            stats.iter().for_each(|s| net.commit_stats(s));
        }
        for (net, stats) in [&mut model.target_encoder, &mut model.target_projector]
            .into_iter()
            .zip(&r.target_stats)
        {
            stats.iter().for_each(|s| net.commit_stats(s));
        }
    }
    let lr = metrics.lr;
    state.optimizer.step(&mut model.online_params_mut(), lr);
    if cfg.objective != Objective::Contrastive {
        model.ema_step(metrics.tau)?;
    }
    state.schedule.advance();
    Ok(metrics)
}

/// Single-batch update; identical to [`accumulate_gradients`] with one
/// micro-batch.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    batch: &PairBatch,
) -> Result<StepMetrics> {
    accumulate_gradients(state, cfg, std::slice::from_ref(batch))
}

/// In-batch InfoNCE update of the online encoder and projector; the
/// predictor and target networks are left alone.
pub fn contrastive_train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    batch: &PairBatch,
) -> Result<StepMetrics> {
    if cfg.objective != Objective::Contrastive {
        return Err(Error::Config(
            "contrastive_train_step needs objective=contrastive".into(),
        ));
    }
    train_step(state, cfg, batch)
}

/// Loss components and gradients for every online parameter, in
/// [`ByolModel::online_params`] order, without touching the model.
pub fn loss_and_gradients(
    model: &ByolModel,
    cfg: &TrainConfig,
    batch: &PairBatch,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let r = forward_backward(model, cfg, batch)?;
    Ok((r.loss, r.grads))
}
