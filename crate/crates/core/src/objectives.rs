//! Training losses, both as plain values and as graph nodes.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::energy::{self, EnergySpec, PairKernel};
use crate::engine::ByolModel;
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Allowed deviation from unit norm for inputs that must be normalized.
pub const NORM_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// InfoNCE temperature.
    pub temperature: f64,
    /// Uniformity scale.
    pub t: f64,
    pub lambda_uni: f64,
    /// Alignment power.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            t: 2.0,
            lambda_uni: 0.125,
            alpha: 2.0,
        }
    }
}

fn check_unit_rows(x: &Tensor) -> Result<()> {
    for (i, row) in x.row_iter().enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::NotNormalized { row: i, norm });
        }
    }
    Ok(())
}

/// InfoNCE with `anchor: [B, m]`, `positive: [B, m]`, `negatives: [B, M, m]`.
///
/// Per row: `-log(e^{a.p/τ} / (e^{a.p/τ} + Σ_i e^{n_i.p/τ}))`, averaged over
/// the batch.
pub fn info_nce(
    anchor: &Tensor,
    positive: &Tensor,
    negatives: &Tensor,
    temperature: f64,
) -> Result<f64> {
    Ok(info_nce_with_grad(anchor, positive, negatives, temperature)?.0)
}

/// [`info_nce`] and its gradients with respect to the three inputs.
pub fn info_nce_with_grad(
    anchor: &Tensor,
    positive: &Tensor,
    negatives: &Tensor,
    temperature: f64,
) -> Result<(f64, Tensor, Tensor, Tensor)> {
    let (b, m) = anchor.require_matrix("info_nce anchor")?;
    anchor.require_same_shape(positive, "info_nce positive")?;
    let ns = negatives.shape();
    if ns.len() != 3 || ns[0] != b || ns[2] != m {
        return Err(Error::Shape(format!(
            "info_nce negatives must be [{b}, M, {m}], got {ns:?}"
        )));
    }
    let big_m = ns[1];
    if big_m == 0 || b == 0 {
        return Err(Error::Shape("info_nce needs B >= 1 and M >= 1".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    check_unit_rows(anchor)?;
    check_unit_rows(positive)?;
    for r in 0..b * big_m {
        let row = &negatives.data()[r * m..(r + 1) * m];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::NotNormalized { row: r, norm });
        }
    }

    let mut ga = Tensor::zeros(anchor.shape());
    let mut gp = Tensor::zeros(positive.shape());
    let mut gn = Tensor::zeros(negatives.shape());
    let mut total = 0.0;
    let inv_b = 1.0 / b as f64;
    let mut logits = vec![0.0; big_m + 1];
    for r in 0..b {
        let a = anchor.row(r);
        let p = positive.row(r);
        let neg = |i: usize| &negatives.data()[(r * big_m + i) * m..(r * big_m + i + 1) * m];
        logits[0] = tensor::dot(a, p) / temperature;
        for i in 0..big_m {
            logits[i + 1] = tensor::dot(neg(i), p) / temperature;
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        let lse = mx + z.ln();
        total += lse - logits[0];

        let probs: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
        let c0 = (probs[0] - 1.0) * inv_b / temperature;
        for k in 0..m {
            ga.row_mut(r)[k] += c0 * p[k];
            gp.row_mut(r)[k] += c0 * a[k];
        }
        for i in 0..big_m {
            let ci = probs[i + 1] * inv_b / temperature;
            let n = neg(i).to_vec();
            let off = (r * big_m + i) * m;
            for k in 0..m {
                gn.data_mut()[off + k] += ci * p[k];
                gp.row_mut(r)[k] += ci * n[k];
            }
        }
    }
    Ok((total * inv_b, ga, gp, gn))
}

/// Graph node for [`info_nce`].
pub fn info_nce_graph(
    g: &mut Graph,
    anchor: Var,
    positive: Var,
    negatives: Var,
    temperature: f64,
) -> Result<Var> {
    let (value, ga, gp, gn) = info_nce_with_grad(
        g.value(anchor),
        g.value(positive),
        g.value(negatives),
        temperature,
    )?;
    g.custom_scalar(value, vec![(anchor, ga), (positive, gp), (negatives, gn)])
}

/// Mean of `||fx - fy||^alpha` over positive pairs.
pub fn alignment_loss(fx: &Tensor, fy: &Tensor, alpha: f64) -> Result<f64> {
    check_unit_rows(fx)?;
    check_unit_rows(fy)?;
    Ok(alignment_with_grad(fx, fy, alpha)?.0)
}

fn alignment_with_grad(fx: &Tensor, fy: &Tensor, alpha: f64) -> Result<(f64, Tensor, Tensor)> {
    let (b, _) = fx.require_matrix("alignment")?;
    fx.require_same_shape(fy, "alignment")?;
    if !(alpha > 0.0) {
        return Err(Error::Config(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let mut gx = Tensor::zeros(fx.shape());
    let mut total = 0.0;
    for r in 0..b {
        let (x, y) = (fx.row(r), fy.row(r));
        let dist = tensor::sq_dist(x, y).sqrt();
        total += dist.powf(alpha);
        if dist > 0.0 {
            let c = alpha * dist.powf(alpha - 2.0) / b as f64;
            for (gv, (&xv, &yv)) in gx.row_mut(r).iter_mut().zip(x.iter().zip(y)) {
                *gv = c * (xv - yv);
            }
        }
    }
    let gy = gx.scale(-1.0);
    Ok((total / b as f64, gx, gy))
}

pub fn alignment_loss_graph(g: &mut Graph, fx: Var, fy: Var, alpha: f64) -> Result<Var> {
    let (value, gx, gy) = alignment_with_grad(g.value(fx), g.value(fy), alpha)?;
    g.custom_scalar(value, vec![(fx, gx), (fy, gy)])
}

/// `log` of the mean Gaussian potential over ordered pairs of rows.
pub fn uniformity_loss(x: &Tensor, t: f64) -> Result<f64> {
    energy::uniformity_metric(x, t)
}

pub fn uniformity_loss_graph(g: &mut Graph, x: Var, t: f64) -> Result<Var> {
    let n = g.value(x).rows();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    if !(t > 0.0) {
        return Err(Error::Config(format!("t must be positive, got {t}")));
    }
    let s = g.pair_kernel_sum(x, PairKernel::Gaussian { t })?;
    let mean = g.scale(s, 1.0 / (n as f64 * (n as f64 - 1.0)));
    Ok(g.ln(mean))
}

/// Mean squared distance between normalized predictions and targets.
pub fn byol_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.require_matrix("byol_loss")?;
    pred.require_same_shape(target, "byol_loss")?;
    check_unit_rows(pred)?;
    check_unit_rows(target)?;
    let b = pred.rows() as f64;
    Ok(pred
        .row_iter()
        .zip(target.row_iter())
        .map(|(p, t)| tensor::sq_dist(p, t))
        .sum::<f64>()
        / b)
}

/// Graph form of [`byol_loss`]. Gradients reach `target` only if it was
/// recorded as differentiable.
pub fn byol_loss_graph(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let b = g.value(pred).rows().max(1) as f64;
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / b))
}

/// Outputs of one prediction direction (online view -> target view).
#[derive(Clone, Debug)]
pub struct Direction {
    /// Normalized predictor outputs.
    pub predictions: Tensor,
    /// Normalized target projections.
    pub targets: Tensor,
}

/// Everything the composite objectives consume from a forward pass.
#[derive(Clone, Debug)]
pub struct ByolOutputs {
    pub directions: Vec<Direction>,
    /// Raw online projector outputs, both views pooled.
    pub online_projections: Tensor,
}

/// Loss components of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub byol: f64,
    pub uni: f64,
    pub mhe: f64,
}

fn byol_term(out: &ByolOutputs) -> Result<f64> {
    if out.directions.is_empty() {
        return Err(Error::Config("no prediction directions".into()));
    }
    let mut s = 0.0;
    for d in &out.directions {
        s += byol_loss(&d.predictions, &d.targets)?;
    }
    Ok(s / out.directions.len() as f64)
}

/// BYOL loss plus `lambda_uni` times the uniformity of the online projections.
pub fn byol_uni_objective(out: &ByolOutputs, cfg: &LossConfig) -> Result<LossBreakdown> {
    let byol = byol_term(out)?;
    let uni = if cfg.lambda_uni == 0.0 {
        0.0
    } else {
        let z = tensor::l2_normalize(&out.online_projections, 1e-12)?;
        uniformity_loss(&z, cfg.t)?
    };
    Ok(LossBreakdown {
        total: byol + cfg.lambda_uni * uni,
        byol,
        uni,
        mhe: 0.0,
    })
}

/// BYOL loss plus the weight regularizer of the online networks.
pub fn byol_mhe_objective(
    model: &ByolModel,
    out: &ByolOutputs,
    spec: &EnergySpec,
) -> Result<LossBreakdown> {
    let byol = byol_term(out)?;
    let mhe = energy::mhe_regularizer(model, spec)?;
    Ok(LossBreakdown {
        total: byol + mhe,
        byol,
        uni: 0.0,
        mhe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn info_nce_examples() {
        let a = rows(&[&[1.0, 0.0]]);
        let n = rows(&[&[0.0, 1.0]]).reshape(vec![1, 1, 2]).unwrap();
        let l = info_nce(&a, &a, &n, 1.0).unwrap();
        let want = (1.0 + (-1f64).exp()).ln();
        assert!((l - want).abs() < 1e-15);
        assert!((l - 0.313262).abs() < 1e-6);

        let same = a.clone().reshape(vec![1, 1, 2]).unwrap();
        for tau in [0.1, 1.0, 7.0] {
            assert!((info_nce(&a, &a, &same, tau).unwrap() - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn info_nce_high_temperature_limit() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let a = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let p = rows(&[&[s, s], &[0.0, -1.0]]);
        let n = Tensor::new(
            vec![2, 3, 2],
            vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, s, -s, 1.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let l = info_nce(&a, &p, &n, 1e6).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-5);
    }

    #[test]
    fn info_nce_rejects_unnormalized() {
        let a = rows(&[&[2.0, 0.0]]);
        let n = rows(&[&[0.0, 1.0]]).reshape(vec![1, 1, 2]).unwrap();
        assert!(matches!(
            info_nce(&a, &a, &n, 1.0),
            Err(Error::NotNormalized { .. })
        ));
    }

    #[test]
    fn alignment_examples() {
        let x = rows(&[&[1.0, 0.0]]);
        assert_eq!(alignment_loss(&x, &x, 2.0).unwrap(), 0.0);
        let y = rows(&[&[0.0, 1.0]]);
        assert!((alignment_loss(&x, &y, 2.0).unwrap() - 2.0).abs() < 1e-15);
        let z = rows(&[&[-1.0, 0.0]]);
        assert!((alignment_loss(&x, &z, 2.0).unwrap() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn uniformity_examples() {
        let same = rows(&[&[1.0, 0.0], &[1.0, 0.0]]);
        assert_eq!(uniformity_loss(&same, 2.0).unwrap(), 0.0);
        let anti = rows(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        assert!((uniformity_loss(&anti, 2.0).unwrap() + 8.0).abs() < 1e-12);
        let quad = rows(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0], &[0.0, -1.0]]);
        let want = ((8.0 * (-4f64).exp() + 4.0 * (-8f64).exp()) / 12.0).ln();
        assert!((uniformity_loss(&quad, 2.0).unwrap() - want).abs() < 1e-12);
        assert!((want - -4.3962).abs() < 5e-4);
        assert!(matches!(
            uniformity_loss(&rows(&[&[1.0, 0.0]]), 2.0),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn byol_examples() {
        let x = rows(&[&[1.0, 0.0]]);
        assert_eq!(byol_loss(&x, &x).unwrap(), 0.0);
        assert!((byol_loss(&x, &rows(&[&[0.0, 1.0]])).unwrap() - 2.0).abs() < 1e-15);
        assert!((byol_loss(&x, &rows(&[&[-1.0, 0.0]])).unwrap() - 4.0).abs() < 1e-15);
        assert!(matches!(
            byol_loss(&rows(&[&[0.5, 0.0]]), &x),
            Err(Error::NotNormalized { .. })
        ));
    }

    #[test]
    fn byol_uni_with_zero_weight_or_collapse() {
        let p = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let t = rows(&[&[0.0, 1.0], &[0.0, 1.0]]);
        let out = ByolOutputs {
            directions: vec![Direction {
                predictions: p.clone(),
                targets: t.clone(),
            }],
            online_projections: rows(&[&[3.0, 1.0], &[3.0, 1.0], &[3.0, 1.0], &[3.0, 1.0]]),
        };
        let base = byol_loss(&p, &t).unwrap();
        let cfg = LossConfig::default();
        let collapsed = byol_uni_objective(&out, &cfg).unwrap();
        assert_eq!(collapsed.uni, 0.0);
        assert_eq!(collapsed.total, base);
        let zero = LossConfig {
            lambda_uni: 0.0,
            ..cfg
        };
        assert_eq!(byol_uni_objective(&out, &zero).unwrap().total, base);
    }
}
