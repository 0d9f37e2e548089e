use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::energy::SubNetwork;
use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpSpec, Mode, Parameter};
use crate::schedule::ema_update;
use crate::tensor::Tensor;

/// Widths of the encoder, projector and predictor MLPs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub repr_dim: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub pred_hidden: usize,
    pub batch_norm: bool,
}

impl ModelSpec {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            encoder_hidden: vec![128, 128],
            repr_dim: 64,
            proj_hidden: 256,
            proj_dim: 32,
            pred_hidden: 256,
            batch_norm: true,
        }
    }

    pub fn encoder(&self) -> MlpSpec {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.encoder_hidden);
        widths.push(self.repr_dim);
        MlpSpec::uniform(&widths, self.batch_norm)
    }

    pub fn projector(&self) -> MlpSpec {
        MlpSpec::uniform(
            &[self.repr_dim, self.proj_hidden, self.proj_dim],
            self.batch_norm,
        )
    }

    pub fn predictor(&self) -> MlpSpec {
        MlpSpec::uniform(
            &[self.proj_dim, self.pred_hidden, self.proj_dim],
            self.batch_norm,
        )
    }
}

/// Online encoder, projector and predictor plus the slow-moving target
/// encoder and projector.
#[derive(Clone, Debug, PartialEq)]
pub struct ByolModel {
    pub spec: ModelSpec,
    pub online_encoder: Mlp,
    pub online_projector: Mlp,
    pub predictor: Mlp,
    pub target_encoder: Mlp,
    pub target_projector: Mlp,
}

fn renamed(net: &Mlp, name: &str) -> Mlp {
    let mut out = net.clone();
    let old = format!("{}.", net.name);
    out.name = name.to_string();
    for p in out.params_mut() {
        p.name = format!("{name}.{}", &p.name[old.len()..]);
    }
    out
}

impl ByolModel {
    /// Target networks start as copies of the online ones unless
    /// `independent_target`, in which case they get their own draws.
    pub fn init(spec: &ModelSpec, seed: u64, independent_target: bool) -> Result<Self> {
        if spec.input_dim == 0 {
            return Err(Error::Config("input dimension is zero".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let online_encoder = Mlp::init("online.encoder", &spec.encoder(), &mut rng)?;
        let online_projector = Mlp::init("online.projector", &spec.projector(), &mut rng)?;
        let predictor = Mlp::init("online.predictor", &spec.predictor(), &mut rng)?;
        let (target_encoder, target_projector) = if independent_target {
            (
                Mlp::init("target.encoder", &spec.encoder(), &mut rng)?,
                Mlp::init("target.projector", &spec.projector(), &mut rng)?,
            )
        } else {
            (
                renamed(&online_encoder, "target.encoder"),
                renamed(&online_projector, "target.projector"),
            )
        };
        Ok(Self {
            spec: spec.clone(),
            online_encoder,
            online_projector,
            predictor,
            target_encoder,
            target_projector,
        })
    }

    fn net(&self, s: SubNetwork) -> &Mlp {
        match s {
            SubNetwork::Encoder => &self.online_encoder,
            SubNetwork::Projector => &self.online_projector,
            SubNetwork::Predictor => &self.predictor,
        }
    }

    /// Online weight matrices of the selected sub-networks, in selection order.
    pub fn selected_weights(&self, selection: &[SubNetwork]) -> Vec<&Parameter> {
        selection
            .iter()
            .flat_map(|&s| self.net(s).weights())
            .collect()
    }

    /// Trainable parameters: online encoder, projector, predictor.
    pub fn online_params(&self) -> Vec<&Parameter> {
        let mut v = self.online_encoder.params();
        v.extend(self.online_projector.params());
        v.extend(self.predictor.params());
        v
    }

    pub fn online_params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.online_encoder.params_mut();
        v.extend(self.online_projector.params_mut());
        v.extend(self.predictor.params_mut());
        v
    }

    pub fn target_params(&self) -> Vec<&Parameter> {
        let mut v = self.target_encoder.params();
        v.extend(self.target_projector.params());
        v
    }

    /// Moves the target networks towards the online ones.
    pub fn ema_step(&mut self, tau: f64) -> Result<()> {
        let online: Vec<&Parameter> = self
            .online_encoder
            .params()
            .into_iter()
            .chain(self.online_projector.params())
            .collect();
        let mut target: Vec<&mut Parameter> = self.target_encoder.params_mut();
        target.extend(self.target_projector.params_mut());
        ema_update(&mut target, &online, tau)
    }

    fn nets(&self) -> [&Mlp; 5] {
        [
            &self.online_encoder,
            &self.online_projector,
            &self.predictor,
            &self.target_encoder,
            &self.target_projector,
        ]
    }

    /// Every parameter and running statistic, keyed by unique name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for net in self.nets() {
            out.extend(net.params().into_iter().map(|p| (p.name.clone(), &p.value)));
            out.extend(net.buffers());
        }
        out
    }

    /// Mutable view of [`ByolModel::named_tensors`], in unspecified order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for net in [
            &mut self.online_encoder,
            &mut self.online_projector,
            &mut self.predictor,
            &mut self.target_encoder,
            &mut self.target_projector,
        ] {
            let name = net.name.clone();
            for (i, l) in net.layers.iter_mut().enumerate() {
                out.push((l.weight.name.clone(), &mut l.weight.value));
                out.push((l.bias.name.clone(), &mut l.bias.value));
                if let Some(bn) = &mut l.bn {
                    out.push((bn.gamma.name.clone(), &mut bn.gamma.value));
                    out.push((bn.beta.name.clone(), &mut bn.beta.value));
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
        }
        out
    }

    /// Online encoder output (the representation).
    pub fn encode(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.online_encoder.forward_tensor(x, mode)
    }

    pub fn zero_grad(&mut self) {
        for p in self.online_params_mut() {
            p.zero_grad();
        }
    }
}
