//! Flat `key=value` run configuration, presets and sweep grids.
//!
//! Resolution order: defaults, preset, file, `--key value` overrides, then
//! the `SPHERE_DISTILL_SEED` environment variable.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::{gen_blobs, gen_shapes, ingest_csv, AugmentConfig, CsvSchema, Dataset};
use crate::energy::{DistanceMode, EnergySpec, RieszPower, SubNetwork};
use crate::engine::{ModelSpec, Objective, OptimizerKind, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::objectives::LossConfig;

pub const SEED_ENV: &str = "SPHERE_DISTILL_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Float,
    Int,
    Bool,
    /// Two floats, written `a,b` or `[a,b]`.
    Pair,
    /// Comma-separated positive integers.
    IntList,
    Power,
    Reg,
    Text(&'static [&'static str]),
    Path,
}

/// One documented configuration key.
#[derive(Clone, Copy, Debug)]
pub struct KeySpec {
    pub name: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
    kind: Kind,
}

const fn key(name: &'static str, default: &'static str, kind: Kind, doc: &'static str) -> KeySpec {
    KeySpec {
        name,
        default,
        doc,
        kind,
    }
}

pub const KEYS: &[KeySpec] = &[
    key(
        "objective",
        "byol",
        Kind::Text(&["byol", "byol_uni", "byol_mhe", "contrastive"]),
        "training objective",
    ),
    key("seed", "0", Kind::Int, "model, augmentation and split seed"),
    key(
        "dataset",
        "blobs",
        Kind::Text(&["blobs", "shapes", "csv"]),
        "corpus",
    ),
    key("data_seed", "0", Kind::Int, "seed of the synthetic corpus"),
    key("data_path", "", Kind::Path, "CSV file when dataset=csv"),
    key(
        "csv_layout",
        "image",
        Kind::Text(&["image", "vector"]),
        "CSV payload kind",
    ),
    key("num_classes", "2", Kind::Int, "blob classes"),
    key("blob_dim", "16", Kind::Int, "blob dimension"),
    key("n_per_class", "512", Kind::Int, "blob samples per class"),
    key("spread", "0.05", Kind::Float, "blob noise std"),
    key("n_samples", "1024", Kind::Int, "shape images"),
    key(
        "image_size",
        "16",
        Kind::Int,
        "image side for shapes and CSV images",
    ),
    key("image_channels", "1", Kind::Int, "CSV image channels"),
    key("csv_dim", "16", Kind::Int, "CSV vector width"),
    key("test_fraction", "0.2", Kind::Float, "held-out fraction"),
    key("jitter_d", "0.5", Kind::Float, "color jitter strength"),
    key("jitter_p", "0.8", Kind::Float, "color jitter probability"),
    key("blur_sigma", "0.1,2.0", Kind::Pair, "blur sigma range"),
    key("blur_p", "0.5", Kind::Float, "blur probability, both views"),
    key("grey_p", "0.2", Kind::Float, "grayscale probability"),
    key(
        "solarize_p",
        "0.2",
        Kind::Float,
        "solarize probability, second view only",
    ),
    key("flip_p", "0.5", Kind::Float, "horizontal flip probability"),
    key("crop_scale", "0.08,1.0", Kind::Pair, "crop area range"),
    key(
        "vector_noise",
        "0.05",
        Kind::Float,
        "vector augmentation noise std",
    ),
    key(
        "vector_max_angle",
        "15",
        Kind::Float,
        "vector rotation bound in degrees",
    ),
    key("vector_scale", "0.9,1.1", Kind::Pair, "vector scale range"),
    key(
        "enc_units",
        "128,128",
        Kind::IntList,
        "encoder hidden widths",
    ),
    key("repr_dim", "64", Kind::Int, "representation width"),
    key(
        "h_units",
        "256",
        Kind::Int,
        "projector and predictor hidden width",
    ),
    key(
        "o_units",
        "32",
        Kind::Int,
        "projector output width; 2 gives a native circle for diagnostics",
    ),
    key(
        "batch_norm",
        "true",
        Kind::Bool,
        "batch norm on hidden layers",
    ),
    key(
        "optimiser",
        "lars",
        Kind::Text(&["lars", "sgd"]),
        "optimizer",
    ),
    key(
        "learning_rate",
        "0.2",
        Kind::Float,
        "base rate, scaled by effective batch / 256",
    ),
    key("momentum", "0.9", Kind::Float, "optimizer momentum"),
    key("weight_decay", "1e-6", Kind::Float, "weight decay"),
    key("lars_trust", "0.001", Kind::Float, "LARS trust coefficient"),
    key("batch_size", "128", Kind::Int, "pairs per micro-batch"),
    key(
        "accumulation_steps",
        "1",
        Kind::Int,
        "micro-batches per optimizer step",
    ),
    key("epochs", "50", Kind::Int, "training epochs"),
    key("warmup_epochs", "10", Kind::Int, "linear warmup epochs"),
    key("tau", "0.99", Kind::Float, "base EMA rate"),
    key(
        "symmetric_loss",
        "true",
        Kind::Bool,
        "average both prediction directions",
    ),
    key("temperature", "0.2", Kind::Float, "InfoNCE temperature"),
    key("uni_t", "2", Kind::Float, "uniformity kernel scale"),
    key(
        "uni_weight",
        "0.125",
        Kind::Float,
        "uniformity weight for byol_uni",
    ),
    key(
        "enc_reg",
        "mhe",
        Kind::Reg,
        "regularize the encoder (byol_mhe)",
    ),
    key("enc_pow", "a2", Kind::Power, "encoder energy power"),
    key(
        "proj_reg",
        "mhe",
        Kind::Reg,
        "regularize the projector (byol_mhe)",
    ),
    key("proj_pow", "a2", Kind::Power, "projector energy power"),
    key(
        "pred_reg",
        "mhe",
        Kind::Reg,
        "regularize the predictor (byol_mhe)",
    ),
    key("pred_pow", "a2", Kind::Power, "predictor energy power"),
    key("reg_weight", "1", Kind::Float, "MHE weight"),
    key(
        "energy_every",
        "0",
        Kind::Int,
        "log energies every n steps, 0 disables",
    ),
    key(
        "disable_predictor",
        "false",
        Kind::Bool,
        "debug: drop the predictor",
    ),
    key(
        "disable_stop_gradient",
        "false",
        Kind::Bool,
        "debug: let gradients reach the target branch",
    ),
    key(
        "independent_target",
        "false",
        Kind::Bool,
        "target gets its own initialization",
    ),
    key("ft_epochs", "80", Kind::Int, "linear probe epochs"),
    key("ft_batch_size", "100", Kind::Int, "linear probe batch size"),
    key(
        "ft_learning_rate",
        "0.2",
        Kind::Float,
        "linear probe learning rate",
    ),
    key(
        "ft_weight_decay",
        "0.0",
        Kind::Float,
        "linear probe weight decay",
    ),
    key(
        "ft_optimiser",
        "sgd",
        Kind::Text(&["sgd"]),
        "linear probe optimizer",
    ),
    key("knn_k", "10", Kind::Int, "k-NN neighbors"),
    key(
        "knn_temperature",
        "0.07",
        Kind::Float,
        "k-NN vote temperature",
    ),
];

fn spec_of(name: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.name == name)
}

fn key_err<T>(name: &str, detail: impl std::fmt::Display) -> Result<T> {
    Err(Error::Config(format!("key `{name}`: {detail}")))
}

fn parse_f64(name: &str, v: &str) -> Result<f64> {
    match v.trim().parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => key_err(name, format!("expected a finite number, got {v:?}")),
    }
}

fn parse_pair(name: &str, v: &str) -> Result<(f64, f64)> {
    let inner = v.trim().trim_start_matches('[').trim_end_matches(']');
    let parts: Vec<&str> = inner.split(',').collect();
    if parts.len() != 2 {
        return key_err(name, format!("expected two numbers `a,b`, got {v:?}"));
    }
    Ok((parse_f64(name, parts[0])?, parse_f64(name, parts[1])?))
}

/// `0/1/2` select Euclidean distance, `a0/a1/a2` angular.
pub fn parse_power(v: &str) -> Result<(DistanceMode, RieszPower)> {
    let (mode, digits) = match v.strip_prefix('a') {
        Some(d) => (DistanceMode::Angular, d),
        None => (DistanceMode::Euclidean, v),
    };
    let s: u8 = digits
        .parse()
        .map_err(|_| Error::Config(format!("power must be one of 0,1,2,a0,a1,a2, got {v:?}")))?;
    Ok((mode, RieszPower::from_int(s)?))
}

fn check_value(spec: &KeySpec, v: &str) -> Result<()> {
    let name = spec.name;
    match spec.kind {
        Kind::Float => parse_f64(name, v).map(|_| ()),
        Kind::Int => v
            .trim()
            .parse::<u64>()
            .map(|_| ())
            .or_else(|_| key_err(name, format!("expected a non-negative integer, got {v:?}"))),
        Kind::Bool => match v.trim() {
            "true" | "false" => Ok(()),
            _ => key_err(name, format!("expected true or false, got {v:?}")),
        },
        Kind::Pair => parse_pair(name, v).map(|_| ()),
        Kind::IntList => {
            let ok = !v.trim().is_empty()
                && v.split(',')
                    .all(|p| p.trim().parse::<usize>().is_ok_and(|x| x > 0));
            if ok {
                Ok(())
            } else {
                key_err(
                    name,
                    format!("expected comma-separated positive integers, got {v:?}"),
                )
            }
        }
        Kind::Power => parse_power(v.trim())
            .map(|_| ())
            .or_else(|e| key_err(name, e.to_string().trim_start_matches("config error: "))),
        Kind::Reg => match v.trim() {
            "mhe" | "none" => Ok(()),
            _ => key_err(name, format!("expected mhe or none, got {v:?}")),
        },
        Kind::Text(options) => {
            if options.contains(&v.trim()) {
                Ok(())
            } else {
                key_err(
                    name,
                    format!("expected one of {}, got {v:?}", options.join(", ")),
                )
            }
        }
        Kind::Path => Ok(()),
    }
}

/// Where the corpus comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSpec {
    Blobs {
        num_classes: usize,
        dim: usize,
        n_per_class: usize,
        spread: f64,
        seed: u64,
    },
    Shapes {
        n: usize,
        size: usize,
        seed: u64,
    },
    Csv {
        path: PathBuf,
        schema: CsvSchema,
    },
}

impl DataSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSpec::Blobs {
                num_classes,
                dim,
                n_per_class,
                spread,
                seed,
            } => gen_blobs(*num_classes, *dim, *n_per_class, *spread, *seed),
            DataSpec::Shapes { n, size, seed } => gen_shapes(*n, *size, *seed),
            DataSpec::Csv { path, schema } => ingest_csv(path, schema),
        }
    }
}

/// Fully resolved flat configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS
                .iter()
                .map(|k| (k.name.to_string(), k.default.to_string()))
                .collect(),
        }
    }
}

/// Named bundles of overrides.
pub const PRESETS: &[(&str, &[(&str, &str)])] = &[
    (
        "byol-mhe",
        &[
            ("objective", "byol_mhe"),
            ("proj_reg", "mhe"),
            ("proj_pow", "a2"),
            ("pred_reg", "mhe"),
            ("pred_pow", "a2"),
            ("enc_pow", "a2"),
            ("reg_weight", "1"),
        ],
    ),
    (
        "byol-mhe-strong",
        &[
            ("objective", "byol_mhe"),
            ("proj_reg", "mhe"),
            ("proj_pow", "a2"),
            ("pred_reg", "mhe"),
            ("pred_pow", "a2"),
            ("enc_pow", "a2"),
            ("reg_weight", "10"),
        ],
    ),
];

impl RunConfig {
    pub fn with_preset(name: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_preset(name)?;
        Ok(cfg)
    }

    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let Some((_, pairs)) = PRESETS.iter().find(|(n, _)| *n == name) else {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            return Err(Error::Config(format!(
                "unknown preset {name:?} ({})",
                names.join(", ")
            )));
        };
        for (k, v) in *pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Sets one key after checking its name and value.
    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let Some(spec) = spec_of(name) else {
            return key_err(name, "unknown key");
        };
        check_value(spec, value)?;
        self.values
            .insert(name.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&str> {
        match self.values.get(name) {
            Some(v) => Ok(v),
            None => key_err(name, "unknown key"),
        }
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// Applies `key=value` lines. Blank lines and `#` comments are skipped,
    /// and a leading `--` is accepted.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let line = line.trim_start_matches("--");
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key=value, got {raw:?}",
                    i + 1
                )));
            };
            self.set(k.trim(), v.trim()).map_err(|e| {
                Error::Config(format!(
                    "line {}: {}",
                    i + 1,
                    e.to_string().trim_start_matches("config error: ")
                ))
            })?;
        }
        Ok(())
    }

    /// Reads a `key=value` file, or a flat JSON object such as
    /// `config.resolved.json`.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        if text.trim_start().starts_with('{') {
            let map: BTreeMap<String, String> = serde_json::from_str(&text)?;
            for (k, v) in map {
                self.set(&k, &v)?;
            }
            Ok(())
        } else {
            self.apply_text(&text)
        }
    }

    /// Applies `--key value` or `--key=value` arguments.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        let mut it = args.iter();
        while let Some(a) = it.next() {
            let Some(body) = a.strip_prefix("--") else {
                return Err(Error::Config(format!("expected --key, got {a:?}")));
            };
            if let Some((k, v)) = body.split_once('=') {
                self.set(k, v)?;
            } else {
                let Some(v) = it.next() else {
                    return key_err(body, "missing value");
                };
                self.set(body, v)?;
            }
        }
        Ok(())
    }

    /// Honors [`SEED_ENV`] when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.set("seed", &v).map_err(|_| {
                Error::Config(format!(
                    "{SEED_ENV} must be a non-negative integer, got {v:?}"
                ))
            })?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.values)?)
    }

    /// `key=value` lines in key order.
    pub fn to_text(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    fn f64(&self, k: &str) -> Result<f64> {
        parse_f64(k, self.get(k)?)
    }

    fn usize(&self, k: &str) -> Result<usize> {
        self.get(k)?
            .parse()
            .or_else(|_| key_err(k, "expected an integer"))
    }

    fn u64(&self, k: &str) -> Result<u64> {
        self.get(k)?
            .parse()
            .or_else(|_| key_err(k, "expected an integer"))
    }

    fn bool(&self, k: &str) -> Result<bool> {
        Ok(self.get(k)? == "true")
    }

    fn pair(&self, k: &str) -> Result<(f64, f64)> {
        parse_pair(k, self.get(k)?)
    }

    pub fn seed(&self) -> Result<u64> {
        self.u64("seed")
    }

    pub fn test_fraction(&self) -> Result<f64> {
        self.f64("test_fraction")
    }

    pub fn data_spec(&self) -> Result<DataSpec> {
        Ok(match self.get("dataset")? {
            "blobs" => DataSpec::Blobs {
                num_classes: self.usize("num_classes")?,
                dim: self.usize("blob_dim")?,
                n_per_class: self.usize("n_per_class")?,
                spread: self.f64("spread")?,
                seed: self.u64("data_seed")?,
            },
            "shapes" => DataSpec::Shapes {
                n: self.usize("n_samples")?,
                size: self.usize("image_size")?,
                seed: self.u64("data_seed")?,
            },
            _ => {
                let path = self.get("data_path")?;
                if path.is_empty() {
                    return key_err("data_path", "required when dataset=csv");
                }
                let side = self.usize("image_size")?;
                let schema = match self.get("csv_layout")? {
                    "vector" => CsvSchema::vector(self.usize("csv_dim")?),
                    _ => CsvSchema::image(side, side, self.usize("image_channels")?),
                };
                DataSpec::Csv {
                    path: PathBuf::from(path),
                    schema,
                }
            }
        })
    }

    /// Energy settings from the `*_reg` and `*_pow` keys. Regularized
    /// sub-networks must agree on the power.
    pub fn energy_spec(&self) -> Result<EnergySpec> {
        let mut selection = Vec::new();
        let mut power: Option<(&str, &str)> = None;
        for (net, reg, pow) in [
            (SubNetwork::Encoder, "enc_reg", "enc_pow"),
            (SubNetwork::Projector, "proj_reg", "proj_pow"),
            (SubNetwork::Predictor, "pred_reg", "pred_pow"),
        ] {
            if self.get(reg)? != "mhe" {
                continue;
            }
            selection.push(net);
            let p = self.get(pow)?;
            match power {
                Some((other_key, other)) if other != p => {
                    return key_err(pow, format!("{p} disagrees with {other_key}={other}; one power is used for every layer"));
                }
                None => power = Some((pow, p)),
                _ => {}
            }
        }
        let (mode, s) = parse_power(power.map_or("a2", |(_, p)| p))?;
        let lambda = self.f64("reg_weight")?;
        if lambda < 0.0 {
            return key_err("reg_weight", "must be non-negative");
        }
        if self.get("objective")? == "byol_mhe" && selection.is_empty() {
            return key_err(
                "objective",
                "byol_mhe needs at least one of enc_reg, proj_reg, pred_reg set to mhe",
            );
        }
        Ok(EnergySpec {
            s,
            mode,
            lambda,
            selection,
        })
    }

    pub fn augment(&self) -> Result<AugmentConfig> {
        let blur = self.f64("blur_p")?;
        let aug = AugmentConfig {
            crop_scale: self.pair("crop_scale")?,
            flip_p: self.f64("flip_p")?,
            jitter_p: self.f64("jitter_p")?,
            jitter_strength: self.f64("jitter_d")?,
            grey_p: self.f64("grey_p")?,
            blur_p: (blur, blur),
            blur_sigma: self.pair("blur_sigma")?,
            solarize_p: (0.0, self.f64("solarize_p")?),
            vector_noise: self.f64("vector_noise")?,
            vector_max_angle: self.f64("vector_max_angle")?.to_radians(),
            vector_scale: self.pair("vector_scale")?,
            ..AugmentConfig::default()
        };
        aug.validate()?;
        Ok(aug)
    }

    pub fn train_config(&self, input_dim: usize) -> Result<TrainConfig> {
        let encoder_hidden = self
            .get("enc_units")?
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .or_else(|_| key_err("enc_units", "bad width"))
            })
            .collect::<Result<Vec<_>>>()?;
        let h = self.usize("h_units")?;
        let cfg = TrainConfig {
            model: ModelSpec {
                input_dim,
                encoder_hidden,
                repr_dim: self.usize("repr_dim")?,
                proj_hidden: h,
                proj_dim: self.usize("o_units")?,
                pred_hidden: h,
                batch_norm: self.bool("batch_norm")?,
            },
            objective: Objective::parse(self.get("objective")?)?,
            loss: LossConfig {
                temperature: self.f64("temperature")?,
                t: self.f64("uni_t")?,
                lambda_uni: self.f64("uni_weight")?,
                ..LossConfig::default()
            },
            energy: self.energy_spec()?,
            augment: self.augment()?,
            optimizer: match self.get("optimiser")? {
                "sgd" => OptimizerKind::Sgd,
                _ => OptimizerKind::Lars,
            },
            lr_base: self.f64("learning_rate")?,
            momentum: self.f64("momentum")?,
            weight_decay: self.f64("weight_decay")?,
            lars_trust: self.f64("lars_trust")?,
            batch_size: self.usize("batch_size")?,
            accumulation_steps: self.usize("accumulation_steps")?,
            epochs: self.u64("epochs")?,
            warmup_epochs: self.u64("warmup_epochs")?,
            tau_base: self.f64("tau")?,
            symmetric: self.bool("symmetric_loss")?,
            seed: self.seed()?,
            energy_every: self.u64("energy_every")?,
            disable_predictor: self.bool("disable_predictor")?,
            disable_stop_gradient: self.bool("disable_stop_gradient")?,
            independent_target: self.bool("independent_target")?,
            policy: Default::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval_config(&self) -> Result<EvalConfig> {
        Ok(EvalConfig {
            ft_epochs: self.usize("ft_epochs")?,
            ft_lr: self.f64("ft_learning_rate")?,
            ft_momentum: 0.9,
            ft_weight_decay: self.f64("ft_weight_decay")?,
            ft_batch_size: self.usize("ft_batch_size")?,
            knn_k: self.usize("knn_k")?,
            knn_temperature: self.f64("knn_temperature")?,
            seed: self.seed()?,
        })
    }

    /// Checks every derived setting except those that need the corpus.
    pub fn validate(&self) -> Result<()> {
        self.data_spec()?;
        self.train_config(1)?;
        self.eval_config()?;
        let f = self.test_fraction()?;
        if !(0.0..1.0).contains(&f) || f == 0.0 {
            return key_err("test_fraction", format!("must be in (0,1), got {f}"));
        }
        Ok(())
    }
}

/// One sweep axis; `keys` all take the same value in a cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridAxis {
    pub keys: Vec<String>,
    pub values: Vec<String>,
}

impl GridAxis {
    /// Parses `key=v1,v2` or `k1+k2=v1,v2`.
    pub fn parse(s: &str) -> Result<Self> {
        let Some((k, v)) = s.split_once('=') else {
            return Err(Error::Config(format!(
                "grid axis must look like key=v1,v2, got {s:?}"
            )));
        };
        let keys: Vec<String> = k.split('+').map(|x| x.trim().to_string()).collect();
        let values: Vec<String> = v
            .split(',')
            .map(|x| x.trim().to_string())
            .filter(|x| !x.is_empty())
            .collect();
        Ok(Self { keys, values })
    }

    pub fn label(&self) -> String {
        self.keys.join("+")
    }
}

pub const SWEEP_PRESETS: &[(&str, &str, &str)] = &[
    ("paper-lambda", "byol-mhe", "reg_weight=0.001,0.01,1,10,100"),
    (
        "paper-power",
        "byol-mhe",
        "enc_pow+proj_pow+pred_pow=0,1,2,a0,a1,a2",
    ),
];

/// Built-in sweep: base preset and its single axis.
pub fn sweep_preset(name: &str) -> Result<(&'static str, GridAxis)> {
    match SWEEP_PRESETS.iter().find(|(n, _, _)| *n == name) {
        Some((_, base, axis)) => Ok((base, GridAxis::parse(axis)?)),
        None => {
            let names: Vec<&str> = SWEEP_PRESETS.iter().map(|(n, _, _)| *n).collect();
            Err(Error::Config(format!(
                "unknown sweep preset {name:?} ({})",
                names.join(", ")
            )))
        }
    }
}

/// One cell of a sweep: its configuration and the axis assignments.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub assignments: Vec<(String, String)>,
    pub config: RunConfig,
}

impl SweepCell {
    /// Directory-safe name such as `reg_weight=0.01`.
    pub fn name(&self) -> String {
        self.assignments
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join("_")
            .replace(['/', ' '], "-")
    }
}

/// Cartesian product of the axes over `base`, last axis fastest. Every key
/// and value is checked before any cell is returned.
pub fn expand_grid(base: &RunConfig, axes: &[GridAxis]) -> Result<Vec<SweepCell>> {
    if axes.is_empty()
        || axes
            .iter()
            .any(|a| a.values.is_empty() || a.keys.is_empty())
    {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let mut cells = vec![SweepCell {
        assignments: Vec::new(),
        config: base.clone(),
    }];
    for axis in axes {
        let mut next = Vec::with_capacity(cells.len() * axis.values.len());
        for cell in &cells {
            for v in &axis.values {
                let mut c = cell.clone();
                for k in &axis.keys {
                    c.config.set(k, v)?;
                }
                c.assignments.push((axis.label(), v.clone()));
                next.push(c);
            }
        }
        cells = next;
    }
    for c in &cells {
        c.config.validate()?;
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_documented() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        for k in KEYS {
            assert!(!k.doc.is_empty());
            check_value(k, k.default).unwrap_or_else(|e| panic!("{}: {e}", k.name));
        }
        let names: std::collections::BTreeSet<_> = KEYS.iter().map(|k| k.name).collect();
        assert_eq!(names.len(), KEYS.len());
    }

    #[test]
    fn unknown_and_bad_keys_are_named() {
        let mut cfg = RunConfig::default();
        let e = cfg.set("jitter", "0.1").unwrap_err().to_string();
        assert!(e.contains("`jitter`"), "{e}");
        let e = cfg.set("proj_pow", "a3").unwrap_err().to_string();
        assert!(e.contains("`proj_pow`"), "{e}");
        let e = cfg
            .apply_text("seed=1\nbatch_size=x\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("line 2") && e.contains("`batch_size`"), "{e}");
    }

    #[test]
    fn text_accepts_flag_style() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# listing\n--proj_pow=a1\n--blur_sigma=[0.2,1.5]\n\n")
            .unwrap();
        assert_eq!(cfg.get("proj_pow").unwrap(), "a1");
        assert_eq!(cfg.augment().unwrap().blur_sigma, (0.2, 1.5));
    }

    #[test]
    fn overrides_both_forms() {
        let mut cfg = RunConfig::default();
        let args: Vec<String> = ["--seed", "7", "--tau=0.9"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        cfg.apply_overrides(&args).unwrap();
        assert_eq!(cfg.seed().unwrap(), 7);
        assert_eq!(cfg.train_config(4).unwrap().tau_base, 0.9);
    }

    #[test]
    fn powers_must_agree() {
        let mut cfg = RunConfig::with_preset("byol-mhe").unwrap();
        cfg.set("proj_pow", "1").unwrap();
        assert!(cfg
            .energy_spec()
            .unwrap_err()
            .to_string()
            .contains("proj_pow"));
        cfg.set("enc_reg", "none").unwrap();
        cfg.set("pred_reg", "none").unwrap();
        let spec = cfg.energy_spec().unwrap();
        assert_eq!(spec.selection, vec![SubNetwork::Projector]);
        assert_eq!(
            (spec.mode, spec.s),
            (DistanceMode::Euclidean, RieszPower::One)
        );
    }

    #[test]
    fn presets_set_lambda() {
        let main = RunConfig::with_preset("byol-mhe")
            .unwrap()
            .train_config(4)
            .unwrap();
        let app = RunConfig::with_preset("byol-mhe-strong")
            .unwrap()
            .train_config(4)
            .unwrap();
        assert_eq!(main.objective, Objective::ByolMhe);
        assert_eq!(main.energy.lambda, 1.0);
        assert_eq!(app.energy.lambda, 10.0);
        assert!(RunConfig::with_preset("nope").is_err());
    }

    #[test]
    fn resolved_json_round_trips() {
        let mut cfg = RunConfig::with_preset("byol-mhe-strong").unwrap();
        cfg.set("seed", "3").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("config.resolved.json");
        std::fs::write(&p, cfg.to_json().unwrap()).unwrap();
        let mut back = RunConfig::default();
        back.apply_file(&p).unwrap();
        assert_eq!(back, cfg);
        let t = dir.path().join("c.txt");
        std::fs::write(&t, cfg.to_text()).unwrap();
        let mut back = RunConfig::default();
        back.apply_file(&t).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn grid_expansion() {
        let (base, axis) = sweep_preset("paper-lambda").unwrap();
        let cells = expand_grid(&RunConfig::with_preset(base).unwrap(), &[axis]).unwrap();
        let lambdas: Vec<f64> = cells
            .iter()
            .map(|c| c.config.energy_spec().unwrap().lambda)
            .collect();
        assert_eq!(lambdas, vec![0.001, 0.01, 1.0, 10.0, 100.0]);

        let (base, axis) = sweep_preset("paper-power").unwrap();
        let cells = expand_grid(&RunConfig::with_preset(base).unwrap(), &[axis]).unwrap();
        let tags: Vec<String> = cells
            .iter()
            .map(|c| c.config.energy_spec().unwrap().power_tag())
            .collect();
        assert_eq!(tags, vec!["0", "1", "2", "a0", "a1", "a2"]);

        assert!(expand_grid(&RunConfig::default(), &[]).is_err());
        let empty = GridAxis::parse("seed=").unwrap();
        assert!(expand_grid(&RunConfig::default(), &[empty]).is_err());
        let two = [
            GridAxis::parse("seed=0,1").unwrap(),
            GridAxis::parse("tau=0.9,0.99,1").unwrap(),
        ];
        let cells = expand_grid(&RunConfig::default(), &two).unwrap();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[1].name(), "seed=0_tau=0.99");
    }
}
