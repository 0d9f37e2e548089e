//! Binary checkpoints: an 8-byte magic, a little-endian `u64` header length,
//! a JSON header, then every tensor as little-endian `f64` in header order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::engine::{ByolModel, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::schedule::ScheduleState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SDCKPT01";
pub const FORMAT_VERSION: u64 = 1;
const VELOCITY_PREFIX: &str = "optim.velocity.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub schedule: ScheduleState,
    pub epoch: u64,
    pub config_hash: String,
    pub config: Value,
}

fn bad(field: &str, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        field: field.to_string(),
        detail: detail.into(),
    }
}

/// SHA-256 of the canonical JSON form of `cfg`, hex encoded.
pub fn config_hash(cfg: &TrainConfig) -> Result<String> {
    let v = serde_json::to_value(cfg)?;
    Ok(hash_value(&v))
}

fn hash_value(v: &Value) -> String {
    // serde_json maps keep keys sorted, so this is canonical
    let bytes = serde_json::to_vec(v).expect("json value serializes");
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, cfg: &TrainConfig) -> Result<Self> {
        let mut tensors: Vec<(String, Tensor)> = state
            .model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        for (name, v) in state.optimizer.velocity() {
            tensors.push((format!("{VELOCITY_PREFIX}{name}"), v.clone()));
        }
        let config = serde_json::to_value(cfg)?;
        Ok(Self {
            tensors,
            schedule: state.schedule.clone(),
            epoch: state.epoch,
            config_hash: hash_value(&config),
            config,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        serde_json::from_value(self.config.clone()).map_err(|e| bad("config", e.to_string()))
    }

    /// Rebuilds the training state. `cfg` must hash to the stored config.
    pub fn restore(&self, cfg: &TrainConfig) -> Result<TrainState> {
        let hash = config_hash(cfg)?;
        if hash != self.config_hash {
            return Err(bad(
                "config_hash",
                format!(
                    "checkpoint has {}, configuration hashes to {hash}",
                    self.config_hash
                ),
            ));
        }
        let mut model = ByolModel::init(&cfg.model, cfg.seed, cfg.independent_target)?;
        let mut optimizer = cfg.build_optimizer();
        let mut stored: BTreeMap<&str, &Tensor> =
            self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, slot) in model.named_tensors_mut() {
            let t = stored
                .remove(name.as_str())
                .ok_or_else(|| bad("tensors", format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(bad(
                    "tensors",
                    format!(
                        "{name}: stored shape {:?}, model expects {:?}",
                        t.shape(),
                        slot.shape()
                    ),
                ));
            }
            *slot = t.clone();
        }
        let params: BTreeMap<String, Vec<usize>> = model
            .online_params()
            .into_iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect();
        for (name, t) in stored {
            let Some(pname) = name.strip_prefix(VELOCITY_PREFIX) else {
                return Err(bad("tensors", format!("unexpected tensor {name}")));
            };
            match params.get(pname) {
                Some(shape) if shape.as_slice() == t.shape() => {
                    optimizer
                        .velocity_mut()
                        .insert(pname.to_string(), t.clone());
                }
                _ => {
                    return Err(bad(
                        "tensors",
                        format!("velocity {pname} does not match a parameter"),
                    ))
                }
            }
        }
        Ok(TrainState {
            model,
            optimizer,
            schedule: self.schedule.clone(),
            epoch: self.epoch,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = json!({
            "version": FORMAT_VERSION,
            "dtype": "f64",
            "tensors": self.tensors.iter().map(|(n, t)| json!({"name": n, "shape": t.shape()})).collect::<Vec<_>>(),
            "schedule": self.schedule,
            "epoch": self.epoch,
            "config_hash": self.config_hash,
            "config": self.config,
        });
        let header = serde_json::to_vec(&header)?;
        let n_values: usize = self.tensors.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * n_values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(bad("magic", "not a checkpoint file"));
        }
        let len_bytes: [u8; 8] = bytes
            .get(8..16)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| bad("header_len", "file ends before the header length"))?;
        let hlen = u64::from_le_bytes(len_bytes) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(hlen))
            .ok_or_else(|| bad("header_len", format!("header of {hlen} bytes exceeds file")))?;
        let header: Value =
            serde_json::from_slice(body).map_err(|e| bad("header", e.to_string()))?;
        let field = |k: &str| header.get(k).ok_or_else(|| bad(k, "missing"));

        let version = field("version")?
            .as_u64()
            .ok_or_else(|| bad("version", "not an integer"))?;
        if version != FORMAT_VERSION {
            return Err(bad("version", format!("unsupported version {version}")));
        }
        if field("dtype")?.as_str() != Some("f64") {
            return Err(bad(
                "dtype",
                format!("unsupported dtype {}", field("dtype")?),
            ));
        }
        let schedule: ScheduleState = serde_json::from_value(field("schedule")?.clone())
            .map_err(|e| bad("schedule", e.to_string()))?;
        let epoch = field("epoch")?
            .as_u64()
            .ok_or_else(|| bad("epoch", "not an integer"))?;
        let config_hash = field("config_hash")?
            .as_str()
            .ok_or_else(|| bad("config_hash", "not a string"))?
            .to_string();
        let config = field("config")?.clone();
        if hash_value(&config) != config_hash {
            return Err(bad("config_hash", "does not match the stored config"));
        }
        let specs = field("tensors")?
            .as_array()
            .ok_or_else(|| bad("tensors", "not an array"))?;

        let mut data = &bytes[16 + hlen..];
        let mut tensors = Vec::with_capacity(specs.len());
        for s in specs {
            let name = s
                .get("name")
                .and_then(Value::as_str)
                .ok_or_else(|| bad("tensors", "entry without a name"))?;
            let shape: Vec<usize> = s
                .get("shape")
                .and_then(|v| serde_json::from_value(v.clone()).ok())
                .ok_or_else(|| bad("tensors", format!("{name}: bad shape")))?;
            let n: usize = shape.iter().product();
            if data.len() < 8 * n {
                return Err(bad("tensors", format!("{name}: data truncated")));
            }
            let values = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            data = &data[8 * n..];
            tensors.push((name.to_string(), Tensor::new(shape, values)?));
        }
        if !data.is_empty() {
            return Err(bad("tensors", format!("{} trailing bytes", data.len())));
        }
        Ok(Self {
            tensors,
            schedule,
            epoch,
            config_hash,
            config,
        })
    }

    /// Writes through a temporary file and rename, so a crash never leaves
    /// a truncated checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::new(6);
        cfg.model.encoder_hidden = vec![8];
        cfg.model.repr_dim = 4;
        cfg.model.proj_hidden = 8;
        cfg.model.proj_dim = 3;
        cfg.model.pred_hidden = 8;
        cfg
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = small_cfg();
        let mut state = TrainState::new(&cfg, 4).unwrap();
        state.optimizer.velocity_mut().insert(
            "online.encoder.layer0.bias".into(),
            Tensor::new(vec![8], vec![0.1 + 1e-17; 8]).unwrap(),
        );
        let ck = Checkpoint::from_state(&state, &cfg).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.restore(&cfg).unwrap(), state);
    }

    #[test]
    fn errors_name_the_field() {
        let cfg = small_cfg();
        let state = TrainState::new(&cfg, 4).unwrap();
        let bytes = Checkpoint::from_state(&state, &cfg)
            .unwrap()
            .to_bytes()
            .unwrap();
        let field_of = |b: &[u8]| match Checkpoint::from_bytes(b) {
            Err(Error::Checkpoint { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        let mut m = bytes.clone();
        m[0] = b'X';
        assert_eq!(field_of(&m), "magic");
        assert_eq!(field_of(&bytes[..12]), "header_len");
        assert_eq!(field_of(&bytes[..bytes.len() - 3]), "tensors");

        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        header["dtype"] = json!("f32");
        let hb = serde_json::to_vec(&header).unwrap();
        let mut rebuilt = MAGIC.to_vec();
        rebuilt.extend((hb.len() as u64).to_le_bytes());
        rebuilt.extend(&hb);
        rebuilt.extend(&bytes[16 + hlen..]);
        assert_eq!(field_of(&rebuilt), "dtype");

        let mut other = cfg.clone();
        other.seed = 99;
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(
            matches!(ck.restore(&other), Err(Error::Checkpoint { field, .. }) if field == "config_hash")
        );
    }
}
