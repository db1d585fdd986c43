//! Named, seed-initialised parameter storage with safetensors checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Bumped whenever the checkpoint layout changes.
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const METADATA_KEY: &str = "advsig";

#[derive(Debug, Clone)]
pub enum Init {
    /// Uniform with variance gain^2 / fan_in.
    Uniform { fan_in: usize, gain: f64 },
    Normal { std: f64 },
    Const(f32),
    /// Explicit row-major values.
    Values(Vec<f32>),
}

/// Ordered map of trainable variables.
///
/// Variables are created on first request, so the same model constructor either
/// initialises a fresh store or binds to one loaded from a checkpoint.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    device: Device,
    frozen: bool,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self { vars: BTreeMap::new(), device: Device::Cpu, frozen: false }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get_or_init(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut Rng) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: stored shape {:?}, model expects {shape:?}",
                    v.dims()
                )));
            }
            return Ok(if self.frozen { v.as_tensor().detach() } else { v.as_tensor().clone() });
        }
        if self.frozen {
            return Err(Error::Checkpoint(format!("parameter {name} missing from a frozen store")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Uniform { fan_in, gain } => {
                let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect()
            }
            Init::Normal { std } => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    (z * std) as f32
                })
                .collect(),
            Init::Const(c) => vec![c; n],
            Init::Values(v) if v.len() == n => v,
            Init::Values(v) => {
                return Err(Error::InvalidInput(format!("parameter {name}: {} values for shape {shape:?}", v.len())))
            }
        };
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    /// View whose tensors are detached from autograd. Models built against it
    /// are read-only: gradients only flow to their inputs.
    pub fn frozen(&self) -> Self {
        Self { vars: self.vars.clone(), device: self.device.clone(), frozen: true }
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Variables whose name starts with `prefix`.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, v)| v.clone()).collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and raw values, in name order.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, v) in &self.vars {
            h.update(name.as_bytes());
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.as_tensor().flatten_all()?.to_vec1::<f32>()? {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Deep copy of the variables whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, v) in self.vars.iter().filter(|(k, _)| k.starts_with(prefix)) {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(Self { vars, device: self.device.clone(), frozen: false })
    }

    /// Deep copy; the clone's variables do not alias this store's.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(Self { vars, device: self.device.clone(), frozen: false })
    }

    /// Writes a single-file checkpoint with `meta` embedded.
    pub fn save(&self, path: impl AsRef<Path>, meta: &CheckpointMeta) -> Result<()> {
        let mut info = HashMap::new();
        info.insert(METADATA_KEY.to_string(), serde_json::to_string(meta)?);
        let tensors: Vec<(String, Tensor)> =
            self.vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect();
        safetensors::serialize_to_file(tensors, Some(info), path.as_ref())
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    /// Loads a checkpoint written by [`ParamStore::save`], checking its kind and version.
    pub fn load(path: impl AsRef<Path>, expected_kind: &str) -> Result<(Self, CheckpointMeta)> {
        let bytes = std::fs::read(path.as_ref())?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let raw = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(METADATA_KEY))
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing metadata", path.as_ref().display())))?;
        let meta: CheckpointMeta = serde_json::from_str(raw)?;
        if meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} (supported: {CHECKPOINT_FORMAT_VERSION})",
                meta.format_version
            )));
        }
        if meta.kind != expected_kind {
            return Err(Error::Checkpoint(format!("expected a {expected_kind} checkpoint, found {}", meta.kind)));
        }
        let device = Device::Cpu;
        let tensors = candle_core::safetensors::load_buffer(&bytes, &device)?;
        let mut vars = BTreeMap::new();
        for (k, t) in tensors {
            vars.insert(k, Var::from_tensor(&t.to_dtype(DType::F32)?)?);
        }
        Ok((Self { vars, device, frozen: false }, meta))
    }
}

/// Metadata embedded in every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: String,
    /// JSON of the model configuration.
    pub config: serde_json::Value,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl CheckpointMeta {
    pub fn new(kind: &str, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: kind.to_string(),
            config: serde_json::to_value(config)?,
            extra: BTreeMap::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn init_is_seeded_and_binds_on_reload() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        let init = Init::Uniform { fan_in: 4, gain: 1.0 };
        a.get_or_init("w", &[3, 4], init.clone(), &mut rng_from_seed(1)).unwrap();
        b.get_or_init("w", &[3, 4], init.clone(), &mut rng_from_seed(1)).unwrap();
        assert_eq!(a.checksum().unwrap(), b.checksum().unwrap());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.safetensors");
        let meta = CheckpointMeta::new("toy", &serde_json::json!({"k": 1})).unwrap();
        a.save(&p, &meta).unwrap();
        let (mut c, m) = ParamStore::load(&p, "toy").unwrap();
        assert_eq!(m, meta);
        assert_eq!(c.checksum().unwrap(), a.checksum().unwrap());
        // An existing entry is reused, not re-initialised.
        c.get_or_init("w", &[3, 4], init.clone(), &mut rng_from_seed(99)).unwrap();
        assert_eq!(c.checksum().unwrap(), a.checksum().unwrap());
        assert!(c.get_or_init("w", &[4, 3], init.clone(), &mut rng_from_seed(1)).is_err());
        assert!(ParamStore::load(&p, "other").is_err());
    }

    #[test]
    fn checkpoint_files_are_byte_stable() {
        let mut a = ParamStore::new();
        let mut rng = rng_from_seed(3);
        a.get_or_init("b", &[5], Init::Normal { std: 0.1 }, &mut rng).unwrap();
        a.get_or_init("a", &[2, 2], Init::Const(0.5), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let meta = CheckpointMeta::new("toy", &1u32).unwrap();
        a.save(dir.path().join("1"), &meta).unwrap();
        a.save(dir.path().join("2"), &meta).unwrap();
        assert_eq!(std::fs::read(dir.path().join("1")).unwrap(), std::fs::read(dir.path().join("2")).unwrap());
    }
}
