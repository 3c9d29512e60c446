//! Named parameter storage, initialization and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::NetworkConfig;
use super::layout;
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

const CHECKPOINT_MAGIC: &[u8; 8] = b"PSCKPT01";
pub const CHECKPOINT_CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_PARAMS_FILE: &str = "params.bin";

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Normal with variance `2 / fan_in`.
    He,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub(crate) fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

/// All learnable tensors of a network, keyed by name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    /// Deterministically initialize every parameter of `config`.
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for spec in layout::param_specs(config) {
            let n: usize = spec.shape.iter().product();
            let values = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::He => {
                    let fan_in: usize = spec.shape[1..].iter().product();
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                        .map_err(|e| Error::invalid(e.to_string()))?;
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                }
            };
            params.insert(spec.name, Tensor::param(&spec.shape, values)?);
        }
        Ok(Self { params })
    }

    /// Replace every zero-initialized tensor with normal values of standard
    /// deviation `std`, so gradient checks exercise paths that start out dead.
    pub fn perturb_zero_init(&mut self, config: &NetworkConfig, seed: u64, std: f64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        for spec in layout::param_specs(config) {
            if spec.init == Init::Zeros {
                let n: usize = spec.shape.iter().product();
                let values = (0..n).map(|_| normal.sample(&mut rng)).collect();
                self.params.insert(spec.name, Tensor::param(&spec.shape, values)?);
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidState(format!("missing parameter `{name}`")))
    }

    pub fn find(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        self.params.values().for_each(|t| t.zero_grad());
    }

    /// Copy of the store whose tensors do not track gradients, for inference.
    pub fn frozen(&self) -> Self {
        Self {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.detach())).collect(),
        }
    }

    /// Check names and shapes against what `config` expects.
    pub fn check_layout(&self, config: &NetworkConfig) -> Result<()> {
        let specs = layout::param_specs(config);
        if specs.len() != self.params.len() {
            return Err(Error::InvalidState(format!(
                "expected {} parameters for this config, found {}",
                specs.len(),
                self.params.len()
            )));
        }
        for spec in specs {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::InvalidState(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
        }
        out
    }

    /// Decode a store written by [`ParamStore::to_bytes`]. Loaded tensors are
    /// trainable leaves.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let parse_err = |offset: u64, msg: &str| Error::Parse {
            what: "checkpoint",
            offset: offset as usize,
            msg: msg.to_string(),
        };
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic).map_err(|_| parse_err(0, "truncated magic"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(parse_err(0, "bad magic"));
        }
        let mut word = [0u8; 4];
        cur.read_exact(&mut word).map_err(|_| parse_err(8, "truncated count"))?;
        let count = u32::from_le_bytes(word);
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let at = cur.position();
            cur.read_exact(&mut word).map_err(|_| parse_err(at, "truncated name length"))?;
            let mut name = vec![0u8; u32::from_le_bytes(word) as usize];
            cur.read_exact(&mut name).map_err(|_| parse_err(at, "truncated name"))?;
            let name = String::from_utf8(name).map_err(|_| parse_err(at, "name is not utf-8"))?;
            let t = read_tensor(&mut cur, 0).map_err(|e| match e {
                Error::Parse { msg, .. } => parse_err(at, &msg),
                other => other,
            })?;
            params.insert(name, Tensor::param(t.shape(), t.values().to_vec())?);
        }
        if cur.position() as usize != bytes.len() {
            return Err(parse_err(cur.position(), "trailing bytes"));
        }
        Ok(Self { params })
    }
}

/// Write `config.txt` and `params.bin` into `dir`.
pub fn save_checkpoint(dir: &Path, config: &NetworkConfig, params: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg_path = dir.join(CHECKPOINT_CONFIG_FILE);
    fs::write(&cfg_path, config.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    let p_path = dir.join(CHECKPOINT_PARAMS_FILE);
    fs::write(&p_path, params.to_bytes()).map_err(|e| Error::io(&p_path, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(NetworkConfig, ParamStore)> {
    let cfg_path = dir.join(CHECKPOINT_CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let config = NetworkConfig::from_text(&text)?;
    let p_path = dir.join(CHECKPOINT_PARAMS_FILE);
    let bytes = fs::read(&p_path).map_err(|e| Error::io(&p_path, e))?;
    let params = ParamStore::from_bytes(&bytes)?;
    params.check_layout(&config)?;
    Ok((config, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_complete() {
        let cfg = NetworkConfig::toy();
        let a = ParamStore::init(&cfg, 3).unwrap();
        let b = ParamStore::init(&cfg, 3).unwrap();
        let c = ParamStore::init(&cfg, 4).unwrap();
        a.check_layout(&cfg).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a.to_bytes(), c.to_bytes());
        assert!(a.iter().all(|(_, t)| t.requires_grad()));
        assert!(a.frozen().iter().all(|(_, t)| !t.requires_grad()));
    }

    #[test]
    fn bytes_round_trip_and_corruption() {
        let cfg = NetworkConfig::toy();
        let a = ParamStore::init(&cfg, 1).unwrap();
        let bytes = a.to_bytes();
        let b = ParamStore::from_bytes(&bytes).unwrap();
        assert_eq!(b.to_bytes(), bytes);
        assert!(ParamStore::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ParamStore::from_bytes(&extra).is_err());
    }

    #[test]
    fn checkpoint_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = NetworkConfig::toy();
        cfg.aggregation = false;
        let p = ParamStore::init(&cfg, 9).unwrap();
        save_checkpoint(dir.path(), &cfg, &p).unwrap();
        let (cfg2, p2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(p2.to_bytes(), p.to_bytes());
        let text = fs::read_to_string(dir.path().join(CHECKPOINT_CONFIG_FILE)).unwrap();
        assert!(text.contains("aggregation = off"));
    }
}
