//! Single-file checkpoints in the safetensors container.
//!
//! Tensors are stored as little-endian `F32`, keyed by
//! `{role}/encoder/...` (or `shared/encoder/...`) and `{role}/decoder/...`
//! layer paths. Running statistics of batch norms are stored alongside
//! the trainable weights. String metadata:
//!
//! | key            | value                               |
//! |----------------|-------------------------------------|
//! | `format`       | `ccnet-checkpoint`                  |
//! | `version`      | `1`                                 |
//! | `arch`         | JSON [`ArchConfig`]                 |
//! | `iteration`    | completed optimizer steps           |
//! | `seed`         | initialisation seed                 |
//! | `train_config` | JSON [`TrainConfig`]                |

use std::collections::{HashMap, HashSet};
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::error::{Error, Result};
use crate::netcore::{ArchConfig, CcNet};
use crate::nn::Module;
use crate::real::Real;
use crate::training::TrainConfig;

pub const FORMAT: &str = "ccnet-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub arch: ArchConfig,
    pub iteration: usize,
    pub seed: u64,
    pub config: TrainConfig,
}

impl CheckpointMeta {
    pub fn new(arch: ArchConfig, iteration: usize, config: TrainConfig) -> Self {
        Self {
            arch,
            iteration,
            seed: config.seed,
            config,
        }
    }

    fn to_map(&self) -> Result<HashMap<String, String>> {
        Ok(HashMap::from([
            ("format".to_string(), FORMAT.to_string()),
            ("version".to_string(), VERSION.to_string()),
            ("arch".to_string(), serde_json::to_string(&self.arch)?),
            ("iteration".to_string(), self.iteration.to_string()),
            ("seed".to_string(), self.seed.to_string()),
            ("train_config".to_string(), serde_json::to_string(&self.config)?),
        ]))
    }

    fn from_map(map: &HashMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            map.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("metadata key `{k}` missing")))
        };
        if get("format")? != FORMAT {
            return Err(Error::Checkpoint(format!("not a {FORMAT} file")));
        }
        let version: u32 = get("version")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad version".into()))?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("metadata `{k}` is not an integer")))
        };
        Ok(Self {
            arch: serde_json::from_str(get("arch")?)?,
            iteration: num("iteration")? as usize,
            seed: num("seed")?,
            config: serde_json::from_str(get("train_config")?)?,
        })
    }
}

fn ck<E: std::fmt::Display>(e: E) -> Error {
    Error::Checkpoint(e.to_string())
}

/// Writes every parameter and buffer of `net` plus metadata to `path`.
pub fn save<F: Real>(net: &CcNet<F>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let mut entries: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    net.visit("", &mut |name, p| {
        let bytes = p
            .value
            .iter()
            .flat_map(|v| (v.to_f64c() as f32).to_le_bytes())
            .collect();
        entries.push((name.to_string(), p.shape.clone(), bytes));
    });
    let views = entries
        .iter()
        .map(|(n, s, b)| Ok((n.as_str(), TensorView::new(Dtype::F32, s.clone(), b).map_err(ck)?)))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    safetensors::serialize_to_file(views, Some(meta.to_map()?), path).map_err(ck)
}

/// Reads the metadata without materialising the network.
pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = read_file(path)?;
    let (_, md) = SafeTensors::read_metadata(&bytes).map_err(ck)?;
    let map = md
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no metadata".into()))?;
    CheckpointMeta::from_map(map)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(std::fs::read(path)?)
}

/// Rebuilds the network described by the metadata and fills its state.
pub fn load<F: Real>(path: &Path) -> Result<(CcNet<F>, CheckpointMeta)> {
    let bytes = read_file(path)?;
    let (_, md) = SafeTensors::read_metadata(&bytes).map_err(ck)?;
    let meta = CheckpointMeta::from_map(
        md.metadata()
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no metadata".into()))?,
    )?;
    let st = SafeTensors::deserialize(&bytes).map_err(ck)?;
    let mut net = CcNet::new(&meta.arch, meta.seed)?;
    let mut seen = HashSet::new();
    let mut failure = None;
    net.visit_mut("", &mut |name, p| {
        if failure.is_some() {
            return;
        }
        let view = match st.tensor(name) {
            Ok(v) => v,
            Err(_) => {
                failure = Some(Error::Checkpoint(format!("tensor `{name}` missing")));
                return;
            }
        };
        if view.dtype() != Dtype::F32 || view.shape() != p.shape.as_slice() {
            failure = Some(Error::Checkpoint(format!(
                "tensor `{name}` is {:?}{:?}, expected F32{:?}",
                view.dtype(),
                view.shape(),
                p.shape
            )));
            return;
        }
        for (dst, chunk) in p.value.iter_mut().zip(view.data().chunks_exact(4)) {
            let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
            *dst = F::from_f64c(v as f64);
        }
        seen.insert(name.to_string());
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = st.names().into_iter().find(|n| !seen.contains(*n)) {
        return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
    }
    Ok((net, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::Role;
    use crate::tensor::Tensor;

    #[test]
    fn round_trip_preserves_outputs() {
        let arch = ArchConfig {
            base_channels: 2,
            ..Default::default()
        };
        let net: CcNet<f32> = CcNet::new(&arch, 5).unwrap();
        let meta = CheckpointMeta::new(arch, 7, TrainConfig::default());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.safetensors");
        save(&net, &meta, &path).unwrap();
        let (back, m): (CcNet<f32>, _) = load(&path).unwrap();
        assert_eq!(m, meta);
        assert_eq!(read_meta(&path).unwrap().iteration, 7);
        let x = Tensor::from_vec(1, 1, [16, 16, 16], (0..4096).map(|i| (i % 7) as f32 * 0.1).collect()).unwrap();
        for r in Role::ALL {
            let a = net.model(r).forward(&x).unwrap();
            let b = back.model(r).forward(&x).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn missing_file_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nope.safetensors");
        assert!(matches!(load::<f32>(&p), Err(Error::MissingInput(_))));
        std::fs::write(&p, b"garbage").unwrap();
        assert!(matches!(load::<f32>(&p), Err(Error::Checkpoint(_))));
    }
}
