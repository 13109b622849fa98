//! Checkpoint layout: a directory holding `tensors.bin` (little-endian,
//! row-major, each tensor prefixed by a header of name length, name, dtype
//! tag, rank and dims) and `manifest.json` (version, config, step and a
//! tensor index with byte offsets).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::optim::OptimizerState;
use super::params::{Parameters, Tensor};
use crate::atomic::write_atomic;
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

pub const CHECKPOINT_VERSION: u32 = 1;
const BLOB: &str = "tensors.bin";
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: Group,
    shape: Vec<usize>,
    /// Start of the tensor's header in the blob.
    offset: u64,
    /// Start of the tensor's data in the blob.
    data_offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    dtype: DType,
    step: u64,
    blob_bytes: u64,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Everything a checkpoint restores.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub params: Parameters<T>,
    pub optimizer: OptimizerState<T>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Fails unless the stored config equals `expected`.
    pub fn expect_config(self, expected: &ModelConfig) -> Result<Self> {
        if &self.config != expected {
            return Err(Error::ConfigMismatch(config_diff(&self.config, expected)));
        }
        Ok(self)
    }
}

fn config_diff(found: &ModelConfig, want: &ModelConfig) -> String {
    let a = serde_json::to_value(found).unwrap_or_default();
    let b = serde_json::to_value(want).unwrap_or_default();
    let mut diffs = Vec::new();
    if let (Some(a), Some(b)) = (a.as_object(), b.as_object()) {
        for (k, va) in a {
            if b.get(k) != Some(va) {
                diffs.push(format!("{k}: checkpoint has {va}, expected {}", b.get(k).cloned().unwrap_or_default()));
            }
        }
    }
    diffs.join("; ")
}

pub fn save_checkpoint<T: Scalar>(
    params: &Parameters<T>,
    optimizer: &OptimizerState<T>,
    config: &ModelConfig,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    config.validate()?;
    params.matches_config(config).map_err(Error::ConfigMismatch)?;
    fs::create_dir_all(dir)?;

    let mut blob = Vec::new();
    let mut index = Vec::new();
    let groups = [
        (Group::Param, params),
        (Group::AdamM, &optimizer.m),
        (Group::AdamV, &optimizer.v),
    ];
    for (group, set) in groups {
        for t in set.tensors() {
            let offset = blob.len() as u64;
            blob.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            blob.extend_from_slice(t.name.as_bytes());
            blob.push(T::DTYPE.tag());
            blob.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &dim in &t.shape {
                blob.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            let data_offset = blob.len() as u64;
            for &x in &t.data {
                x.write_le(&mut blob);
            }
            index.push(TensorEntry {
                name: t.name.clone(),
                group,
                shape: t.shape.clone(),
                offset,
                data_offset,
            });
        }
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        dtype: T::DTYPE,
        step: optimizer.step,
        blob_bytes: blob.len() as u64,
        config: config.clone(),
        tensors: index,
    };
    write_atomic(&dir.join(BLOB), &blob)?;
    write_atomic(&dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::CheckpointCorrupt {
                path: self.path.to_path_buf(),
                reason: format!("truncated at byte {} (wanted {n} more)", self.at),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Element type of the tensors stored in a checkpoint directory.
pub fn checkpoint_dtype(dir: impl AsRef<Path>) -> Result<DType> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.as_ref().join(MANIFEST))?)?;
    Ok(manifest.dtype)
}

pub fn load_checkpoint<T: Scalar>(dir: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST);
    let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: manifest.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if manifest.dtype != T::DTYPE {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint holds {:?} tensors, requested {:?}",
            manifest.dtype,
            T::DTYPE
        )));
    }
    let blob_path: PathBuf = dir.join(BLOB);
    let bytes = fs::read(&blob_path)?;
    let corrupt = |reason: String| Error::CheckpointCorrupt {
        path: blob_path.clone(),
        reason,
    };
    if bytes.len() as u64 != manifest.blob_bytes {
        return Err(corrupt(format!(
            "blob has {} bytes, manifest records {}",
            bytes.len(),
            manifest.blob_bytes
        )));
    }

    let mut groups: [Vec<Tensor<T>>; 3] = Default::default();
    let mut rd = Reader {
        bytes: &bytes,
        at: 0,
        path: &blob_path,
    };
    for entry in &manifest.tensors {
        if rd.at as u64 != entry.offset {
            return Err(corrupt(format!("tensor {} expected at byte {}", entry.name, entry.offset)));
        }
        let name_len = rd.u32()? as usize;
        let name = std::str::from_utf8(rd.take(name_len)?)
            .map_err(|e| corrupt(format!("tensor name is not utf-8: {e}")))?
            .to_string();
        let tag = rd.take(1)?[0];
        if DType::from_tag(tag) != Some(T::DTYPE) {
            return Err(corrupt(format!("tensor {name} has dtype tag {tag}")));
        }
        let rank = rd.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(rd.u64()? as usize);
        }
        if name != entry.name || shape != entry.shape || rd.at as u64 != entry.data_offset {
            return Err(corrupt(format!("header of {name} disagrees with the manifest")));
        }
        let n: usize = shape.iter().product();
        let size = T::DTYPE.size();
        let raw = rd.take(n * size)?;
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        let slot = match entry.group {
            Group::Param => 0,
            Group::AdamM => 1,
            Group::AdamV => 2,
        };
        groups[slot].push(Tensor { name, shape, data });
    }
    if rd.at != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - rd.at)));
    }

    let [p, m, v] = groups;
    let config = manifest.config;
    let params = Parameters::from_tensors(p);
    params.matches_config(&config).map_err(Error::ConfigMismatch)?;
    let m = Parameters::from_tensors(m);
    let v = Parameters::from_tensors(v);
    m.matches_config(&config).map_err(Error::ConfigMismatch)?;
    v.matches_config(&config).map_err(Error::ConfigMismatch)?;
    Ok(Checkpoint {
        config,
        params,
        optimizer: OptimizerState {
            step: manifest.step,
            m,
            v,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Model, TokenBuffer};

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            max_position: 32,
            ..ModelConfig::desk_default(12)
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::<f32>::init(cfg(), 9).unwrap();
        let mut opt = OptimizerState::new(model.params());
        opt.step = 17;
        opt.m.tensors_mut()[1].data[0] = 0.125;
        save_checkpoint(model.params(), &opt, model.config(), dir.path()).unwrap();
        let ck = load_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(&ck.params, model.params());
        assert_eq!(ck.optimizer, opt);
        assert_eq!(ck.config, cfg());

        let buf = TokenBuffer::contiguous(&[3, 5, 7], 0);
        let reloaded = Model::new(ck.config, ck.params).unwrap();
        assert_eq!(model.forward(&buf, None).unwrap().0, reloaded.forward(&buf, None).unwrap().0);
    }

    #[test]
    fn detects_truncation_version_and_config_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::<f64>::init(cfg(), 9).unwrap();
        let opt = OptimizerState::new(model.params());
        save_checkpoint(model.params(), &opt, model.config(), dir.path()).unwrap();

        let other = ModelConfig { vocab_size: 13, ..cfg() };
        let err = load_checkpoint::<f64>(dir.path()).unwrap().expect_config(&other).unwrap_err();
        assert!(matches!(err, Error::ConfigMismatch(ref m) if m.contains("vocab_size")));
        assert!(matches!(load_checkpoint::<f32>(dir.path()), Err(Error::ConfigMismatch(_))));

        let blob = dir.path().join(BLOB);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_checkpoint::<f64>(dir.path()), Err(Error::CheckpointCorrupt { .. })));
        fs::write(&blob, &bytes).unwrap();

        let mpath = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&mpath).unwrap().replace("\"version\": 1", "\"version\": 99");
        fs::write(&mpath, text).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(dir.path()),
            Err(Error::CheckpointVersion { found: 99, .. })
        ));
    }
}
