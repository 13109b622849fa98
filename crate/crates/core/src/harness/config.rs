use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tasks::{Task, TaskSpec};
use crate::backbone::{AdamW, ModelConfig};
use crate::decoder::DecodeConfig;
use crate::error::{Error, Result};
use crate::scalar::DType;

/// Relative output directories are resolved under this directory when set.
pub const OUTPUT_ROOT_ENV: &str = "SLOTFILL_OUT";

/// Everything needed to reproduce a training and evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub model: ModelConfig,
    pub dtype: DType,
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: AdamW,
    pub lambda: f64,
    pub slot_sizes: Vec<usize>,
    /// Fraction of training instances whose response is split at a random
    /// point, with the part before it moved into the clean context.
    pub prefix_rate: f64,
    /// Decoding setups evaluated after training, by name.
    pub decode: BTreeMap<String, DecodeConfig>,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::toy(Task::Copy)
    }
}

impl RunConfig {
    /// A small setup that trains in minutes on one CPU core.
    pub fn toy(task: Task) -> Self {
        let mut decode = BTreeMap::new();
        for name in ["ar", "toy"] {
            decode.insert(name.to_string(), DecodeConfig::preset(name).expect("builtin preset"));
        }
        Self {
            task: TaskSpec {
                task,
                min_len: 4,
                max_len: 16,
                values: 24,
            },
            train_samples: 200_000,
            eval_samples: 100,
            model: ModelConfig {
                n_layers: 2,
                n_heads: 4,
                d_model: 64,
                d_ff: 256,
                max_position: 64,
                ..ModelConfig::desk_default(32)
            },
            dtype: DType::F32,
            steps: 4000,
            batch_size: 32,
            optimizer: AdamW {
                lr: 3e-3,
                warmup_steps: 100,
                decay_steps: Some(4000),
                ..AdamW::default()
            },
            lambda: 1.0,
            slot_sizes: vec![1, 2, 4, 8],
            prefix_rate: 0.0,
            decode,
            seed: 0,
            output_dir: PathBuf::from("run"),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate(&self.model)?;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.prefix_rate) {
            return bad(format!("prefix rate must be in [0, 1], got {}", self.prefix_rate));
        }
        if self.slot_sizes.is_empty() || self.slot_sizes.contains(&0) {
            return bad("slot sizes must be a non-empty set of positive sizes".into());
        }
        if self.batch_size == 0 || self.train_samples == 0 {
            return bad("batch size and training corpus size must be positive".into());
        }
        if !(self.optimizer.lr >= 0.0) {
            return bad(format!("learning rate must be >= 0, got {}", self.optimizer.lr));
        }
        for (name, d) in &self.decode {
            d.validate()
                .map_err(|e| Error::InvalidConfig(format!("decode setup {name:?}: {e}")))?;
            let needed = self.task.max_len + 2 + d.max_len;
            if needed > self.model.max_position {
                return bad(format!(
                    "decode setup {name:?} reaches position {needed}, model allows {}",
                    self.model.max_position
                ));
            }
        }
        Ok(())
    }

    /// The output directory, placed under `$SLOTFILL_OUT` when relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }
}

/// Resolves a relative path under `$SLOTFILL_OUT` when that is set.
pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}
