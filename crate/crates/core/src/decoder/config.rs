use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheMode {
    /// Append the key/value rows produced while completing each slot.
    Concat,
    /// Re-run the newly committed tokens through the model and keep those rows.
    Recompute,
}

impl std::str::FromStr for CacheMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Self::Concat),
            "recompute" => Ok(Self::Recompute),
            _ => Err(Error::Argument(format!("unknown cache mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum DraftMode {
    Greedy,
    Sampled { temperature: f64, seed: u64 },
}

/// Decoding hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub tau_slot: f64,
    pub tau_token: f64,
    /// Slot size.
    pub k: usize,
    /// Block size.
    pub b: usize,
    pub max_len: usize,
    pub cache_mode: CacheMode,
    pub draft_mode: DraftMode,
}

impl DecodeConfig {
    pub const PRESETS: [&'static str; 3] = ["default", "toy", "ar"];

    /// Named presets:
    /// * `default`: k=32, b=128, τ_slot=0.9, τ_token=0.3
    /// * `toy`: k=4, b=16, τ_slot=0.6, τ_token=0.3
    /// * `ar`: one-token slots and blocks, i.e. plain left-to-right decoding
    pub fn preset(name: &str) -> Result<Self> {
        let (tau_slot, tau_token, k, b, max_len) = match name {
            "default" => (0.9, 0.3, 32, 128, 256),
            "toy" => (0.6, 0.3, 4, 16, 32),
            "ar" => (0.6, 0.3, 1, 1, 32),
            _ => {
                return Err(Error::Argument(format!(
                    "unknown preset {name:?} (expected one of {:?})",
                    Self::PRESETS
                )))
            }
        };
        Ok(Self {
            tau_slot,
            tau_token,
            k,
            b,
            max_len,
            cache_mode: CacheMode::Concat,
            draft_mode: DraftMode::Greedy,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        for (name, tau) in [("tau_slot", self.tau_slot), ("tau_token", self.tau_token)] {
            if !(0.0..=1.0).contains(&tau) {
                return bad(format!("{name} = {tau} is outside [0, 1]"));
            }
        }
        if self.k == 0 {
            return bad("slot size must be at least 1".into());
        }
        if self.b < self.k || self.b % self.k != 0 {
            return bad(format!("block size {} must be a multiple of slot size {}", self.b, self.k));
        }
        if self.max_len == 0 || self.max_len % self.b != 0 {
            return bad(format!("max_len {} must be a positive multiple of block size {}", self.max_len, self.b));
        }
        if let DraftMode::Sampled { temperature, .. } = self.draft_mode {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return bad(format!("sampling temperature must be positive, got {temperature}"));
            }
        }
        Ok(())
    }
}
