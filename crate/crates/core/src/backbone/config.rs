use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Architecture hyperparameters plus the special-token vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_position: usize,
    pub rope_base: f64,
    pub mask_id: TokenId,
    pub pad_id: TokenId,
    pub eos_id: TokenId,
    pub bos_id: TokenId,
}

impl ModelConfig {
    /// 4 layers, 4 heads, d_model 128, d_ff 512, 512 positions.
    pub fn desk_default(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            max_position: 512,
            rope_base: 10_000.0,
            pad_id: 0,
            mask_id: 1,
            eos_id: 2,
            bos_id: 3,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.vocab_size == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return fail("vocab_size, n_layers and n_heads must be positive".into());
        }
        if self.d_model == 0 || self.d_ff == 0 || self.max_position == 0 {
            return fail("d_model, d_ff and max_position must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return fail(format!("head_dim {} must be even for rotary embeddings", self.head_dim()));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return fail(format!("rope_base must be positive, got {}", self.rope_base));
        }
        let specials = [
            ("mask_id", self.mask_id),
            ("pad_id", self.pad_id),
            ("eos_id", self.eos_id),
            ("bos_id", self.bos_id),
        ];
        for (name, id) in specials {
            if id as usize >= self.vocab_size {
                return fail(format!("{name} {id} >= vocab_size {}", self.vocab_size));
            }
        }
        for (i, (a, x)) in specials.iter().enumerate() {
            for (b, y) in &specials[i + 1..] {
                if x == y {
                    return fail(format!("{a} and {b} share token id {x}"));
                }
            }
        }
        Ok(())
    }

    /// Checks that a prompt of `prompt_len` tokens plus `gen_len` generated
    /// tokens fits the position table.
    pub fn check_span(&self, prompt_len: usize, gen_len: usize) -> Result<()> {
        if prompt_len + gen_len > self.max_position {
            return Err(Error::InvalidConfig(format!(
                "prompt ({prompt_len}) + generation ({gen_len}) exceeds max_position {}",
                self.max_position
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::desk_default(64).validate().unwrap();
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = ModelConfig::desk_default(64);
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::desk_default(64);
        cfg.eos_id = cfg.pad_id;
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::desk_default(4);
        cfg.bos_id = 4;
        assert!(cfg.validate().is_err());

        let cfg = ModelConfig::desk_default(64);
        assert!(cfg.check_span(500, 16).is_err());
        assert!(cfg.check_span(100, 16).is_ok());
    }
}
