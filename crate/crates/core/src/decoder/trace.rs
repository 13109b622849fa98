use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommitPath {
    Global,
    Iterative,
}

/// One committed slot. Positions are relative to the start of the response.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotTrace {
    pub origin: usize,
    /// Planning iteration (1-based, counted across blocks) that committed it.
    pub iteration: usize,
    pub path: CommitPath,
    /// Positions accepted without passing verification.
    pub forced: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenTrace {
    pub pos: usize,
    /// Decoding step at which the token was accepted. Every planning
    /// iteration opens a step; each further completion round opens another.
    pub iter: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub slots: Vec<SlotTrace>,
    pub tokens: Vec<TokenTrace>,
    pub forwards: u64,
    pub tokens_total: usize,
    pub tpf: f64,
}

impl DecodeTrace {
    /// Number of slots committed in each planning iteration, by iteration.
    pub fn slots_per_iteration(&self) -> Vec<(usize, usize)> {
        let mut counts = std::collections::BTreeMap::new();
        for s in &self.slots {
            *counts.entry(s.iteration).or_insert(0) += 1;
        }
        counts.into_iter().collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
