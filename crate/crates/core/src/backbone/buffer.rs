use super::config::{ModelConfig, TokenId};
use crate::error::{Error, Result};

/// Token IDs paired one-to-one with explicit position IDs.
///
/// Physical order is the order attention is causal over; position IDs only
/// drive the rotary embedding and may be non-contiguous or unsorted.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenBuffer {
    tokens: Vec<TokenId>,
    positions: Vec<usize>,
}

impl TokenBuffer {
    pub fn new(tokens: Vec<TokenId>, positions: Vec<usize>) -> Result<Self> {
        if tokens.len() != positions.len() {
            return Err(Error::Shape(format!(
                "{} tokens but {} position ids",
                tokens.len(),
                positions.len()
            )));
        }
        Ok(Self { tokens, positions })
    }

    /// Tokens laid out at consecutive positions starting from `start`.
    pub fn contiguous(tokens: &[TokenId], start: usize) -> Self {
        Self {
            tokens: tokens.to_vec(),
            positions: (start..start + tokens.len()).collect(),
        }
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            tokens: Vec::with_capacity(n),
            positions: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, token: TokenId, position: usize) {
        self.tokens.push(token);
        self.positions.push(position);
    }

    pub fn extend_from(&mut self, other: &TokenBuffer) {
        self.tokens.extend_from_slice(&other.tokens);
        self.positions.extend_from_slice(&other.positions);
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn shifted(&self, offset: usize) -> Self {
        Self {
            tokens: self.tokens.clone(),
            positions: self.positions.iter().map(|p| p + offset).collect(),
        }
    }

    pub fn split_at(&self, mid: usize) -> (Self, Self) {
        let (ta, tb) = self.tokens.split_at(mid);
        let (pa, pb) = self.positions.split_at(mid);
        (
            Self { tokens: ta.to_vec(), positions: pa.to_vec() },
            Self { tokens: tb.to_vec(), positions: pb.to_vec() },
        )
    }

    /// Range and vocabulary checks against a model config.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(&position) = self.positions.iter().find(|&&p| p >= cfg.max_position) {
            return Err(Error::PositionOutOfRange {
                position,
                max_position: cfg.max_position,
            });
        }
        if let Some(&token) = self.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token,
                vocab_size: cfg.vocab_size,
            });
        }
        Ok(())
    }
}
