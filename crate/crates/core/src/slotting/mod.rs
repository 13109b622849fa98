//! Slot partitioning, training-time corruption and order restoration.

mod patterns;

pub use patterns::{count_masking_patterns, enumerate_patterns, factorial_e_floor, Scheme};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{TokenBuffer, TokenId};
use crate::error::{Error, Result};

/// One prompt/response pair of a corpus. The response carries no EOS.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
}

/// A response split into `K` consecutive slots of exactly `k` tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotPartition {
    k: usize,
    slots: Vec<Vec<TokenId>>,
    pad_count: usize,
    origins: Vec<usize>,
}

impl SlotPartition {
    pub fn slot_size(&self) -> usize {
        self.k
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn slots(&self) -> &[Vec<TokenId>] {
        &self.slots
    }

    /// Pad tokens appended to the final slot.
    pub fn pad_count(&self) -> usize {
        self.pad_count
    }

    /// Response-relative index of each slot's first token.
    pub fn origin_positions(&self) -> &[usize] {
        &self.origins
    }

    /// The original response, padding removed.
    pub fn response(&self) -> Vec<TokenId> {
        let mut out: Vec<TokenId> = self.slots.concat();
        out.truncate(out.len() - self.pad_count);
        out
    }
}

/// Splits `response` into slots of `k` tokens, padding the last one with
/// `pad_id`.
pub fn partition(response: &[TokenId], k: usize, pad_id: TokenId) -> Result<SlotPartition> {
    if k == 0 {
        return Err(Error::Argument("slot size must be at least 1".into()));
    }
    if response.is_empty() {
        return Err(Error::Argument("cannot partition an empty response".into()));
    }
    let num = response.len().div_ceil(k);
    let pad_count = num * k - response.len();
    let mut slots: Vec<Vec<TokenId>> = response.chunks(k).map(<[TokenId]>::to_vec).collect();
    if let Some(last) = slots.last_mut() {
        last.resize(k, pad_id);
    }
    Ok(SlotPartition {
        k,
        slots,
        pad_count,
        origins: (0..num).map(|i| i * k).collect(),
    })
}

/// A slot placed at absolute position `origin` (its first token's position id).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slot {
    pub origin: usize,
    pub tokens: Vec<TokenId>,
}

/// What a buffer position contributes to the training loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Prompt token: context only.
    Prompt,
    /// First token of a clean slot: context only.
    SlotHead,
    /// Clean token at in-slot index ≥ 1, predicted from the row before it.
    Arm,
    /// Mask placeholder, predicted at its own row.
    Masked { truth: TokenId },
    /// Slot padding: no loss on either side.
    Pad,
}

/// A corrupted prompt/response pair laid out as
/// `prompt ++ permuted clean slots ++ masked slots (positional order)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingInstance {
    pub prompt: Vec<TokenId>,
    pub k: usize,
    pub t: f64,
    /// In buffer (physical) order.
    pub clean_slots: Vec<Slot>,
    /// In positional order; `tokens` are the ground truth behind the masks.
    pub masked_slots: Vec<Slot>,
    pub buffer: TokenBuffer,
    pub roles: Vec<Role>,
}

impl TrainingInstance {
    pub fn num_slots(&self) -> usize {
        self.clean_slots.len() + self.masked_slots.len()
    }
}

/// Special tokens used while assembling training instances.
#[derive(Clone, Copy, Debug)]
pub struct CorruptionTokens {
    pub mask_id: TokenId,
    pub pad_id: TokenId,
}

/// Masks `⌊tK⌋` uniformly chosen slots, shuffles the clean ones, and lays
/// out the buffer with every token at its ground-truth position.
pub fn corrupt<R: Rng + ?Sized>(
    prompt: &[TokenId],
    partition: &SlotPartition,
    t: f64,
    special: CorruptionTokens,
    rng: &mut R,
) -> Result<TrainingInstance> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Argument(format!("masking ratio must be in [0, 1], got {t}")));
    }
    let big_k = partition.num_slots();
    let n_masked = (t * big_k as f64).floor() as usize;
    let mut is_masked = vec![false; big_k];
    for i in index::sample(rng, big_k, n_masked) {
        is_masked[i] = true;
    }
    let base = prompt.len();
    let place = |i: usize| Slot {
        origin: base + partition.origins[i],
        tokens: partition.slots[i].clone(),
    };
    let mut clean_slots: Vec<Slot> = (0..big_k).filter(|&i| !is_masked[i]).map(place).collect();
    clean_slots.shuffle(rng);
    let masked_slots: Vec<Slot> = (0..big_k).filter(|&i| is_masked[i]).map(place).collect();

    let total = base + big_k * partition.k;
    let mut buffer = TokenBuffer::with_capacity(total);
    let mut roles = Vec::with_capacity(total);
    for (i, &tok) in prompt.iter().enumerate() {
        buffer.push(tok, i);
        roles.push(Role::Prompt);
    }
    for slot in &clean_slots {
        for (j, &tok) in slot.tokens.iter().enumerate() {
            buffer.push(tok, slot.origin + j);
            roles.push(match j {
                _ if tok == special.pad_id => Role::Pad,
                0 => Role::SlotHead,
                _ => Role::Arm,
            });
        }
    }
    for slot in &masked_slots {
        for (j, &truth) in slot.tokens.iter().enumerate() {
            buffer.push(special.mask_id, slot.origin + j);
            roles.push(if truth == special.pad_id {
                Role::Pad
            } else {
                Role::Masked { truth }
            });
        }
    }
    Ok(TrainingInstance {
        prompt: prompt.to_vec(),
        k: partition.k,
        t,
        clean_slots,
        masked_slots,
        buffer,
        roles,
    })
}

/// Draws one training instance: `k` uniform from `slot_sizes` (capped at the
/// response length) and `t ~ U[0, 1 + 1/K)` clipped to 1, so the number of
/// masked slots is uniform on `0..=K` and fully masked responses occur.
pub fn sample_instance<R: Rng + ?Sized>(
    prompt: &[TokenId],
    response: &[TokenId],
    slot_sizes: &[usize],
    special: CorruptionTokens,
    rng: &mut R,
) -> Result<TrainingInstance> {
    if slot_sizes.is_empty() {
        return Err(Error::Argument("slot size set is empty".into()));
    }
    let k = slot_sizes[rng.random_range(0..slot_sizes.len())].min(response.len());
    let parts = partition(response, k.max(1), special.pad_id)?;
    let big_k = parts.num_slots() as f64;
    let t = rng.random_range(0.0..(big_k + 1.0) / big_k).min(1.0);
    corrupt(prompt, &parts, t, special, rng)
}

/// Concatenates slots sorted by origin.
pub fn restore_order(slots: &[Slot]) -> Result<Vec<TokenId>> {
    let mut order: Vec<&Slot> = slots.iter().collect();
    order.sort_by_key(|s| s.origin);
    for w in order.windows(2) {
        if w[0].origin == w[1].origin {
            return Err(Error::Integrity(format!("two slots share origin {}", w[0].origin)));
        }
    }
    Ok(order.iter().flat_map(|s| s.tokens.iter().copied()).collect())
}

/// Cuts `tokens` right after the first `eos`. Returns whether one was found.
pub fn truncate_at_eos(tokens: &[TokenId], eos: TokenId) -> (Vec<TokenId>, bool) {
    match tokens.iter().position(|&t| t == eos) {
        Some(i) => (tokens[..=i].to_vec(), true),
        None => (tokens.to_vec(), false),
    }
}
