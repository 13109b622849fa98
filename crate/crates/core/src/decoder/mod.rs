//! Plan-and-infill decoding.
//!
//! Each iteration drafts every masked slot of the current block in one
//! forward pass, picks the confident ones, and either accepts a verified
//! prefix of whole slots at once or completes the picked slots side by side
//! with a verify/re-mask loop. Committed slots join the cache in commit order
//! while keeping their true position ids.

mod config;
mod trace;

pub use config::{CacheMode, DecodeConfig, DraftMode};
pub use trace::{CommitPath, DecodeTrace, SlotTrace, TokenTrace};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{KvCache, Model, TokenBuffer, TokenId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::slotting::{restore_order, truncate_at_eos, Slot};

/// Picks draft tokens from model distributions.
#[derive(Debug)]
pub struct Drafter {
    temperature: Option<f64>,
    rng: ChaCha8Rng,
}

impl Drafter {
    pub fn new(mode: DraftMode) -> Self {
        match mode {
            DraftMode::Greedy => Self {
                temperature: None,
                rng: ChaCha8Rng::seed_from_u64(0),
            },
            DraftMode::Sampled { temperature, seed } => Self {
                temperature: Some(temperature),
                rng: ChaCha8Rng::seed_from_u64(seed),
            },
        }
    }

    fn draw<T: Scalar>(&mut self, probs: &[f64], logits: &[T]) -> TokenId {
        match self.temperature {
            None => argmax(probs),
            Some(temp) => {
                let max = logits.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = logits.iter().map(|x| ((x.as_f64() - max) / temp).exp()).collect();
                match WeightedIndex::new(&weights) {
                    Ok(dist) => dist.sample(&mut self.rng) as TokenId,
                    Err(_) => argmax(probs),
                }
            }
        }
    }
}

fn argmax(probs: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Decoding state for one prompt.
#[derive(Clone, Debug)]
pub struct DecodeState<T: Scalar> {
    prompt_len: usize,
    k: usize,
    block_slots: usize,
    clean: Vec<Slot>,
    masked: Vec<usize>,
    cache: KvCache<T>,
    eos_position: Option<usize>,
    forwards: u64,
}

impl<T: Scalar> DecodeState<T> {
    /// Runs the prompt through the model and opens no block yet.
    pub fn new(model: &Model<T>, prompt: &[TokenId], k: usize) -> Result<Self> {
        if prompt.is_empty() {
            return Err(Error::EmptyInput);
        }
        if k == 0 {
            return Err(Error::Argument("slot size must be at least 1".into()));
        }
        let (_, cache) = model.forward(&TokenBuffer::contiguous(prompt, 0), None)?;
        Ok(Self {
            prompt_len: prompt.len(),
            k,
            block_slots: 0,
            clean: Vec::new(),
            masked: Vec::new(),
            cache,
            eos_position: None,
            forwards: 1,
        })
    }

    /// Masks the `b` positions starting `offset` tokens into the response.
    pub fn open_block(&mut self, offset: usize, b: usize) -> Result<()> {
        if !self.masked.is_empty() {
            return Err(Error::Precondition("previous block is not finished".into()));
        }
        if b == 0 || b % self.k != 0 {
            return Err(Error::Argument(format!("block size {b} is not a multiple of {}", self.k)));
        }
        let start = self.prompt_len + offset;
        self.block_slots = b / self.k;
        self.masked = (0..self.block_slots).map(|i| start + i * self.k).collect();
        Ok(())
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn slot_size(&self) -> usize {
        self.k
    }

    /// Committed slots in generation order, with absolute origins.
    pub fn clean_slots(&self) -> &[Slot] {
        &self.clean
    }

    /// Absolute origins of masked slots, in positional order.
    pub fn masked_origins(&self) -> &[usize] {
        &self.masked
    }

    pub fn cache(&self) -> &KvCache<T> {
        &self.cache
    }

    /// Fraction of the current block's slots still masked.
    pub fn t(&self) -> f64 {
        if self.block_slots == 0 {
            0.0
        } else {
            self.masked.len() as f64 / self.block_slots as f64
        }
    }

    pub fn eos_position(&self) -> Option<usize> {
        self.eos_position
    }

    /// Forward passes issued through this state, prompt included.
    pub fn forwards(&self) -> u64 {
        self.forwards
    }

    /// Committed tokens in positional order (response part only).
    pub fn response_tokens(&self) -> Result<Vec<TokenId>> {
        restore_order(&self.clean)
    }

    fn slot_buffer(&self, origin: usize, tokens: &[TokenId]) -> TokenBuffer {
        TokenBuffer::contiguous(tokens, origin)
    }
}

/// Outcome of the planning step.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    /// Absolute origins of the masked slots, in positional order.
    pub origins: Vec<usize>,
    pub drafts: Vec<Vec<TokenId>>,
    /// Probability of each drafted first token.
    pub first_probs: Vec<f64>,
    /// Certainty score: top probability at each slot's first position.
    pub scores: Vec<f64>,
    /// Indices into `origins`, ascending.
    pub selected: Vec<usize>,
}

/// Slots scoring above `tau`, or the single best one when none does.
pub fn select_slots(scores: &[f64], tau: f64) -> Vec<usize> {
    let picked: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > tau).collect();
    if !picked.is_empty() || scores.is_empty() {
        return picked;
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    vec![best]
}

/// Length of the longest prefix whose probabilities all exceed `tau`.
pub fn accepted_prefix(probs: &[f64], tau: f64) -> usize {
    probs.iter().take_while(|&&p| p > tau).count()
}

/// Drafts every masked slot from one forward pass over mask placeholders.
pub fn plan<T: Scalar>(
    model: &Model<T>,
    state: &mut DecodeState<T>,
    cfg: &DecodeConfig,
    drafter: &mut Drafter,
) -> Result<Plan> {
    if state.masked.is_empty() {
        return Err(Error::Precondition("no masked slots to plan".into()));
    }
    let k = state.k;
    let mask = model.config().mask_id;
    let mut buf = TokenBuffer::with_capacity(state.masked.len() * k);
    for &origin in &state.masked {
        for j in 0..k {
            buf.push(mask, origin + j);
        }
    }
    let out = model.forward_segment(&buf, Some(&state.cache))?;
    state.forwards += 1;
    let mut drafts = Vec::with_capacity(state.masked.len());
    let mut first_probs = Vec::with_capacity(state.masked.len());
    let mut scores = Vec::with_capacity(state.masked.len());
    for si in 0..state.masked.len() {
        let mut draft = Vec::with_capacity(k);
        for j in 0..k {
            let row = si * k + j;
            let probs = out.logits.probs(row);
            let tok = drafter.draw(&probs, out.logits.row(row));
            if j == 0 {
                first_probs.push(probs[tok as usize]);
                scores.push(probs.iter().copied().fold(0.0, f64::max));
            }
            draft.push(tok);
        }
        drafts.push(draft);
    }
    let selected = select_slots(&scores, cfg.tau_slot);
    Ok(Plan {
        origins: state.masked.clone(),
        drafts,
        first_probs,
        scores,
        selected,
    })
}

/// Result of checking the selected drafts as one left-to-right sequence.
#[derive(Clone, Debug)]
pub struct GlobalVerdict<T: Scalar> {
    /// Per-token probabilities over the concatenated selected drafts.
    pub probs: Vec<f64>,
    /// Longest prefix above the token threshold.
    pub prefix: usize,
    /// Whole slots covered by that prefix.
    pub accepted: usize,
    kv: KvCache<T>,
}

/// Scores the concatenated selected drafts in one forward pass. Each slot's
/// first token keeps its planning probability; later tokens are scored given
/// every draft token before them.
pub fn global_verify<T: Scalar>(
    model: &Model<T>,
    state: &mut DecodeState<T>,
    plan: &Plan,
    cfg: &DecodeConfig,
) -> Result<GlobalVerdict<T>> {
    if plan.selected.is_empty() {
        return Err(Error::Precondition("no slots selected".into()));
    }
    let k = state.k;
    let mut buf = TokenBuffer::with_capacity(plan.selected.len() * k);
    for &si in &plan.selected {
        buf.extend_from(&state.slot_buffer(plan.origins[si], &plan.drafts[si]));
    }
    let out = model.forward_segment(&buf, Some(&state.cache))?;
    state.forwards += 1;
    let tokens = buf.tokens();
    let probs: Vec<f64> = (0..buf.len())
        .map(|q| {
            if q % k == 0 {
                plan.first_probs[plan.selected[q / k]]
            } else {
                out.logits.probs(q - 1)[tokens[q] as usize]
            }
        })
        .collect();
    let prefix = accepted_prefix(&probs, cfg.tau_token);
    Ok(GlobalVerdict {
        probs,
        prefix,
        accepted: prefix / k,
        kv: out.kv,
    })
}

/// A finished slot ready to be committed.
#[derive(Clone, Debug)]
pub struct CompletedSlot<T: Scalar> {
    /// Absolute position of the first token.
    pub origin: usize,
    pub tokens: Vec<TokenId>,
    pub path: CommitPath,
    /// Absolute positions of force-accepted tokens.
    pub forced: Vec<usize>,
    /// Completion round (1-based) in which each token was accepted.
    pub rounds: Vec<usize>,
    kv: KvCache<T>,
}

impl<T: Scalar> CompletedSlot<T> {
    /// Key/value rows computed for this slot given the cache it was completed on.
    pub fn kv(&self) -> &KvCache<T> {
        &self.kv
    }
}

/// The first `verdict.accepted` selected slots, taken wholesale.
pub fn accept_global<T: Scalar>(state: &DecodeState<T>, plan: &Plan, verdict: &GlobalVerdict<T>) -> Vec<CompletedSlot<T>> {
    let k = state.k;
    (0..verdict.accepted)
        .map(|n| {
            let si = plan.selected[n];
            CompletedSlot {
                origin: plan.origins[si],
                tokens: plan.drafts[si].clone(),
                path: CommitPath::Global,
                forced: Vec::new(),
                rounds: vec![1; k],
                kv: verdict.kv.slice(n * k..(n + 1) * k),
            }
        })
        .collect()
}

/// Completes every selected slot independently. Each round verifies all
/// unfinished slots in one batched pass, keeps the longest valid prefix
/// (forcing one token through when a slot makes no progress), then re-masks
/// and redrafts the remaining suffixes in a second batched pass.
pub fn complete_parallel<T: Scalar>(
    model: &Model<T>,
    state: &mut DecodeState<T>,
    plan: &Plan,
    cfg: &DecodeConfig,
    drafter: &mut Drafter,
) -> Result<Vec<CompletedSlot<T>>> {
    if plan.selected.is_empty() {
        return Err(Error::Precondition("no slots selected".into()));
    }
    let k = state.k;
    let mask = model.config().mask_id;
    struct Work<T: Scalar> {
        origin: usize,
        draft: Vec<TokenId>,
        first_prob: f64,
        done: usize,
        forced: Vec<usize>,
        rounds: Vec<usize>,
        kv: Option<KvCache<T>>,
    }
    let mut work: Vec<Work<T>> = plan
        .selected
        .iter()
        .map(|&si| Work {
            origin: plan.origins[si],
            draft: plan.drafts[si].clone(),
            first_prob: plan.first_probs[si],
            done: 0,
            forced: Vec::new(),
            rounds: vec![0; k],
            kv: None,
        })
        .collect();

    for round in 1.. {
        let active: Vec<usize> = (0..work.len()).filter(|&w| work[w].kv.is_none()).collect();
        if active.is_empty() {
            break;
        }
        let bufs: Vec<TokenBuffer> = active
            .iter()
            .map(|&w| state.slot_buffer(work[w].origin, &work[w].draft))
            .collect();
        let outs = model.forward_batch(&bufs, Some(&state.cache))?;
        state.forwards += 1;
        for (&w, out) in active.iter().zip(outs) {
            let slot = &mut work[w];
            let prob = |j: usize| {
                if j == 0 {
                    slot.first_prob
                } else {
                    out.logits.probs(j - 1)[slot.draft[j] as usize]
                }
            };
            let mut done = slot.done;
            while done < k && prob(done) > cfg.tau_token {
                done += 1;
            }
            if done == slot.done {
                slot.forced.push(slot.origin + done);
                done += 1;
            }
            for r in &mut slot.rounds[slot.done..done] {
                *r = round;
            }
            slot.done = done;
            if done == k {
                slot.kv = Some(out.kv);
            }
        }

        let active: Vec<usize> = (0..work.len()).filter(|&w| work[w].kv.is_none()).collect();
        if active.is_empty() {
            break;
        }
        let bufs: Vec<TokenBuffer> = active
            .iter()
            .map(|&w| {
                let slot = &work[w];
                let mut tokens = slot.draft[..slot.done].to_vec();
                tokens.resize(k, mask);
                state.slot_buffer(slot.origin, &tokens)
            })
            .collect();
        let outs = model.forward_batch(&bufs, Some(&state.cache))?;
        state.forwards += 1;
        for (&w, out) in active.iter().zip(outs) {
            let slot = &mut work[w];
            for j in slot.done..k {
                let probs = out.logits.probs(j);
                slot.draft[j] = drafter.draw(&probs, out.logits.row(j));
            }
        }
    }

    Ok(work
        .into_iter()
        .map(|w| CompletedSlot {
            origin: w.origin,
            tokens: w.draft,
            path: CommitPath::Iterative,
            forced: w.forced,
            rounds: w.rounds,
            kv: w.kv.expect("every slot finishes"),
        })
        .collect())
}

/// Moves completed slots from masked to clean in ascending origin order and
/// extends the cache. Returns the committed slots in commit order.
pub fn commit<T: Scalar>(
    model: &Model<T>,
    state: &mut DecodeState<T>,
    mut completed: Vec<CompletedSlot<T>>,
    cfg: &DecodeConfig,
) -> Result<Vec<CompletedSlot<T>>> {
    completed.sort_by_key(|c| c.origin);
    for c in &completed {
        if c.tokens.len() != state.k {
            return Err(Error::Shape(format!("slot at {} has {} tokens", c.origin, c.tokens.len())));
        }
        if !state.masked.contains(&c.origin) {
            return Err(Error::Integrity(format!("slot at {} is not masked", c.origin)));
        }
    }
    match cfg.cache_mode {
        CacheMode::Concat => {
            let mut cache = state.cache.clone();
            for c in &completed {
                cache.append(&c.kv)?;
            }
            state.cache = cache;
        }
        CacheMode::Recompute => {
            let mut buf = TokenBuffer::with_capacity(completed.len() * state.k);
            for c in &completed {
                buf.extend_from(&state.slot_buffer(c.origin, &c.tokens));
            }
            let (_, cache) = model.forward(&buf, Some(&state.cache))?;
            state.forwards += 1;
            state.cache = cache;
        }
    }
    for c in &completed {
        state.masked.retain(|&o| o != c.origin);
        state.clean.push(Slot {
            origin: c.origin,
            tokens: c.tokens.clone(),
        });
    }
    Ok(completed)
}

/// Drops masked slots lying wholly after the earliest committed EOS.
/// Returns how many were dropped.
pub fn truncate_on_eos<T: Scalar>(state: &mut DecodeState<T>, eos: TokenId) -> usize {
    let first = state
        .clean
        .iter()
        .filter_map(|s| s.tokens.iter().position(|&t| t == eos).map(|j| s.origin + j))
        .min();
    let Some(pos) = first else {
        return 0;
    };
    state.eos_position = Some(pos);
    let before = state.masked.len();
    state.masked.retain(|&o| o < pos);
    before - state.masked.len()
}

/// A decoded response.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    /// Generated tokens up to and including the first EOS.
    pub tokens: Vec<TokenId>,
    /// True when the length budget ran out before an EOS.
    pub truncated: bool,
    pub trace: DecodeTrace,
}

impl DecodeOutput {
    /// The response without its closing EOS.
    pub fn content(&self) -> &[TokenId] {
        if self.truncated {
            &self.tokens
        } else {
            &self.tokens[..self.tokens.len() - 1]
        }
    }
}

/// Decodes a response for `prompt` block by block.
pub fn decode<T: Scalar>(model: &Model<T>, prompt: &[TokenId], cfg: &DecodeConfig) -> Result<DecodeOutput> {
    cfg.validate()?;
    model.config().check_span(prompt.len(), cfg.max_len)?;
    let eos = model.config().eos_id;
    let mut drafter = Drafter::new(cfg.draft_mode);
    let mut state = DecodeState::new(model, prompt, cfg.k)?;
    let base = state.prompt_len;
    let mut slots = Vec::new();
    let mut tokens = Vec::new();
    let (mut iteration, mut step) = (0, 0);

    for block in 0..cfg.max_len / cfg.b {
        state.open_block(block * cfg.b, cfg.b)?;
        while !state.masked.is_empty() {
            iteration += 1;
            step += 1;
            let plan = plan(model, &mut state, cfg, &mut drafter)?;
            let verdict = global_verify(model, &mut state, &plan, cfg)?;
            let completed = if verdict.accepted > 0 {
                accept_global(&state, &plan, &verdict)
            } else {
                complete_parallel(model, &mut state, &plan, cfg, &mut drafter)?
            };
            let committed = commit(model, &mut state, completed, cfg)?;
            let mut last_round = 1;
            for c in &committed {
                slots.push(SlotTrace {
                    origin: c.origin - base,
                    iteration,
                    path: c.path,
                    forced: c.forced.iter().map(|p| p - base).collect(),
                });
                for (j, &r) in c.rounds.iter().enumerate() {
                    tokens.push(TokenTrace {
                        pos: c.origin - base + j,
                        iter: step + r - 1,
                    });
                    last_round = last_round.max(r);
                }
            }
            step += last_round - 1;
            truncate_on_eos(&mut state, eos);
        }
        if state.eos_position.is_some() {
            break;
        }
    }

    let (response, found) = truncate_at_eos(&state.response_tokens()?, eos);
    tokens.sort_by_key(|t| t.pos);
    let forwards = state.forwards;
    Ok(DecodeOutput {
        truncated: !found,
        trace: DecodeTrace {
            slots,
            tokens,
            forwards,
            tokens_total: response.len(),
            tpf: response.len() as f64 / forwards as f64,
        },
        tokens: response,
    })
}
