//! Reference implementations and fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slotfill::backbone::{loss_and_grad, LossFn, Parameters};
use slotfill::{Model, ModelConfig, Scalar, TokenBuffer, TokenId};

pub fn small_config(vocab: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        n_layers: layers,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        max_position: 128,
        ..ModelConfig::desk_default(vocab)
    }
}

/// A buffer of `len` random tokens at distinct random positions.
pub fn random_buffer<R: Rng>(rng: &mut R, cfg: &ModelConfig, len: usize) -> TokenBuffer {
    let mut positions: Vec<usize> = (0..cfg.max_position).collect();
    for i in 0..len {
        let j = rng.random_range(i..positions.len());
        positions.swap(i, j);
    }
    positions.truncate(len);
    let tokens = (0..len).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect();
    TokenBuffer::new(tokens, positions).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn argmax(p: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Plain left-to-right greedy decoding: the next token is the argmax of a
/// mask placeholder at the next position given everything before it; the
/// chosen token then joins the cache. Stops after an EOS or `max_len` tokens.
pub fn greedy_ar<T: Scalar>(model: &Model<T>, prompt: &[TokenId], max_len: usize) -> Vec<TokenId> {
    let cfg = model.config();
    let (_, mut cache) = model.forward(&TokenBuffer::contiguous(prompt, 0), None).unwrap();
    let mut out = Vec::new();
    for i in 0..max_len {
        let pos = prompt.len() + i;
        let query = TokenBuffer::new(vec![cfg.mask_id], vec![pos]).unwrap();
        let (logits, _) = model.forward(&query, Some(&cache)).unwrap();
        let tok = argmax(&logits.probs(0));
        out.push(tok);
        if tok == cfg.eos_id {
            break;
        }
        let (_, next) = model
            .forward(&TokenBuffer::new(vec![tok], vec![pos]).unwrap(), Some(&cache))
            .unwrap();
        cache = next;
    }
    out
}

/// Analytic gradients against central differences at `n` random parameter
/// entries. Returns the worst relative error, with magnitudes below `floor`
/// treated as `floor`.
pub fn gradient_check<L: LossFn>(
    cfg: &ModelConfig,
    params: &Parameters<f64>,
    batch: &[(TokenBuffer, L)],
    n: usize,
    seed: u64,
    floor: f64,
) -> f64 {
    let analytic = loss_and_grad(cfg, params, batch).unwrap().grads;
    let mut r = rng(seed);
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
    let total: usize = sizes.iter().sum();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let mut flat = r.random_range(0..total);
        let mut ti = 0;
        while flat >= sizes[ti] {
            flat -= sizes[ti];
            ti += 1;
        }
        let eval = |delta: f64| {
            let mut p = params.clone();
            p.tensors_mut()[ti].data[flat] += delta;
            loss_and_grad(cfg, &p, batch).unwrap().loss.total
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let a = analytic.tensors()[ti].data[flat];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    worst
}

/// Running sums modulo `base`, computed by brute force.
pub fn running_sums(payload: &[u32], base: u32) -> Vec<u32> {
    (0..payload.len())
        .map(|i| payload[..=i].iter().map(|&v| v as u64).sum::<u64>() as u32 % base)
        .collect()
}

/// `JS(p, q)` from the textbook formula with explicit KL terms.
pub fn js_reference(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let kl = |a: &[f64]| -> f64 {
        a.iter()
            .zip(&m)
            .map(|(&x, &y)| if x > 0.0 { x * (x / y).ln() } else { 0.0 })
            .sum()
    };
    0.5 * kl(p) + 0.5 * kl(q)
}

/// Binomial coefficient in exact integers.
pub fn choose(n: u64, k: u64) -> num_bigint::BigUint {
    let mut acc = num_bigint::BigUint::from(1u32);
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}
