mod common;

use std::collections::BTreeMap;

use common::{greedy_ar, rng, small_config};
use proptest::prelude::*;
use rand::Rng;
use slotfill::backbone::Parameters;
use slotfill::decoder::{
    accept_global, accepted_prefix, commit, complete_parallel, global_verify, plan, truncate_on_eos, CommitPath,
    DecodeState, Drafter,
};
use slotfill::{decode, CacheMode, DecodeConfig, DraftMode, Model, ModelConfig, TokenBuffer, TokenId};

fn random_model(seed: u64) -> Model<f32> {
    let cfg = ModelConfig { max_position: 96, ..small_config(14, 2) };
    let mut params = Parameters::<f32>::init(&cfg, seed);
    // Larger weights give peaked, input-dependent distributions.
    for t in params.tensors_mut() {
        if t.shape.len() == 2 {
            t.data.iter_mut().for_each(|x| *x *= 40.0);
        }
    }
    Model::new(cfg, params).unwrap()
}

fn random_prompt(seed: u64) -> Vec<TokenId> {
    let mut r = rng(seed);
    let len = r.random_range(2..8);
    let mut p = vec![3];
    p.extend((1..len).map(|_| r.random_range(4..14)));
    p
}

fn preset(name: &str, max_len: usize) -> DecodeConfig {
    DecodeConfig { max_len, ..DecodeConfig::preset(name).unwrap() }
}

/// A model whose every row puts almost all mass on EOS.
fn eos_model() -> Model<f32> {
    let cfg = small_config(10, 1);
    let mut params = Parameters::<f32>::zeros(&cfg);
    let d = cfg.d_model;
    let sign = |i: usize| if i % 2 == 0 { 1.0 } else { -1.0 };
    for t in params.tensors_mut() {
        match t.name.as_str() {
            "tok_embed" => t.data.iter_mut().enumerate().for_each(|(i, x)| *x = sign(i % d)),
            "final_norm" => t.data.iter_mut().for_each(|x| *x = 1.0),
            "lm_head" => {
                for i in 0..d {
                    t.data[i * cfg.vocab_size + cfg.eos_id as usize] = sign(i);
                }
            }
            _ => {}
        }
    }
    Model::new(cfg, params).unwrap()
}

#[test]
fn single_token_slots_reduce_to_greedy_autoregression() {
    let model = random_model(1);
    let cfg = preset("ar", 24);
    for s in 0..20 {
        let prompt = random_prompt(s);
        let out = decode(&model, &prompt, &cfg).unwrap();
        assert_eq!(out.tokens, greedy_ar(&model, &prompt, 24), "prompt {prompt:?}");
    }
}

#[test]
fn immediate_eos_gives_empty_response() {
    let model = eos_model();
    for name in ["ar", "toy"] {
        let out = decode(&model, &[3, 5], &preset(name, 16)).unwrap();
        assert_eq!(out.tokens, vec![model.config().eos_id]);
        assert!(out.content().is_empty());
        assert!(!out.truncated);
        assert!(out.trace.forwards >= 1);
        assert_eq!(out.trace.tokens_total, 1);
    }
}

#[test]
fn forward_accounting_matches_backbone_counter() {
    let model = random_model(2);
    for mode in [CacheMode::Concat, CacheMode::Recompute] {
        for name in ["ar", "toy"] {
            let cfg = DecodeConfig { cache_mode: mode, ..preset(name, 32) };
            let before = model.forward_count();
            let out = decode(&model, &random_prompt(9), &cfg).unwrap();
            assert_eq!(out.trace.forwards, model.forward_count() - before);
            let tpf = out.trace.tokens_total as f64 / out.trace.forwards as f64;
            assert_eq!(out.trace.tpf, tpf);
        }
    }
}

#[test]
fn greedy_decoding_is_bit_reproducible() {
    let model = random_model(3);
    let cfg = preset("toy", 32);
    let prompt = random_prompt(4);
    let a = decode(&model, &prompt, &cfg).unwrap();
    let b = decode(&model, &prompt, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.trace.to_json().unwrap(), b.trace.to_json().unwrap());

    let sampled = DecodeConfig { draft_mode: DraftMode::Sampled { temperature: 1.0, seed: 5 }, ..cfg };
    assert_eq!(decode(&model, &prompt, &sampled).unwrap(), decode(&model, &prompt, &sampled).unwrap());
}

#[test]
fn committed_positions_form_contiguous_blocks() {
    let model = random_model(4);
    for seed in 0..10 {
        let cfg = DecodeConfig { tau_token: 0.05 * seed as f64, ..preset("toy", 32) };
        let out = decode(&model, &random_prompt(seed), &cfg).unwrap();
        let mut origins: Vec<usize> = out.trace.slots.iter().map(|s| s.origin).collect();
        origins.sort();
        let expect: Vec<usize> = (0..origins.len()).map(|i| i * cfg.k).collect();
        assert_eq!(origins, expect);
        for s in &out.trace.slots {
            assert!(s.forced.iter().all(|&p| p >= s.origin && p < s.origin + cfg.k));
            if s.path == CommitPath::Global {
                assert!(s.forced.is_empty());
            }
        }
    }
}

/// Runs one decode through the public step functions, checking after every
/// commit that the cache equals a fresh forward over the committed context.
fn decode_checking_cache(model: &Model<f64>, prompt: &[TokenId], cfg: &DecodeConfig) -> Vec<TokenId> {
    let mut state = DecodeState::new(model, prompt, cfg.k).unwrap();
    let mut drafter = Drafter::new(cfg.draft_mode);
    let eos = model.config().eos_id;
    for block in 0..cfg.max_len / cfg.b {
        state.open_block(block * cfg.b, cfg.b).unwrap();
        while !state.masked_origins().is_empty() {
            let p = plan(model, &mut state, cfg, &mut drafter).unwrap();
            let v = global_verify(model, &mut state, &p, cfg).unwrap();
            let done = if v.accepted > 0 {
                accept_global(&state, &p, &v)
            } else {
                complete_parallel(model, &mut state, &p, cfg, &mut drafter).unwrap()
            };
            commit(model, &mut state, done, cfg).unwrap();
            truncate_on_eos(&mut state, eos);

            let mut by_pos: BTreeMap<usize, TokenId> = prompt.iter().copied().enumerate().collect();
            for slot in state.clean_slots() {
                for (j, &t) in slot.tokens.iter().enumerate() {
                    by_pos.insert(slot.origin + j, t);
                }
            }
            let mut buf = TokenBuffer::with_capacity(by_pos.len());
            for &pos in state.cache().positions() {
                buf.push(by_pos[&pos], pos);
            }
            let (_, fresh) = model.forward(&buf, None).unwrap();
            let diff = state.cache().max_abs_diff(&fresh).unwrap();
            if cfg.cache_mode == CacheMode::Recompute {
                assert!(diff < 1e-5, "cache drift {diff}");
            }
        }
        if state.eos_position().is_some() {
            break;
        }
    }
    state.response_tokens().unwrap()
}

#[test]
fn recompute_mode_keeps_cache_honest() {
    let model = random_model(5).cast::<f64>();
    for seed in 0..6 {
        let cfg = DecodeConfig { cache_mode: CacheMode::Recompute, tau_token: 0.2, ..preset("toy", 32) };
        decode_checking_cache(&model, &random_prompt(seed), &cfg);
    }
}

#[test]
fn one_slot_per_iteration_makes_cache_modes_agree() {
    let model = random_model(6);
    for seed in 0..20 {
        let prompt = random_prompt(seed);
        // A slot-selection threshold above 1 keeps exactly one slot per iteration.
        let base = DecodeConfig { tau_slot: 1.0, ..preset("toy", 32) };
        let concat = decode(&model, &prompt, &DecodeConfig { cache_mode: CacheMode::Concat, ..base.clone() }).unwrap();
        let recompute =
            decode(&model, &prompt, &DecodeConfig { cache_mode: CacheMode::Recompute, ..base }).unwrap();
        assert!(concat.trace.slots_per_iteration().iter().all(|&(_, n)| n == 1));
        assert_eq!(concat.tokens, recompute.tokens);
    }
}

#[test]
fn every_accepted_token_cleared_the_threshold() {
    let model = random_model(7);
    let cfg = DecodeConfig { tau_token: 0.4, ..preset("toy", 32) };
    let mut state = DecodeState::new(&model, &random_prompt(2), cfg.k).unwrap();
    let mut drafter = Drafter::new(cfg.draft_mode);
    state.open_block(0, cfg.b).unwrap();
    let p = plan(&model, &mut state, &cfg, &mut drafter).unwrap();
    let v = global_verify(&model, &mut state, &p, &cfg).unwrap();
    assert!(v.probs[..v.prefix].iter().all(|&q| q > cfg.tau_token));
    assert!(v.prefix == v.probs.len() || v.probs[v.prefix] <= cfg.tau_token);
    assert_eq!(v.accepted, v.prefix / cfg.k);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn prefix_length_shrinks_as_threshold_rises(seed in any::<u64>()) {
        let model = random_model(seed % 50);
        let cfg = preset("toy", 32);
        let mut state = DecodeState::new(&model, &random_prompt(seed), cfg.k).unwrap();
        let mut drafter = Drafter::new(cfg.draft_mode);
        state.open_block(0, cfg.b).unwrap();
        let p = plan(&model, &mut state, &cfg, &mut drafter).unwrap();
        let mut last = usize::MAX;
        for i in 1..10 {
            let c = DecodeConfig { tau_token: i as f64 / 10.0, ..cfg.clone() };
            let v = global_verify(&model, &mut state.clone(), &p, &c).unwrap();
            prop_assert!(v.prefix <= last);
            last = v.prefix;
        }
    }

    #[test]
    fn prefix_scan_is_monotone(probs in prop::collection::vec(0.0f64..1.0, 0..40), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(accepted_prefix(&probs, hi) <= accepted_prefix(&probs, lo));
    }
}
