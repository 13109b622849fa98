//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

mod common;

use std::collections::HashMap;
use std::process::ExitCode;
use std::time::Instant;

use common::{choose, gradient_check, greedy_ar, random_buffer, rng};
use num_bigint::BigUint;
use rand::Rng;
use slotfill::backbone::{Parameters, TokenNll};
use slotfill::decoder::{global_verify, plan, DecodeState, Drafter};
use slotfill::harness::{draw_batch, run_pipeline, EvalReport, RunConfig, RunOutput, Task};
use slotfill::objective::{arm_loss, hybrid_loss, mdm_loss, HybridObjective};
use slotfill::probe::dependency_probe;
use slotfill::slotting::{
    corrupt, count_masking_patterns, enumerate_patterns, factorial_e_floor, partition, CorruptionTokens, Scheme,
};
use slotfill::{decode, CacheMode, DType, DecodeConfig, Logits, Model};

type Check = Result<String, String>;

struct Tally {
    failed: usize,
}

impl Tally {
    fn run(&mut self, id: usize, name: &str, check: impl FnOnce() -> Check) {
        let start = Instant::now();
        let (status, detail) = match check() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                self.failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {id:>2} {status} {name}: {detail} [{:.1}s]", start.elapsed().as_secs_f64());
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn train(task: Task) -> RunOutput<f32> {
    let cfg = RunConfig::toy(task);
    let start = Instant::now();
    let out = run_pipeline::<f32>(&cfg, |row| {
        if row.step % 1000 == 0 {
            eprintln!("  [{task:?}] step {} loss {:.4}", row.step, row.total);
        }
    })
    .expect("training run");
    eprintln!("  [{task:?}] trained in {:.0}s", start.elapsed().as_secs_f64());
    out
}

fn report<'a>(out: &'a RunOutput<f32>, preset: &str) -> &'a EvalReport {
    out.reports.iter().find(|r| r.preset == preset).expect("preset evaluated")
}

fn cache_equivalence() -> Check {
    let cfg = RunConfig::toy(Task::Copy).model;
    let model = Model::<f32>::init(cfg.clone(), 17).map_err(|e| e.to_string())?;
    let mut r = rng(1);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let len = r.random_range(2..=cfg.max_position);
        let buf = random_buffer(&mut r, &cfg, len);
        let (head, tail) = buf.split_at(r.random_range(1..len));
        let (full, _) = model.forward(&buf, None).unwrap();
        let (_, cache) = model.forward(&head, None).unwrap();
        let (part, _) = model.forward(&tail, Some(&cache)).unwrap();
        for (a, b) in full.row(full.rows() - 1).iter().zip(part.row(part.rows() - 1)) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst < 1e-5, || format!("max final-row difference {worst:e}"))?;
    Ok(format!("100 buffers, max final-row difference {worst:e}"))
}

fn gradient_agreement() -> Check {
    let mut run = RunConfig::toy(Task::Copy);
    run.batch_size = 2;
    let cfg = run.model.clone();
    let params = Parameters::<f64>::init(&cfg, 5);
    let corpus = slotfill::harness::gen_corpus(&run.task, &cfg, 8, 1).unwrap();
    let batch = draw_batch(&run, &corpus, &mut rng(2)).unwrap();
    let worst = gradient_check(&cfg, &params, &batch, 200, 3, 1e-6);
    ensure(worst < 1e-3, || format!("worst relative error {worst:e}"))?;
    Ok(format!("200 parameters, worst relative error {worst:e}"))
}

fn arm_reduction(model: &Model<f32>, prompts: &[Vec<u32>]) -> Check {
    let cfg = DecodeConfig::preset("ar").unwrap();
    for (i, p) in prompts.iter().enumerate() {
        let out = decode(model, p, &cfg).map_err(|e| e.to_string())?;
        let oracle = greedy_ar(model, p, cfg.max_len);
        ensure(out.tokens == oracle, || format!("prompt {i}: {:?} vs oracle {oracle:?}", out.tokens))?;
    }
    Ok(format!("{} prompts identical to the greedy oracle", prompts.len()))
}

fn counting_oracle() -> Check {
    let (mut cases, mut by_series) = (0, 0);
    for len in 1..=14usize {
        for k in (1..=len).filter(|k| len % k == 0) {
            for scheme in Scheme::ALL {
                let closed = count_masking_patterns(len, k, scheme).map_err(|e| e.to_string())?;
                let oracle = match enumerate_patterns(len, k, scheme) {
                    Ok(brute) => BigUint::from(brute),
                    // Too many slot orders to walk; count subsets times orders instead.
                    Err(_) if scheme == Scheme::Slot => {
                        by_series += 1;
                        let n = (len / k) as u64;
                        (1..=n).map(|i| choose(n, i) * (1..=i).fold(BigUint::from(1u32), |a, x| a * x)).sum()
                    }
                    Err(e) => return Err(e.to_string()),
                };
                ensure(closed == oracle, || format!("L={len} k={k} {scheme:?}: {closed} vs {oracle}"))?;
                cases += 1;
            }
        }
    }
    for n in 1..=12u64 {
        let series: BigUint = (1..=n)
            .map(|i| choose(n, i) * (1..=i).fold(BigUint::from(1u32), |a, x| a * x))
            .sum();
        ensure(factorial_e_floor(n as usize) - 1u32 == series, || format!("identity fails at n={n}"))?;
    }
    Ok(format!("{cases} (L, k, scheme) cases ({by_series} by series) and n = 1..=12 identity"))
}

fn corruption_statistics() -> Check {
    let special = CorruptionTokens { mask_id: 1, pad_id: 0 };
    let response: Vec<u32> = (6..18).collect();
    let parts = partition(&response, 3, 0).unwrap();
    let mut r = rng(42);
    let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
    let n = 10_000;
    for _ in 0..n {
        let inst = corrupt(&[3, 4], &parts, 0.5, special, &mut r).map_err(|e| e.to_string())?;
        ensure(inst.masked_slots.len() == 2, || format!("{} masked slots", inst.masked_slots.len()))?;
        let origins: Vec<usize> = inst.masked_slots.iter().map(|s| s.origin).collect();
        ensure(origins.windows(2).all(|w| w[0] < w[1]), || format!("masked order {origins:?}"))?;
        *counts.entry(origins).or_default() += 1;
    }
    ensure(counts.len() == 6, || format!("{} distinct subsets", counts.len()))?;
    let worst = counts
        .values()
        .map(|&c| (c as f64 / n as f64 - 1.0 / 6.0).abs())
        .fold(0.0, f64::max);
    ensure(worst <= 0.02, || format!("subset frequency off by {worst:.4}"))?;
    Ok(format!("max subset frequency deviation {worst:.4}"))
}

fn loss_conventions() -> Check {
    let special = CorruptionTokens { mask_id: 1, pad_id: 0 };
    let response: Vec<u32> = (6..22).collect();
    let v = 32;
    let mut r = rng(3);
    for k in [1, 2, 4, 8] {
        let parts = partition(&response, k, 0).unwrap();
        let inst = corrupt(&[3], &parts, 0.5, special, &mut r).unwrap();
        let lg = Logits::<f64>::uniform(inst.buffer.len(), v);
        let ln_v = (v as f64).ln();
        let mdm = mdm_loss(&lg, &inst).unwrap();
        ensure((mdm - ln_v).abs() < 1e-6, || format!("k={k}: mdm {mdm}"))?;
        let arm = arm_loss(&lg, &inst).unwrap();
        if k > 1 {
            ensure((arm - ln_v).abs() < 1e-6, || format!("k={k}: arm {arm}"))?;
        } else {
            ensure(arm == 0.0, || format!("single-token slots give arm {arm}"))?;
        }
        let total = hybrid_loss(&lg, &inst, 1.0).unwrap();
        ensure((total - (arm + mdm)).abs() < 1e-12, || format!("lambda=1 total {total}"))?;
        let obj = HybridObjective::new(&inst, 1.0).unwrap();
        let rep = slotfill::backbone::LossFn::evaluate(&obj, lg.data(), v, None, 1.0).unwrap();
        ensure((rep.total - total).abs() < 1e-12, || "objective report disagrees".into())?;
    }
    let all_clean = corrupt(&[3], &partition(&response, 4, 0).unwrap(), 0.0, special, &mut r).unwrap();
    let lg = Logits::<f64>::uniform(all_clean.buffer.len(), v);
    ensure(mdm_loss(&lg, &all_clean).unwrap() == 0.0, || "no masked slots but mdm != 0".into())?;
    let empty = TokenNll::default();
    let rep = slotfill::backbone::LossFn::evaluate(&empty, lg.data(), v, None, 1.0).unwrap();
    ensure(rep.total == 0.0, || "empty term set is not 0".into())?;
    Ok("uniform logits give ln V, empty sides give 0, lambda=1 sums".into())
}

fn convergence(copy: &RunOutput<f32>, reverse: &RunOutput<f32>) -> Check {
    let mut lines = Vec::new();
    let mut ok = true;
    for (name, out) in [("copy", copy), ("reverse", reverse)] {
        let ar = report(out, "ar").accuracy;
        let pi = report(out, "toy").accuracy;
        ok &= ar >= 0.95 && pi >= 0.95 && pi >= ar - 0.03;
        lines.push(format!("{name}: ar {ar:.2}, plan-and-infill {pi:.2}"));
    }
    let detail = lines.join("; ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn parallelism(copy: &RunOutput<f32>) -> Check {
    let rep = report(copy, "toy");
    let multi = copy.traces["toy"]
        .iter()
        .flat_map(|t| t.slots_per_iteration())
        .map(|(_, n)| n)
        .max()
        .unwrap_or(0);
    let detail = format!("tpf {:.3}, most slots committed in one iteration {multi}", rep.tpf);
    ensure(rep.tpf > 1.5 && multi >= 2, || detail.clone())?;
    Ok(detail)
}

fn threshold_monotonicity(model: &Model<f32>, prompts: &[Vec<u32>]) -> Check {
    let cfg = DecodeConfig::preset("toy").unwrap();
    let mut pairs = 0;
    let mut moved = 0;
    for p in prompts.iter().take(50) {
        let mut state = DecodeState::new(model, p, cfg.k).map_err(|e| e.to_string())?;
        let mut drafter = Drafter::new(cfg.draft_mode);
        state.open_block(0, cfg.b).unwrap();
        let frozen = plan(model, &mut state, &cfg, &mut drafter).map_err(|e| e.to_string())?;
        let lens: Vec<usize> = (1..=9)
            .map(|i| {
                let c = DecodeConfig { tau_token: i as f64 / 10.0, ..cfg.clone() };
                global_verify(model, &mut state.clone(), &frozen, &c).unwrap().prefix
            })
            .collect();
        ensure(lens.windows(2).all(|w| w[1] <= w[0]), || format!("prefix lengths {lens:?}"))?;
        moved += (lens[0] != lens[8]) as usize;
        pairs += 1;
    }
    Ok(format!("{pairs} frozen plans non-increasing, {moved} of them change across the sweep"))
}

fn cache_mode_equivalence(models: &[(&str, &Model<f32>, &[Vec<u32>])]) -> Check {
    let base = DecodeConfig { tau_slot: 1.0, ..DecodeConfig::preset("toy").unwrap() };
    let mut n = 0;
    for (name, model, prompts) in models {
        for p in prompts.iter() {
            let concat = decode(*model, p, &DecodeConfig { cache_mode: CacheMode::Concat, ..base.clone() }).unwrap();
            let recompute =
                decode(*model, p, &DecodeConfig { cache_mode: CacheMode::Recompute, ..base.clone() }).unwrap();
            ensure(concat.trace.slots_per_iteration().iter().all(|&(_, c)| c == 1), || {
                format!("{name}: an iteration committed several slots")
            })?;
            ensure(concat.tokens == recompute.tokens, || format!("{name}: responses differ for {p:?}"))?;
            n += 1;
        }
    }
    Ok(format!("{n} prompts with one slot per iteration, identical responses"))
}

fn locality(modsum: &RunOutput<f32>) -> Check {
    let curves = dependency_probe(&modsum.model, &modsum.eval_corpus, &[0.5], 2000, 11).map_err(|e| e.to_string())?;
    let c = &curves[0];
    let near = c.mean_where(|d| d.abs() == 1).ok_or("no records at distance 1")?;
    let far = c.mean_where(|d| d.abs() >= 8).ok_or("no records at distance >= 8")?;
    let detail = format!("mean JS at |d|=1 {near:.4}, at |d|>=8 {far:.4}");
    ensure(near > far, || detail.clone())?;
    Ok(detail)
}

fn determinism() -> Check {
    let mut summary = Vec::new();
    for task in [Task::Copy, Task::Reverse] {
        let mut cfg = RunConfig::toy(task);
        cfg.dtype = DType::F64;
        cfg.steps = 150;
        cfg.optimizer.decay_steps = Some(150);
        let a = run_pipeline::<f64>(&cfg, |_| {}).map_err(|e| e.to_string())?;
        let b = run_pipeline::<f64>(&cfg, |_| {}).map_err(|e| e.to_string())?;
        ensure(a.train_corpus == b.train_corpus && a.eval_corpus == b.eval_corpus, || {
            format!("{task:?}: corpora differ")
        })?;
        let drift = a
            .losses
            .iter()
            .zip(&b.losses)
            .map(|(x, y)| (x.total - y.total).abs().max((x.arm - y.arm).abs()).max((x.mdm - y.mdm).abs()))
            .fold(0.0, f64::max);
        ensure(a.losses.len() == b.losses.len() && drift <= 1e-6, || format!("{task:?}: loss drift {drift:e}"))?;
        for (ra, rb) in a.reports.iter().zip(&b.reports) {
            let same = ra.results.iter().zip(&rb.results).all(|(x, y)| x.response == y.response);
            ensure(same, || format!("{task:?}/{}: responses differ", ra.preset))?;
        }
        ensure(a.traces == b.traces, || format!("{task:?}: traces differ"))?;
        summary.push(format!("{task:?} loss drift {drift:e}"));
    }
    Ok(format!("{} (64-bit, {} steps each)", summary.join(", "), 150))
}

fn prompts(out: &RunOutput<f32>) -> Vec<Vec<u32>> {
    out.eval_corpus.iter().map(|s| s.prompt.clone()).collect()
}

fn main() -> ExitCode {
    let copy = train(Task::Copy);
    let reverse = train(Task::Reverse);
    let modsum = train(Task::ModsumChain);
    let (copy_prompts, reverse_prompts) = (prompts(&copy), prompts(&reverse));

    let mut tally = Tally { failed: 0 };
    tally.run(1, "cache equivalence", cache_equivalence);
    tally.run(2, "gradient check", gradient_agreement);
    tally.run(3, "ARM reduction", || arm_reduction(&reverse.model, &reverse_prompts));
    tally.run(4, "counting oracle", counting_oracle);
    tally.run(5, "corruption statistics", corruption_statistics);
    tally.run(6, "loss conventions", loss_conventions);
    tally.run(7, "toy convergence", || convergence(&copy, &reverse));
    tally.run(8, "parallelism realized", || parallelism(&copy));
    tally.run(9, "threshold monotonicity", || threshold_monotonicity(&reverse.model, &reverse_prompts));
    tally.run(10, "single-slot cache-mode equivalence", || {
        cache_mode_equivalence(&[("copy", &copy.model, &copy_prompts), ("reverse", &reverse.model, &reverse_prompts)])
    });
    tally.run(11, "locality probe", || locality(&modsum));
    tally.run(12, "determinism", determinism);

    if tally.failed == 0 {
        println!("all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{} criteria failed", tally.failed);
        ExitCode::FAILURE
    }
}
