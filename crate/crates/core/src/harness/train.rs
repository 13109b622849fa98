use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::backbone::{train_step, Model, OptimizerState, TokenBuffer};
use crate::error::{Error, Result};
use crate::objective::HybridObjective;
use crate::scalar::Scalar;
use crate::slotting::{sample_instance, CorruptionTokens, Sample};

/// Per-step training losses (batch means).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: u64,
    pub arm: f64,
    pub mdm: f64,
    pub total: f64,
}

/// Seeds derived from the run seed, one per consumer.
#[derive(Clone, Copy, Debug)]
pub struct Seeds {
    pub train_corpus: u64,
    pub eval_corpus: u64,
    pub init: u64,
    pub batches: u64,
}

impl Seeds {
    pub fn from_run(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            train_corpus: rng.random(),
            eval_corpus: rng.random(),
            init: rng.random(),
            batches: rng.random(),
        }
    }
}

/// One corrupted training batch drawn from `corpus`. With probability
/// `prefix_rate` a sample's response is cut at a uniform point and the part
/// before the cut joins the prompt as clean context.
pub fn draw_batch<R: Rng>(
    cfg: &RunConfig,
    corpus: &[Sample],
    rng: &mut R,
) -> Result<Vec<(TokenBuffer, HybridObjective)>> {
    let special = CorruptionTokens {
        mask_id: cfg.model.mask_id,
        pad_id: cfg.model.pad_id,
    };
    (0..cfg.batch_size)
        .map(|_| {
            let s = &corpus[rng.random_range(0..corpus.len())];
            let mut response = s.response.clone();
            response.push(cfg.model.eos_id);
            let cut = if rng.random_bool(cfg.prefix_rate) {
                rng.random_range(0..response.len())
            } else {
                0
            };
            let mut context = s.prompt.clone();
            context.extend_from_slice(&response[..cut]);
            let inst = sample_instance(&context, &response[cut..], &cfg.slot_sizes, special, rng)?;
            let obj = HybridObjective::new(&inst, cfg.lambda)?;
            Ok((inst.buffer, obj))
        })
        .collect()
}

/// Runs `cfg.steps` optimizer steps, calling `on_step` after each.
pub fn train<T: Scalar>(
    cfg: &RunConfig,
    corpus: &[Sample],
    model: &mut Model<T>,
    optimizer: &mut OptimizerState<T>,
    mut on_step: impl FnMut(&LossRow),
) -> Result<Vec<LossRow>> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(Seeds::from_run(cfg.seed).batches);
    let mut log = Vec::with_capacity(cfg.steps as usize);
    for _ in 0..cfg.steps {
        let batch = draw_batch(cfg, corpus, &mut rng)?;
        let out = train_step(model, optimizer, &cfg.optimizer, &batch)?;
        let row = LossRow {
            step: out.step,
            arm: out.loss.parts[0],
            mdm: out.loss.parts[1],
            total: out.loss.total,
        };
        on_step(&row);
        log.push(row);
    }
    Ok(log)
}

pub fn write_loss_csv<W: Write>(rows: &[LossRow], mut out: W) -> Result<()> {
    writeln!(out, "step,arm,mdm,total")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.step, r.arm, r.mdm, r.total)?;
    }
    Ok(())
}
