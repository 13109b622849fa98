use std::collections::BTreeMap;
use std::path::Path;

use super::config::RunConfig;
use super::eval::{evaluate, EvalReport};
use super::tasks::{gen_corpus, write_jsonl};
use super::train::{train, write_loss_csv, LossRow, Seeds};
use crate::atomic::write_atomic;
use crate::backbone::{save_checkpoint, Model, OptimizerState};
use crate::decoder::DecodeTrace;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::slotting::Sample;

/// Everything a run produces.
#[derive(Debug)]
pub struct RunOutput<T: Scalar> {
    pub train_corpus: Vec<Sample>,
    pub eval_corpus: Vec<Sample>,
    pub losses: Vec<LossRow>,
    pub model: Model<T>,
    pub optimizer: OptimizerState<T>,
    pub reports: Vec<EvalReport>,
    pub traces: BTreeMap<String, Vec<DecodeTrace>>,
}

/// Generates corpora, trains, and evaluates every configured decode setup.
pub fn run_pipeline<T: Scalar>(cfg: &RunConfig, on_step: impl FnMut(&LossRow)) -> Result<RunOutput<T>> {
    cfg.validate()?;
    let seeds = Seeds::from_run(cfg.seed);
    let train_corpus = gen_corpus(&cfg.task, &cfg.model, cfg.train_samples, seeds.train_corpus)?;
    let eval_corpus = gen_corpus(&cfg.task, &cfg.model, cfg.eval_samples, seeds.eval_corpus)?;
    let mut model = Model::<T>::init(cfg.model.clone(), seeds.init)?;
    let mut optimizer = OptimizerState::new(model.params());
    let losses = train(cfg, &train_corpus, &mut model, &mut optimizer, on_step)?;
    let mut reports = Vec::new();
    let mut traces = BTreeMap::new();
    if !eval_corpus.is_empty() {
        for (name, dc) in &cfg.decode {
            let (report, t) = evaluate(&model, &eval_corpus, name, dc)?;
            reports.push(report);
            traces.insert(name.clone(), t);
        }
    }
    Ok(RunOutput {
        train_corpus,
        eval_corpus,
        losses,
        model,
        optimizer,
        reports,
        traces,
    })
}

/// Layout of a run directory.
pub mod files {
    pub const CONFIG: &str = "config.json";
    pub const TRAIN_CORPUS: &str = "train.jsonl";
    pub const EVAL_CORPUS: &str = "eval.jsonl";
    pub const LOSS_LOG: &str = "loss.csv";
    pub const CHECKPOINT: &str = "checkpoint";
    pub const EVAL_DIR: &str = "eval";
}

fn to_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Writes a run's artifacts under `dir`, each file atomically.
pub fn write_run<T: Scalar>(cfg: &RunConfig, out: &RunOutput<T>, dir: &Path) -> Result<()> {
    write_atomic(&dir.join(files::CONFIG), serde_json::to_string_pretty(cfg)?.as_bytes())?;
    write_atomic(
        &dir.join(files::TRAIN_CORPUS),
        &to_bytes(|b| write_jsonl(&out.train_corpus, b))?,
    )?;
    write_atomic(
        &dir.join(files::EVAL_CORPUS),
        &to_bytes(|b| write_jsonl(&out.eval_corpus, b))?,
    )?;
    write_atomic(&dir.join(files::LOSS_LOG), &to_bytes(|b| write_loss_csv(&out.losses, b))?)?;
    save_checkpoint(out.model.params(), &out.optimizer, &cfg.model, dir.join(files::CHECKPOINT))?;
    for report in &out.reports {
        let path = dir.join(files::EVAL_DIR).join(format!("{}.json", report.preset));
        write_atomic(&path, serde_json::to_string_pretty(report)?.as_bytes())?;
    }
    Ok(())
}
