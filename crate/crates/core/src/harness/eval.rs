use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{Model, TokenId};
use crate::decoder::{decode, DecodeConfig, DecodeTrace};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::slotting::Sample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptResult {
    /// Decoded response without its EOS.
    pub response: Vec<TokenId>,
    pub expected: Vec<TokenId>,
    pub correct: bool,
    pub truncated: bool,
    pub forwards: u64,
    pub tokens: usize,
    pub tpf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub preset: String,
    pub config: DecodeConfig,
    pub accuracy: f64,
    /// Σ tokens / Σ forwards.
    pub tpf: f64,
    pub tokens_per_sec: f64,
    pub results: Vec<PromptResult>,
}

impl EvalReport {
    /// Exact-match accuracy recomputed from the stored responses.
    pub fn recomputed_accuracy(&self) -> f64 {
        accuracy(self.results.iter().map(|r| !r.truncated && r.response == r.expected))
    }
}

fn accuracy(correct: impl Iterator<Item = bool>) -> f64 {
    let (hits, n) = correct.fold((0usize, 0usize), |(h, n), c| (h + c as usize, n + 1));
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// Decodes every sample with `cfg` (batch size 1) and scores exact matches.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    samples: &[Sample],
    preset: &str,
    cfg: &DecodeConfig,
) -> Result<(EvalReport, Vec<DecodeTrace>)> {
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let start = Instant::now();
    let mut results = Vec::with_capacity(samples.len());
    let mut traces = Vec::with_capacity(samples.len());
    for s in samples {
        let out = decode(model, &s.prompt, cfg)?;
        let response = out.content().to_vec();
        results.push(PromptResult {
            correct: !out.truncated && response == s.response,
            response,
            expected: s.response.clone(),
            truncated: out.truncated,
            forwards: out.trace.forwards,
            tokens: out.trace.tokens_total,
            tpf: out.trace.tpf,
        });
        traces.push(out.trace);
    }
    let secs = start.elapsed().as_secs_f64();
    let tokens: usize = results.iter().map(|r| r.tokens).sum();
    let forwards: u64 = results.iter().map(|r| r.forwards).sum();
    Ok((
        EvalReport {
            preset: preset.to_string(),
            config: cfg.clone(),
            accuracy: accuracy(results.iter().map(|r| r.correct)),
            tpf: tokens as f64 / forwards as f64,
            tokens_per_sec: if secs > 0.0 { tokens as f64 / secs } else { 0.0 },
            results,
        },
        traces,
    ))
}

/// Axes of a decoding hyperparameter sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub tau_slot: Vec<f64>,
    pub tau_token: Vec<f64>,
    pub k: Vec<usize>,
    pub b: Vec<usize>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            tau_slot: vec![0.3, 0.6, 0.9],
            tau_token: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            k: vec![2, 4, 8],
            b: vec![8, 16],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau_slot: f64,
    pub tau_token: f64,
    pub k: usize,
    pub b: usize,
    pub accuracy: f64,
    pub tpf: f64,
    pub tokens_per_sec: f64,
}

/// Evaluates every valid grid cell; cells with `b` not a multiple of `k`
/// are skipped. `max_len` is rounded up to a multiple of each `b`.
pub fn sweep<T: Scalar>(
    model: &Model<T>,
    samples: &[Sample],
    base: &DecodeConfig,
    grid: &SweepGrid,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &tau_slot in &grid.tau_slot {
        for &tau_token in &grid.tau_token {
            for &k in &grid.k {
                for &b in &grid.b {
                    if k == 0 || b < k || b % k != 0 {
                        continue;
                    }
                    let cfg = DecodeConfig {
                        tau_slot,
                        tau_token,
                        k,
                        b,
                        max_len: base.max_len.div_ceil(b) * b,
                        ..base.clone()
                    };
                    let (report, _) = evaluate(model, samples, "sweep", &cfg)?;
                    rows.push(SweepRow {
                        tau_slot,
                        tau_token,
                        k,
                        b,
                        accuracy: report.accuracy,
                        tpf: report.tpf,
                        tokens_per_sec: report.tokens_per_sec,
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> Result<()> {
    writeln!(out, "tau_slot,tau_token,k,b,accuracy,tpf,tokens_per_sec")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.tau_slot, r.tau_token, r.k, r.b, r.accuracy, r.tpf, r.tokens_per_sec
        )?;
    }
    Ok(())
}
