//! How far the effect of revealing one token reaches: Jensen-Shannon
//! divergence between predictions before and after a reveal, binned by
//! signed distance from the revealed position.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Model, TokenBuffer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::slotting::{corrupt, partition, CorruptionTokens, Role, Sample};

/// Distances beyond this are pooled into one tail bin per side.
pub const MAX_EXACT_DISTANCE: i64 = 16;

const NORM_TOL: f64 = 1e-6;

/// `JS(p, q)` in nats.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Argument(format!("distributions of length {} and {}", p.len(), q.len())));
    }
    for d in [p, q] {
        if d.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::Argument("negative or NaN probability".into()));
        }
        let sum: f64 = d.iter().sum();
        if (sum - 1.0).abs() > NORM_TOL {
            return Err(Error::Argument(format!("distribution sums to {sum}")));
        }
    }
    let kl_to_mid = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .filter(|(&x, _)| x > 0.0)
            .map(|(&x, &y)| x * (2.0 * x / (x + y)).ln())
            .sum()
    };
    let js = 0.5 * kl_to_mid(p, q) + 0.5 * kl_to_mid(q, p);
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

/// Folds a signed distance into its bin.
pub fn distance_bin(d: i64) -> i64 {
    d.clamp(-MAX_EXACT_DISTANCE - 1, MAX_EXACT_DISTANCE + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub mean_js: f64,
    pub n: usize,
}

/// Mean JS per signed distance at one masking ratio. Bins `±17` pool every
/// distance beyond 16.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalityCurve {
    pub t: f64,
    pub bins: BTreeMap<i64, Bin>,
}

impl LocalityCurve {
    /// Aggregates `(signed distance, js)` records. The result does not depend
    /// on record order.
    pub fn from_records(t: f64, records: &[(i64, f64)]) -> Self {
        let mut grouped: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
        for &(d, js) in records {
            grouped.entry(distance_bin(d)).or_default().push(js);
        }
        let bins = grouped
            .into_iter()
            .map(|(d, mut v)| {
                v.sort_by(f64::total_cmp);
                let n = v.len();
                (
                    d,
                    Bin {
                        mean_js: v.iter().sum::<f64>() / n as f64,
                        n,
                    },
                )
            })
            .collect();
        Self { t, bins }
    }

    /// Count-weighted mean over the bins whose distance satisfies `keep`.
    pub fn mean_where(&self, keep: impl Fn(i64) -> bool) -> Option<f64> {
        let (sum, n) = self
            .bins
            .iter()
            .filter(|(&d, _)| keep(d))
            .fold((0.0, 0), |(s, n), (_, b)| (s + b.mean_js * b.n as f64, n + b.n));
        (n > 0).then(|| sum / n as f64)
    }
}

/// One reveal experiment. Returns nothing when fewer than two positions end
/// up masked.
fn probe_once<T: Scalar, R: Rng>(model: &Model<T>, sample: &Sample, t: f64, rng: &mut R) -> Result<Vec<(i64, f64)>> {
    let cfg = model.config();
    let mut response = sample.response.clone();
    response.push(cfg.eos_id);
    let special = CorruptionTokens {
        mask_id: cfg.mask_id,
        pad_id: cfg.pad_id,
    };
    let inst = corrupt(&sample.prompt, &partition(&response, 1, cfg.pad_id)?, t, special, rng)?;
    let masked: Vec<usize> = (0..inst.roles.len())
        .filter(|&r| matches!(inst.roles[r], Role::Masked { .. }))
        .collect();
    if masked.len() < 2 {
        return Ok(Vec::new());
    }
    let &reveal = masked.choose(rng).expect("non-empty");
    let Role::Masked { truth } = inst.roles[reveal] else {
        unreachable!()
    };

    let first_masked = masked[0];
    let positions = inst.buffer.positions();
    let mut revealed = TokenBuffer::with_capacity(inst.buffer.len());
    for r in 0..first_masked {
        revealed.push(inst.buffer.tokens()[r], positions[r]);
    }
    revealed.push(truth, positions[reveal]);
    let mut rows_after = Vec::with_capacity(masked.len() - 1);
    for &r in &masked {
        if r != reveal {
            rows_after.push((r, revealed.len()));
            revealed.push(cfg.mask_id, positions[r]);
        }
    }
    let outs = model.forward_batch(&[inst.buffer.clone(), revealed], None)?;
    let (before, after) = (&outs[0].logits, &outs[1].logits);
    let mut records = Vec::with_capacity(rows_after.len());
    for (r, r_after) in rows_after {
        let js = js_divergence(&before.probs(r), &after.probs(r_after))?;
        records.push((positions[r] as i64 - positions[reveal] as i64, js));
    }
    Ok(records)
}

/// Runs `samples` reveal experiments per masking ratio. Draws that mask fewer
/// than two tokens are redrawn, up to a bounded number of attempts.
pub fn dependency_probe<T: Scalar>(
    model: &Model<T>,
    corpus: &[Sample],
    t_levels: &[f64],
    samples: usize,
    seed: u64,
) -> Result<Vec<LocalityCurve>> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut curves = Vec::with_capacity(t_levels.len());
    for (ti, &t) in t_levels.iter().enumerate() {
        let mut records = Vec::new();
        let mut taken = 0;
        let mut attempt = 0u64;
        let max_attempts = 20 * samples as u64 + 100;
        while taken < samples && attempt < max_attempts {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(ti as u64));
            rng.set_stream(attempt);
            attempt += 1;
            let sample = corpus.choose(&mut rng).expect("non-empty");
            let recs = probe_once(model, sample, t, &mut rng)?;
            if !recs.is_empty() {
                taken += 1;
                records.extend(recs);
            }
        }
        curves.push(LocalityCurve::from_records(t, &records));
    }
    Ok(curves)
}

/// CSV with header `t,signed_distance,mean_js,n`.
pub fn write_curves_csv<W: Write>(curves: &[LocalityCurve], mut out: W) -> Result<()> {
    writeln!(out, "t,signed_distance,mean_js,n")?;
    for c in curves {
        for (d, b) in &c.bins {
            writeln!(out, "{},{},{},{}", c.t, d, b.mean_js, b.n)?;
        }
    }
    Ok(())
}
