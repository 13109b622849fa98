//! Batched training forward pass with activation storage and the matching
//! hand-written backward pass.
//!
//! Sequences in a batch are ragged: their rows are concatenated and each
//! sequence attends causally to itself only, so no batch padding is needed.

use super::buffer::TokenBuffer;
use super::config::ModelConfig;
use super::model::{embed, log_softmax, softmax, Logits};
use super::ops::{self, AttnShape};
use super::params::{self, Parameters};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Loss value of one sequence with an optional breakdown into named parts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub parts: Vec<f64>,
}

/// A loss over one sequence's logits that can write its own gradient.
pub trait LossFn {
    /// `logits` is `rows × vocab`. When `grad` is given, `scale · dLoss/dlogits`
    /// is added to it.
    fn evaluate<T: Scalar>(
        &self,
        logits: &[T],
        vocab: usize,
        grad: Option<&mut [T]>,
        scale: f64,
    ) -> Result<LossReport>;
}

/// One weighted negative log-likelihood term: `row` should predict `target`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NllTerm {
    pub row: usize,
    pub target: u32,
    pub weight: f64,
}

/// Weighted sum of token NLL terms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenNll {
    pub terms: Vec<NllTerm>,
}

impl LossFn for TokenNll {
    fn evaluate<T: Scalar>(
        &self,
        logits: &[T],
        vocab: usize,
        grad: Option<&mut [T]>,
        scale: f64,
    ) -> Result<LossReport> {
        let total = weighted_nll(&self.terms, logits, vocab, grad, scale)?;
        Ok(LossReport {
            total,
            parts: Vec::new(),
        })
    }
}

/// Shared by every NLL-style loss.
pub fn weighted_nll<T: Scalar>(
    terms: &[NllTerm],
    logits: &[T],
    vocab: usize,
    mut grad: Option<&mut [T]>,
    scale: f64,
) -> Result<f64> {
    let rows = logits.len() / vocab;
    let mut total = 0.0;
    for term in terms {
        if term.row >= rows || term.target as usize >= vocab {
            return Err(Error::Shape(format!(
                "loss term (row {}, target {}) outside {rows}x{vocab} logits",
                term.row, term.target
            )));
        }
        let row = &logits[term.row * vocab..(term.row + 1) * vocab];
        total -= term.weight * log_softmax(row)[term.target as usize];
        if let Some(g) = grad.as_deref_mut() {
            let probs = softmax(row);
            let gr = &mut g[term.row * vocab..(term.row + 1) * vocab];
            let w = term.weight * scale;
            for (j, p) in probs.iter().enumerate() {
                let onehot = if j == term.target as usize { 1.0 } else { 0.0 };
                gr[j] += T::from_f64(w * (p - onehot));
            }
        }
    }
    Ok(total)
}

struct LayerActs<T> {
    x_in: Vec<T>,
    rstd1: Vec<T>,
    h1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<Vec<T>>,
    o: Vec<T>,
    x_mid: Vec<T>,
    rstd2: Vec<T>,
    h2: Vec<T>,
    u: Vec<T>,
    a: Vec<T>,
}

struct Acts<T> {
    layers: Vec<LayerActs<T>>,
    x_final: Vec<T>,
    rstdf: Vec<T>,
    hf: Vec<T>,
    logits: Vec<T>,
}

struct RaggedBatch {
    tokens: Vec<u32>,
    positions: Vec<usize>,
    offsets: Vec<usize>,
}

impl RaggedBatch {
    fn new(cfg: &ModelConfig, seqs: &[&TokenBuffer]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut offsets = vec![0];
        for s in seqs {
            s.validate(cfg)?;
            tokens.extend_from_slice(s.tokens());
            positions.extend_from_slice(s.positions());
            offsets.push(tokens.len());
        }
        Ok(Self {
            tokens,
            positions,
            offsets,
        })
    }

    fn rows(&self) -> usize {
        self.tokens.len()
    }

    fn seq(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    fn n_seqs(&self) -> usize {
        self.offsets.len() - 1
    }
}

fn forward_train<T: Scalar>(cfg: &ModelConfig, p: &Parameters<T>, batch: &RaggedBatch) -> Acts<T> {
    let (n, d, f, vocab) = (batch.rows(), cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let (nh, hd) = (cfg.n_heads, cfg.head_dim());
    let mut x = embed(p.data(params::TOK_EMBED), &batch.tokens, d);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let s = params::layer_slots(l);
        let mut rstd1 = vec![T::zero(); n];
        let mut h1 = vec![T::zero(); n * d];
        ops::rmsnorm_forward(&x, p.data(s.attn_norm), d, &mut h1, &mut rstd1);
        let mut q = vec![T::zero(); n * d];
        let mut k = vec![T::zero(); n * d];
        let mut v = vec![T::zero(); n * d];
        T::gemm(n, d, d, &h1, false, p.data(s.wq), false, &mut q, false);
        T::gemm(n, d, d, &h1, false, p.data(s.wk), false, &mut k, false);
        T::gemm(n, d, d, &h1, false, p.data(s.wv), false, &mut v, false);
        ops::rope_rotate(&mut q, &batch.positions, nh, hd, cfg.rope_base, false);
        ops::rope_rotate(&mut k, &batch.positions, nh, hd, cfg.rope_base, false);

        let mut o = vec![T::zero(); n * d];
        let mut probs = Vec::with_capacity(batch.n_seqs());
        for si in 0..batch.n_seqs() {
            let r = batch.seq(si);
            let len = r.len();
            let shape = AttnShape { ctx: 0, n: len, n_heads: nh, head_dim: hd };
            let cols = r.start * d..r.end * d;
            let mut pr = vec![T::zero(); nh * len * len];
            ops::attention_forward(
                shape,
                &q[cols.clone()],
                &[],
                &[],
                &k[cols.clone()],
                &v[cols.clone()],
                &mut o[cols],
                Some(&mut pr),
            );
            probs.push(pr);
        }
        let x_in = x.clone();
        T::gemm(n, d, d, &o, false, p.data(s.wo), false, &mut x, true);
        let x_mid = x.clone();

        let mut rstd2 = vec![T::zero(); n];
        let mut h2 = vec![T::zero(); n * d];
        ops::rmsnorm_forward(&x, p.data(s.mlp_norm), d, &mut h2, &mut rstd2);
        let mut u = vec![T::zero(); n * f];
        T::gemm(n, d, f, &h2, false, p.data(s.w_up), false, &mut u, false);
        let a: Vec<T> = u.iter().map(|&z| ops::gelu(z)).collect();
        T::gemm(n, f, d, &a, false, p.data(s.w_down), false, &mut x, true);

        layers.push(LayerActs {
            x_in,
            rstd1,
            h1,
            q,
            k,
            v,
            probs,
            o,
            x_mid,
            rstd2,
            h2,
            u,
            a,
        });
    }
    let mut rstdf = vec![T::zero(); n];
    let mut hf = vec![T::zero(); n * d];
    ops::rmsnorm_forward(&x, p.data(params::final_norm_slot(cfg)), d, &mut hf, &mut rstdf);
    let mut logits = vec![T::zero(); n * vocab];
    T::gemm(n, d, vocab, &hf, false, p.data(params::lm_head_slot(cfg)), false, &mut logits, false);
    Acts {
        layers,
        x_final: x,
        rstdf,
        hf,
        logits,
    }
}

fn backward<T: Scalar>(
    cfg: &ModelConfig,
    p: &Parameters<T>,
    batch: &RaggedBatch,
    acts: &Acts<T>,
    dlogits: &[T],
) -> Parameters<T> {
    let (n, d, f, vocab) = (batch.rows(), cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let (nh, hd) = (cfg.n_heads, cfg.head_dim());
    let mut g = p.zeros_like();

    let lm = params::lm_head_slot(cfg);
    T::gemm(d, n, vocab, &acts.hf, true, dlogits, false, g.data_mut(lm), true);
    let mut dhf = vec![T::zero(); n * d];
    T::gemm(n, vocab, d, dlogits, false, p.data(lm), true, &mut dhf, false);
    let mut dx = vec![T::zero(); n * d];
    let fnorm = params::final_norm_slot(cfg);
    ops::rmsnorm_backward(&dhf, &acts.x_final, p.data(fnorm), &acts.rstdf, d, &mut dx, g.data_mut(fnorm));

    let mut da = vec![T::zero(); n * f];
    let mut dh = vec![T::zero(); n * d];
    let mut dob = vec![T::zero(); n * d];
    for l in (0..cfg.n_layers).rev() {
        let s = params::layer_slots(l);
        let la = &acts.layers[l];

        // MLP block: x_out = x_mid + gelu(h2·W_up)·W_down
        T::gemm(n, d, f, &dx, false, p.data(s.w_down), true, &mut da, false);
        T::gemm(f, n, d, &la.a, true, &dx, false, g.data_mut(s.w_down), true);
        for (gz, &z) in da.iter_mut().zip(&la.u) {
            *gz *= ops::gelu_grad(z);
        }
        T::gemm(d, n, f, &la.h2, true, &da, false, g.data_mut(s.w_up), true);
        T::gemm(n, f, d, &da, false, p.data(s.w_up), true, &mut dh, false);
        let mut dx_mid = dx.clone();
        ops::rmsnorm_backward(&dh, &la.x_mid, p.data(s.mlp_norm), &la.rstd2, d, &mut dx_mid, g.data_mut(s.mlp_norm));

        // Attention block: x_mid = x_in + attn(h1)·W_o
        T::gemm(d, n, d, &la.o, true, &dx_mid, false, g.data_mut(s.wo), true);
        T::gemm(n, d, d, &dx_mid, false, p.data(s.wo), true, &mut dob, false);
        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        for si in 0..batch.n_seqs() {
            let r = batch.seq(si);
            let shape = AttnShape { ctx: 0, n: r.len(), n_heads: nh, head_dim: hd };
            let cols = r.start * d..r.end * d;
            ops::attention_backward(
                shape,
                &la.q[cols.clone()],
                &la.k[cols.clone()],
                &la.v[cols.clone()],
                &la.probs[si],
                &dob[cols.clone()],
                &mut dq[cols.clone()],
                &mut dk[cols.clone()],
                &mut dv[cols],
            );
        }
        ops::rope_rotate(&mut dq, &batch.positions, nh, hd, cfg.rope_base, true);
        ops::rope_rotate(&mut dk, &batch.positions, nh, hd, cfg.rope_base, true);
        T::gemm(d, n, d, &la.h1, true, &dq, false, g.data_mut(s.wq), true);
        T::gemm(d, n, d, &la.h1, true, &dk, false, g.data_mut(s.wk), true);
        T::gemm(d, n, d, &la.h1, true, &dv, false, g.data_mut(s.wv), true);
        T::gemm(n, d, d, &dq, false, p.data(s.wq), true, &mut dh, false);
        T::gemm(n, d, d, &dk, false, p.data(s.wk), true, &mut dh, true);
        T::gemm(n, d, d, &dv, false, p.data(s.wv), true, &mut dh, true);
        let mut dx_in = dx_mid;
        ops::rmsnorm_backward(&dh, &la.x_in, p.data(s.attn_norm), &la.rstd1, d, &mut dx_in, g.data_mut(s.attn_norm));
        dx = dx_in;
    }

    let emb = g.data_mut(params::TOK_EMBED);
    for (r, &t) in batch.tokens.iter().enumerate() {
        let t = t as usize;
        for (e, &v) in emb[t * d..(t + 1) * d].iter_mut().zip(&dx[r * d..(r + 1) * d]) {
            *e += v;
        }
    }
    g
}

/// Mean loss over a batch and its gradient.
#[derive(Clone, Debug)]
pub struct BatchGrad<T> {
    pub loss: LossReport,
    pub grads: Parameters<T>,
}

/// Mean of the per-sequence losses and the gradient of that mean.
pub fn loss_and_grad<T: Scalar, L: LossFn>(
    cfg: &ModelConfig,
    params: &Parameters<T>,
    batch: &[(TokenBuffer, L)],
) -> Result<BatchGrad<T>> {
    let seqs: Vec<&TokenBuffer> = batch.iter().map(|(b, _)| b).collect();
    let ragged = RaggedBatch::new(cfg, &seqs)?;
    let acts = forward_train(cfg, params, &ragged);
    let vocab = cfg.vocab_size;
    let scale = 1.0 / batch.len() as f64;
    let mut dlogits = vec![T::zero(); acts.logits.len()];
    let mut loss = LossReport::default();
    for (si, (_, loss_fn)) in batch.iter().enumerate() {
        let r = ragged.seq(si);
        let rows = r.start * vocab..r.end * vocab;
        let rep = loss_fn.evaluate(&acts.logits[rows.clone()], vocab, Some(&mut dlogits[rows]), scale)?;
        loss.total += rep.total * scale;
        if loss.parts.len() < rep.parts.len() {
            loss.parts.resize(rep.parts.len(), 0.0);
        }
        for (acc, part) in loss.parts.iter_mut().zip(&rep.parts) {
            *acc += part * scale;
        }
    }
    let grads = backward(cfg, params, &ragged, &acts, &dlogits);
    Ok(BatchGrad { loss, grads })
}

/// Mean batch loss without the backward pass.
pub fn batch_loss<T: Scalar, L: LossFn>(
    cfg: &ModelConfig,
    params: &Parameters<T>,
    batch: &[(TokenBuffer, L)],
) -> Result<LossReport> {
    let seqs: Vec<&TokenBuffer> = batch.iter().map(|(b, _)| b).collect();
    let logits = batch_logits(cfg, params, &seqs)?;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = LossReport::default();
    for ((_, loss_fn), lg) in batch.iter().zip(&logits) {
        let rep = loss_fn.evaluate(lg.data(), cfg.vocab_size, None, 1.0)?;
        loss.total += rep.total * scale;
        if loss.parts.len() < rep.parts.len() {
            loss.parts.resize(rep.parts.len(), 0.0);
        }
        for (acc, part) in loss.parts.iter_mut().zip(&rep.parts) {
            *acc += part * scale;
        }
    }
    Ok(loss)
}

/// Per-sequence logits from the training forward path.
pub fn batch_logits<T: Scalar>(
    cfg: &ModelConfig,
    params: &Parameters<T>,
    seqs: &[&TokenBuffer],
) -> Result<Vec<Logits<T>>> {
    let ragged = RaggedBatch::new(cfg, seqs)?;
    let acts = forward_train(cfg, params, &ragged);
    let vocab = cfg.vocab_size;
    (0..ragged.n_seqs())
        .map(|si| {
            let r = ragged.seq(si);
            Logits::new(r.len(), vocab, acts.logits[r.start * vocab..r.end * vocab].to_vec())
        })
        .collect()
}
