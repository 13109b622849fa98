use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};

use super::buffer::TokenBuffer;
use super::cache::KvCache;
use super::config::ModelConfig;
use super::ops::{self, AttnShape};
use super::params::{self, Parameters};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Pre-softmax scores, one row of `vocab` entries per buffer position.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits<T> {
    rows: usize,
    vocab: usize,
    data: Vec<T>,
}

impl<T: Scalar> Logits<T> {
    pub fn new(rows: usize, vocab: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * vocab {
            return Err(Error::Shape(format!(
                "{} logits for {rows} rows x {vocab} vocab",
                data.len()
            )));
        }
        Ok(Self { rows, vocab, data })
    }

    /// Every row the same constant, i.e. a uniform predictor.
    pub fn uniform(rows: usize, vocab: usize) -> Self {
        Self {
            rows,
            vocab,
            data: vec![T::zero(); rows * vocab],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }

    /// Softmax of row `i`, computed in f64.
    pub fn probs(&self, i: usize) -> Vec<f64> {
        softmax(self.row(i))
    }

    pub fn log_probs(&self, i: usize) -> Vec<f64> {
        log_softmax(self.row(i))
    }

    pub fn max_abs_diff(&self, other: &Logits<T>) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "logit shapes differ");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn softmax<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|x| (x.as_f64() - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

pub fn log_softmax<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x.as_f64() - lse).collect()
}

/// Logits for a buffer plus the key/value rows it produced.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T: Scalar> {
    pub logits: Logits<T>,
    pub kv: KvCache<T>,
}

/// A decoder-only transformer over explicit position IDs.
///
/// Attention is causal over physical buffer order; rotary embeddings use the
/// buffer's position IDs. Every call to one of the `forward*` methods bumps
/// [`Model::forward_count`] by one.
#[derive(Debug)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    params: Parameters<T>,
    forwards: AtomicU64,
}

impl<T: Scalar> Clone for Model<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            forwards: AtomicU64::new(self.forward_count()),
        }
    }
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, params: Parameters<T>) -> Result<Self> {
        config.validate()?;
        params.matches_config(&config).map_err(Error::ConfigMismatch)?;
        Ok(Self {
            config,
            params,
            forwards: AtomicU64::new(0),
        })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Parameters::init(&config, seed);
        Self::new(config, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Parameters<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters<T> {
        &mut self.params
    }

    pub fn into_params(self) -> Parameters<T> {
        self.params
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            forwards: AtomicU64::new(0),
        }
    }

    pub fn empty_cache(&self) -> KvCache<T> {
        KvCache::new(self.config.n_layers, self.config.d_model)
    }

    /// Number of forward invocations so far.
    pub fn forward_count(&self) -> u64 {
        self.forwards.load(Ordering::Relaxed)
    }

    /// Logits for `buffer` and the cache extended with its key/value rows.
    pub fn forward(
        &self,
        buffer: &TokenBuffer,
        cache: Option<&KvCache<T>>,
    ) -> Result<(Logits<T>, KvCache<T>)> {
        let out = self.forward_segment(buffer, cache)?;
        let mut extended = match cache {
            Some(c) => c.clone(),
            None => self.empty_cache(),
        };
        extended.append(&out.kv)?;
        Ok((out.logits, extended))
    }

    /// Like [`Model::forward`] but returns only the new key/value rows.
    pub fn forward_segment(
        &self,
        buffer: &TokenBuffer,
        cache: Option<&KvCache<T>>,
    ) -> Result<ForwardOutput<T>> {
        self.check(buffer, cache)?;
        self.forwards.fetch_add(1, Ordering::Relaxed);
        Ok(self.run(buffer, cache))
    }

    /// Several independent buffers over the same cache, counted as one
    /// forward pass. Segments never attend to each other.
    pub fn forward_batch(
        &self,
        buffers: &[TokenBuffer],
        cache: Option<&KvCache<T>>,
    ) -> Result<Vec<ForwardOutput<T>>> {
        if buffers.is_empty() {
            return Err(Error::EmptyInput);
        }
        for b in buffers {
            self.check(b, cache)?;
        }
        self.forwards.fetch_add(1, Ordering::Relaxed);
        Ok(buffers.iter().map(|b| self.run(b, cache)).collect())
    }

    fn check(&self, buffer: &TokenBuffer, cache: Option<&KvCache<T>>) -> Result<()> {
        buffer.validate(&self.config)?;
        let mut seen = HashSet::with_capacity(buffer.len());
        for &p in buffer.positions() {
            if !seen.insert(p) || cache.is_some_and(|c| c.contains_position(p)) {
                return Err(Error::PositionCollision(p));
            }
        }
        if let Some(c) = cache {
            if c.n_layers() != self.config.n_layers || c.width() != self.config.d_model {
                return Err(Error::Shape("cache does not match model shape".into()));
            }
        }
        Ok(())
    }

    fn run(&self, buffer: &TokenBuffer, cache: Option<&KvCache<T>>) -> ForwardOutput<T> {
        let cfg = &self.config;
        let p = &self.params;
        let (n, d, f, vocab) = (buffer.len(), cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let ctx = cache.map_or(0, KvCache::len);
        let shape = AttnShape {
            ctx,
            n,
            n_heads: cfg.n_heads,
            head_dim: cfg.head_dim(),
        };

        let mut x = embed(p.data(params::TOK_EMBED), buffer.tokens(), d);
        let mut h = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let mut q = vec![T::zero(); n * d];
        let mut o = vec![T::zero(); n * d];
        let mut u = vec![T::zero(); n * f];
        let mut keys = Vec::with_capacity(cfg.n_layers);
        let mut values = Vec::with_capacity(cfg.n_layers);

        for l in 0..cfg.n_layers {
            let s = params::layer_slots(l);
            ops::rmsnorm_forward(&x, p.data(s.attn_norm), d, &mut h, &mut rstd);
            let mut k = vec![T::zero(); n * d];
            let mut v = vec![T::zero(); n * d];
            T::gemm(n, d, d, &h, false, p.data(s.wq), false, &mut q, false);
            T::gemm(n, d, d, &h, false, p.data(s.wk), false, &mut k, false);
            T::gemm(n, d, d, &h, false, p.data(s.wv), false, &mut v, false);
            ops::rope_rotate(&mut q, buffer.positions(), cfg.n_heads, cfg.head_dim(), cfg.rope_base, false);
            ops::rope_rotate(&mut k, buffer.positions(), cfg.n_heads, cfg.head_dim(), cfg.rope_base, false);
            let (ck, cv): (&[T], &[T]) = match cache {
                Some(c) => (c.keys(l), c.values(l)),
                None => (&[], &[]),
            };
            ops::attention_forward(shape, &q, ck, cv, &k, &v, &mut o, None);
            T::gemm(n, d, d, &o, false, p.data(s.wo), false, &mut x, true);

            ops::rmsnorm_forward(&x, p.data(s.mlp_norm), d, &mut h, &mut rstd);
            T::gemm(n, d, f, &h, false, p.data(s.w_up), false, &mut u, false);
            u.iter_mut().for_each(|z| *z = ops::gelu(*z));
            T::gemm(n, f, d, &u, false, p.data(s.w_down), false, &mut x, true);

            keys.push(k);
            values.push(v);
        }

        ops::rmsnorm_forward(&x, p.data(params::final_norm_slot(cfg)), d, &mut h, &mut rstd);
        let mut logits = vec![T::zero(); n * vocab];
        T::gemm(n, d, vocab, &h, false, p.data(params::lm_head_slot(cfg)), false, &mut logits, false);

        ForwardOutput {
            logits: Logits {
                rows: n,
                vocab,
                data: logits,
            },
            kv: KvCache::from_parts(d, keys, values, buffer.positions().to_vec()),
        }
    }
}

pub(crate) fn embed<T: Scalar>(table: &[T], tokens: &[u32], d: usize) -> Vec<T> {
    let mut x = Vec::with_capacity(tokens.len() * d);
    for &t in tokens {
        let t = t as usize;
        x.extend_from_slice(&table[t * d..(t + 1) * d]);
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            max_position: 64,
            ..ModelConfig::desk_default(12)
        }
    }

    #[test]
    fn single_bos_gives_finite_logits() {
        let cfg = tiny_config();
        let model = Model::<f32>::init(cfg.clone(), 1).unwrap();
        let buf = TokenBuffer::contiguous(&[cfg.bos_id], 0);
        let (logits, cache) = model.forward(&buf, None).unwrap();
        assert_eq!(logits.rows(), 1);
        assert_eq!(logits.row(0).len(), cfg.vocab_size);
        assert!(logits.all_finite());
        assert_eq!(cache.len(), 1);
        assert_eq!(model.forward_count(), 1);
    }

    #[test]
    fn errors_on_empty_and_out_of_range() {
        let cfg = tiny_config();
        let model = Model::<f32>::init(cfg.clone(), 1).unwrap();
        assert!(matches!(
            model.forward(&TokenBuffer::default(), None),
            Err(Error::EmptyInput)
        ));
        let buf = TokenBuffer::new(vec![4], vec![64]).unwrap();
        assert!(matches!(
            model.forward(&buf, None),
            Err(Error::PositionOutOfRange { .. })
        ));
        assert_eq!(model.forward_count(), 0);
    }

    #[test]
    fn rejects_position_collision_with_cache() {
        let model = Model::<f32>::init(tiny_config(), 1).unwrap();
        let (_, cache) = model.forward(&TokenBuffer::contiguous(&[3, 4, 5], 0), None).unwrap();
        let clash = TokenBuffer::contiguous(&[6], 2);
        assert!(matches!(
            model.forward(&clash, Some(&cache)),
            Err(Error::PositionCollision(2))
        ));
        let dup = TokenBuffer::new(vec![6, 7], vec![9, 9]).unwrap();
        assert!(matches!(model.forward(&dup, None), Err(Error::PositionCollision(9))));
    }

    #[test]
    fn cached_suffix_matches_single_pass_exactly() {
        let model = Model::<f32>::init(tiny_config(), 7).unwrap();
        let buf = TokenBuffer::new(vec![3, 5, 8, 1, 1, 9, 4], vec![0, 1, 2, 6, 7, 3, 4]).unwrap();
        let (full, _) = model.forward(&buf, None).unwrap();
        for split in 1..buf.len() {
            let (pre, suf) = buf.split_at(split);
            let (_, cache) = model.forward(&pre, None).unwrap();
            let (tail, _) = model.forward(&suf, Some(&cache)).unwrap();
            for i in 0..suf.len() {
                assert_eq!(tail.row(i), full.row(split + i));
            }
        }
    }

    #[test]
    fn batch_counts_once_and_matches_individual_calls() {
        let model = Model::<f32>::init(tiny_config(), 2).unwrap();
        let (_, cache) = model.forward(&TokenBuffer::contiguous(&[3, 4], 0), None).unwrap();
        let a = TokenBuffer::contiguous(&[1, 1], 5);
        let b = TokenBuffer::contiguous(&[6, 7, 8], 5);
        let before = model.forward_count();
        let outs = model.forward_batch(&[a.clone(), b.clone()], Some(&cache)).unwrap();
        assert_eq!(model.forward_count(), before + 1);
        let solo = model.forward_segment(&b, Some(&cache)).unwrap();
        assert_eq!(outs[1].logits, solo.logits);
        assert_eq!(outs[0].logits.rows(), 2);
    }
}
