use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub(crate) const TOK_EMBED: usize = 0;
const PER_LAYER: usize = 8;

/// Offsets of one layer's tensors inside [`Parameters`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerSlots {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub mlp_norm: usize,
    pub w_up: usize,
    pub w_down: usize,
}

pub(crate) fn layer_slots(layer: usize) -> LayerSlots {
    let base = 1 + PER_LAYER * layer;
    LayerSlots {
        attn_norm: base,
        wq: base + 1,
        wk: base + 2,
        wv: base + 3,
        wo: base + 4,
        mlp_norm: base + 5,
        w_up: base + 6,
        w_down: base + 7,
    }
}

pub(crate) fn final_norm_slot(cfg: &ModelConfig) -> usize {
    1 + PER_LAYER * cfg.n_layers
}

pub(crate) fn lm_head_slot(cfg: &ModelConfig) -> usize {
    2 + PER_LAYER * cfg.n_layers
}

/// Named model tensors. Projection matrices are stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Parameters<T> {
    /// Tensors in canonical order, all zero.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.d_ff);
        let mut tensors = vec![Tensor::zeros("tok_embed", vec![v, d])];
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            tensors.push(Tensor::zeros(p("attn_norm"), vec![d]));
            tensors.push(Tensor::zeros(p("wq"), vec![d, d]));
            tensors.push(Tensor::zeros(p("wk"), vec![d, d]));
            tensors.push(Tensor::zeros(p("wv"), vec![d, d]));
            tensors.push(Tensor::zeros(p("wo"), vec![d, d]));
            tensors.push(Tensor::zeros(p("mlp_norm"), vec![d]));
            tensors.push(Tensor::zeros(p("w_up"), vec![d, f]));
            tensors.push(Tensor::zeros(p("w_down"), vec![f, d]));
        }
        tensors.push(Tensor::zeros("final_norm", vec![d]));
        tensors.push(Tensor::zeros("lm_head", vec![d, v]));
        Self { tensors }
    }

    /// GPT-2 style initialisation: N(0, 0.02) weights, residual output
    /// projections scaled by 1/sqrt(2·n_layers), unit norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut params = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Normal::new(0.0, 0.02).expect("valid std");
        let resid = Normal::new(0.0, 0.02 / (2.0 * cfg.n_layers as f64).sqrt()).expect("valid std");
        for t in &mut params.tensors {
            if t.shape.len() == 1 {
                t.data.iter_mut().for_each(|x| *x = T::one());
                continue;
            }
            let dist = if t.name.ends_with(".wo") || t.name.ends_with(".w_down") {
                &resid
            } else {
                &base
            };
            for x in &mut t.data {
                *x = T::from_f64(dist.sample(&mut rng));
            }
        }
        params
    }

    pub fn from_tensors(tensors: Vec<Tensor<T>>) -> Self {
        Self { tensors }
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub(crate) fn data(&self, slot: usize) -> &[T] {
        &self.tensors[slot].data
    }

    pub(crate) fn data_mut(&mut self, slot: usize) -> &mut [T] {
        &mut self.tensors[slot].data
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    /// Converts every tensor to another element type.
    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|x| U::from_f64(x.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Shapes expected for `cfg`, compared name by name.
    pub fn matches_config(&self, cfg: &ModelConfig) -> std::result::Result<(), String> {
        let want = Parameters::<T>::zeros(cfg);
        if want.tensors.len() != self.tensors.len() {
            return Err(format!(
                "expected {} tensors, found {}",
                want.tensors.len(),
                self.tensors.len()
            ));
        }
        for (w, t) in want.tensors.iter().zip(&self.tensors) {
            if w.name != t.name || w.shape != t.shape {
                return Err(format!(
                    "tensor {} has shape {:?}, config implies {} {:?}",
                    t.name, t.shape, w.name, w.shape
                ));
            }
        }
        Ok(())
    }
}
