use std::collections::HashSet;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-layer rotated keys and values, stored in physical append order.
///
/// Each layer holds `[len, n_heads, head_dim]` flattened row-major; rows
/// align index-for-index with `positions`. Appending never touches existing
/// rows.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache<T: Scalar> {
    width: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    positions: Vec<usize>,
    position_set: HashSet<usize>,
}

impl<T: Scalar> KvCache<T> {
    /// Empty cache for `n_layers` layers of row width `width` (= d_model).
    pub fn new(n_layers: usize, width: usize) -> Self {
        Self {
            width,
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
            positions: Vec::new(),
            position_set: HashSet::new(),
        }
    }

    pub(crate) fn from_parts(
        width: usize,
        keys: Vec<Vec<T>>,
        values: Vec<Vec<T>>,
        positions: Vec<usize>,
    ) -> Self {
        debug_assert!(keys.iter().all(|k| k.len() == positions.len() * width));
        let position_set = positions.iter().copied().collect();
        Self {
            width,
            keys,
            values,
            positions,
            position_set,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn contains_position(&self, position: usize) -> bool {
        self.position_set.contains(&position)
    }

    pub fn keys(&self, layer: usize) -> &[T] {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &[T] {
        &self.values[layer]
    }

    /// Appends every entry of `other` after the existing ones.
    pub fn append(&mut self, other: &KvCache<T>) -> Result<()> {
        if other.n_layers() != self.n_layers() || other.width != self.width {
            return Err(Error::Shape(format!(
                "cannot append cache with {} layers x {} to {} layers x {}",
                other.n_layers(),
                other.width,
                self.n_layers(),
                self.width
            )));
        }
        let mut seen = HashSet::with_capacity(other.len());
        for &p in &other.positions {
            if self.position_set.contains(&p) || !seen.insert(p) {
                return Err(Error::PositionCollision(p));
            }
        }
        for l in 0..self.n_layers() {
            self.keys[l].extend_from_slice(&other.keys[l]);
            self.values[l].extend_from_slice(&other.values[l]);
        }
        self.positions.extend_from_slice(&other.positions);
        self.position_set.extend(other.positions.iter().copied());
        Ok(())
    }

    /// Copy of the entries in `rows`.
    pub fn slice(&self, rows: Range<usize>) -> KvCache<T> {
        let w = self.width;
        let span = rows.start * w..rows.end * w;
        KvCache::from_parts(
            w,
            self.keys.iter().map(|k| k[span.clone()].to_vec()).collect(),
            self.values.iter().map(|v| v[span.clone()].to_vec()).collect(),
            self.positions[rows].to_vec(),
        )
    }

    /// Copy with entries rearranged so that row `i` is old row `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<KvCache<T>> {
        let mut check: Vec<usize> = order.to_vec();
        check.sort_unstable();
        if check != (0..self.len()).collect::<Vec<_>>() {
            return Err(Error::Argument("order is not a permutation of the cache rows".into()));
        }
        let w = self.width;
        let gather = |src: &Vec<T>| {
            let mut out = Vec::with_capacity(src.len());
            for &r in order {
                out.extend_from_slice(&src[r * w..(r + 1) * w]);
            }
            out
        };
        Ok(KvCache::from_parts(
            w,
            self.keys.iter().map(gather).collect(),
            self.values.iter().map(gather).collect(),
            order.iter().map(|&r| self.positions[r]).collect(),
        ))
    }

    /// Largest elementwise difference between two caches of equal shape.
    pub fn max_abs_diff(&self, other: &KvCache<T>) -> Option<f64> {
        if self.positions != other.positions || self.n_layers() != other.n_layers() {
            return None;
        }
        let mut worst = 0.0f64;
        for l in 0..self.n_layers() {
            for (a, b) in self.keys[l].iter().zip(&other.keys[l]) {
                worst = worst.max((a.as_f64() - b.as_f64()).abs());
            }
            for (a, b) in self.values[l].iter().zip(&other.values[l]) {
                worst = worst.max((a.as_f64() - b.as_f64()).abs());
            }
        }
        Some(worst)
    }
}
