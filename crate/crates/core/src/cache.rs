// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-layer key/value cache.
//!
//! Logically each layer holds `N_h × n × d_h` keys and values. Storage is
//! position-major (`[pos][head][d_h]`) so appending a decoded token is a
//! plain `extend`.

use crate::error::{Modality, PtiError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    num_heads: usize,
    head_dim: usize,
    len: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
}

impl LayerCache {
    pub fn with_capacity(num_heads: usize, head_dim: usize, capacity: usize) -> Self {
        let width = num_heads * head_dim;
        Self {
            num_heads,
            head_dim,
            len: 0,
            keys: Vec::with_capacity(capacity * width),
            values: Vec::with_capacity(capacity * width),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Appends one position; `key` and `value` are full `D`-wide rows.
    pub fn push(&mut self, key: &[f64], value: &[f64]) {
        let width = self.num_heads * self.head_dim;
        debug_assert_eq!(key.len(), width);
        debug_assert_eq!(value.len(), width);
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        self.len += 1;
    }

    fn offset(&self, head: usize, pos: usize) -> usize {
        debug_assert!(head < self.num_heads && pos < self.len);
        (pos * self.num_heads + head) * self.head_dim
    }

    pub fn key(&self, head: usize, pos: usize) -> &[f64] {
        let o = self.offset(head, pos);
        &self.keys[o..o + self.head_dim]
    }

    pub fn value(&self, head: usize, pos: usize) -> &[f64] {
        let o = self.offset(head, pos);
        &self.values[o..o + self.head_dim]
    }

    pub fn key_mut(&mut self, head: usize, pos: usize) -> &mut [f64] {
        let o = self.offset(head, pos);
        &mut self.keys[o..o + self.head_dim]
    }

    pub fn value_mut(&mut self, head: usize, pos: usize) -> &mut [f64] {
        let o = self.offset(head, pos);
        &mut self.values[o..o + self.head_dim]
    }

    /// Full `D`-wide key row of a position (all heads concatenated).
    pub fn key_row(&self, pos: usize) -> &[f64] {
        let w = self.num_heads * self.head_dim;
        &self.keys[pos * w..(pos + 1) * w]
    }

    pub fn value_row(&self, pos: usize) -> &[f64] {
        let w = self.num_heads * self.head_dim;
        &self.values[pos * w..(pos + 1) * w]
    }

    pub(crate) fn raw_keys(&self) -> &[f64] {
        &self.keys
    }

    pub(crate) fn raw_values(&self) -> &[f64] {
        &self.values
    }
}

/// Which modalities have already been steered on this cache.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AppliedInterventions {
    pub visual: bool,
    pub textual: bool,
}

impl AppliedInterventions {
    pub fn contains(&self, m: Modality) -> bool {
        match m {
            Modality::Visual => self.visual,
            Modality::Textual => self.textual,
        }
    }

    pub(crate) fn mark(&mut self, m: Modality) {
        match m {
            Modality::Visual => self.visual = true,
            Modality::Textual => self.textual = true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KVCache {
    layers: Vec<LayerCache>,
    origin_length: usize,
    max_len: usize,
    model_fingerprint: String,
    applied: AppliedInterventions,
}

impl KVCache {
    pub(crate) fn new(
        num_layers: usize,
        num_heads: usize,
        head_dim: usize,
        max_len: usize,
        model_fingerprint: String,
    ) -> Self {
        Self {
            layers: (0..num_layers)
                .map(|_| LayerCache::with_capacity(num_heads, head_dim, max_len))
                .collect(),
            origin_length: 0,
            max_len,
            model_fingerprint,
            applied: AppliedInterventions::default(),
        }
    }

    pub(crate) fn seal_origin(&mut self) {
        self.origin_length = self.len();
    }

    pub fn layers(&self) -> &[LayerCache] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &LayerCache {
        &self.layers[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut LayerCache {
        &mut self.layers[l]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Shared token count across layers.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, LayerCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Token count at the end of prefill.
    pub fn origin_length(&self) -> usize {
        self.origin_length
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn is_full(&self) -> bool {
        self.len() >= self.max_len
    }

    pub fn model_fingerprint(&self) -> &str {
        &self.model_fingerprint
    }

    pub fn applied(&self) -> AppliedInterventions {
        self.applied
    }

    pub(crate) fn mark_applied(&mut self, m: Modality) {
        self.applied.mark(m);
    }

    pub(crate) fn ensure_capacity(&self) -> Result<()> {
        if self.is_full() {
            Err(PtiError::CacheExhausted { max: self.max_len })
        } else {
            Ok(())
        }
    }

    /// Bitwise comparison of every cached number (`-0.0 != 0.0`, `NaN == NaN`
    /// with equal payload).
    pub fn bit_identical(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                bits_eq(a.raw_keys(), b.raw_keys()) && bits_eq(a.raw_values(), b.raw_values())
            })
    }

    /// Little-endian byte image of the cached tensors, layer by layer,
    /// keys then values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for v in layer.raw_keys().iter().chain(layer.raw_values()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

fn bits_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_slices_address_position_major_storage() {
        let mut layer = LayerCache::with_capacity(2, 3, 4);
        layer.push(&[1., 2., 3., 4., 5., 6.], &[0.; 6]);
        layer.push(&[7., 8., 9., 10., 11., 12.], &[1.; 6]);
        assert_eq!(layer.key(1, 0), &[4., 5., 6.]);
        assert_eq!(layer.key(0, 1), &[7., 8., 9.]);
        assert_eq!(layer.key_row(1), &[7., 8., 9., 10., 11., 12.]);
        layer.value_mut(1, 1)[2] = 5.0;
        assert_eq!(layer.value(1, 1), &[1., 1., 5.]);
        assert_eq!(layer.len(), 2);
    }

    #[test]
    fn bit_identity_distinguishes_signed_zero() {
        let mut a = KVCache::new(1, 1, 1, 4, "fp".into());
        a.layer_mut(0).push(&[0.0], &[1.0]);
        let mut b = a.clone();
        assert!(a.bit_identical(&b));
        b.layer_mut(0).key_mut(0, 0)[0] = -0.0;
        assert!(!a.bit_identical(&b));
        assert_eq!(a.to_bytes().len(), 16);
    }
}
