// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model shape and weight containers.
//!
//! All matrices use the row-vector convention: a hidden state `x` of width
//! `D` is projected as `x · W`, so `W_Q`, `W_K`, `W_V` and `W_O` are `D×D`,
//! the MLP is `D×4D` then `4D×D`, and the output head is `D×vocab`.
//! Projections carry no bias terms.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{PtiError, Result};

/// MLP expansion factor.
pub const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rng_seed: u64,
    /// Disables layer-norm, MLP, positional addition and the attention
    /// output projection so hand-computed examples hold exactly.
    pub test_mode: bool,
}

impl ModelConfig {
    /// Builds a config with `hidden_dim = num_heads * head_dim`.
    pub fn new(
        num_layers: usize,
        num_heads: usize,
        head_dim: usize,
        vocab_size: usize,
        max_seq_len: usize,
        rng_seed: u64,
    ) -> Result<Self> {
        let cfg = Self {
            num_layers,
            num_heads,
            head_dim,
            hidden_dim: num_heads * head_dim,
            vocab_size,
            max_seq_len,
            rng_seed,
            test_mode: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    #[must_use]
    pub fn with_test_mode(mut self, on: bool) -> Self {
        self.test_mode = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.head_dim == 0 {
            return Err(PtiError::InvalidConfig(
                "num_layers, num_heads and head_dim must be positive".into(),
            ));
        }
        if self.hidden_dim != self.num_heads * self.head_dim {
            return Err(PtiError::InvalidConfig(format!(
                "hidden_dim {} != num_heads {} x head_dim {}",
                self.hidden_dim, self.num_heads, self.head_dim
            )));
        }
        if self.max_seq_len < 1 {
            return Err(PtiError::InvalidConfig("max_seq_len must be >= 1".into()));
        }
        if self.vocab_size < 2 {
            return Err(PtiError::InvalidConfig("vocab_size must be >= 2".into()));
        }
        Ok(())
    }

    pub fn mlp_dim(&self) -> usize {
        self.hidden_dim * MLP_RATIO
    }
}

/// Per-layer projection matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub mlp_in: Array2<f64>,
    pub mlp_out: Array2<f64>,
}

/// Raw tensors, freely editable before being sealed into [`Weights`].
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensors {
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub output_head: Array2<f64>,
}

impl WeightTensors {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.hidden_dim;
        let layer = LayerWeights {
            w_q: Array2::zeros((d, d)),
            w_k: Array2::zeros((d, d)),
            w_v: Array2::zeros((d, d)),
            w_o: Array2::zeros((d, d)),
            mlp_in: Array2::zeros((d, cfg.mlp_dim())),
            mlp_out: Array2::zeros((cfg.mlp_dim(), d)),
        };
        Self {
            token_embedding: Array2::zeros((cfg.vocab_size, d)),
            position_embedding: Array2::zeros((cfg.max_seq_len, d)),
            layers: vec![layer; cfg.num_layers],
            output_head: Array2::zeros((d, cfg.vocab_size)),
        }
    }

    /// Seeded Gaussian initialisation. Every value is rounded through `f32`
    /// so a save/load cycle through the weights file is lossless.
    pub fn random(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let d = cfg.hidden_dim;
        let mut draw = |rows: usize, cols: usize, std: f64| -> Array2<f64> {
            let normal = Normal::new(0.0, std).expect("std is positive");
            Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut rng) as f32 as f64)
        };
        let proj_std = 1.0 / (d as f64).sqrt();
        let token_embedding = draw(cfg.vocab_size, d, 1.0);
        let position_embedding = draw(cfg.max_seq_len, d, 0.1);
        let layers = (0..cfg.num_layers)
            .map(|_| LayerWeights {
                w_q: draw(d, d, proj_std),
                w_k: draw(d, d, proj_std),
                w_v: draw(d, d, proj_std),
                w_o: draw(d, d, proj_std),
                mlp_in: draw(d, cfg.mlp_dim(), proj_std),
                mlp_out: draw(cfg.mlp_dim(), d, 1.0 / (cfg.mlp_dim() as f64).sqrt()),
            })
            .collect();
        let output_head = draw(d, cfg.vocab_size, proj_std);
        Self {
            token_embedding,
            position_embedding,
            layers,
            output_head,
        }
    }

    /// Tensors in the order they are laid out in the weights file.
    pub fn in_file_order(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.w_q"), &layer.w_q));
            out.push((format!("layers.{l}.w_k"), &layer.w_k));
            out.push((format!("layers.{l}.w_v"), &layer.w_v));
            out.push((format!("layers.{l}.w_o"), &layer.w_o));
            out.push((format!("layers.{l}.mlp_in"), &layer.mlp_in));
            out.push((format!("layers.{l}.mlp_out"), &layer.mlp_out));
        }
        out.push(("output_head".to_string(), &self.output_head));
        out
    }

    fn expected_shapes(cfg: &ModelConfig) -> Vec<(usize, usize)> {
        let d = cfg.hidden_dim;
        let mut shapes = vec![(cfg.vocab_size, d), (cfg.max_seq_len, d)];
        for _ in 0..cfg.num_layers {
            shapes.extend([
                (d, d),
                (d, d),
                (d, d),
                (d, d),
                (d, cfg.mlp_dim()),
                (cfg.mlp_dim(), d),
            ]);
        }
        shapes.push((d, cfg.vocab_size));
        shapes
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layers.len() != cfg.num_layers {
            return Err(PtiError::Shape(format!(
                "expected {} layers, found {}",
                cfg.num_layers,
                self.layers.len()
            )));
        }
        let expected = Self::expected_shapes(cfg);
        for ((name, tensor), shape) in self.in_file_order().into_iter().zip(expected) {
            if tensor.dim() != shape {
                return Err(PtiError::Shape(format!(
                    "{name}: expected {shape:?}, found {:?}",
                    tensor.dim()
                )));
            }
            if tensor.iter().any(|v| !v.is_finite()) {
                return Err(PtiError::NonFinite(name));
            }
        }
        Ok(())
    }
}

/// Validated, immutable model weights. Shareable read-only across sessions.
#[derive(Debug, Clone)]
pub struct Weights {
    config: ModelConfig,
    tensors: WeightTensors,
    fingerprint: String,
}

impl Weights {
    pub fn new(config: ModelConfig, tensors: WeightTensors) -> Result<Self> {
        config.validate()?;
        tensors.check(&config)?;
        let fingerprint = fingerprint_of(&config, &tensors);
        Ok(Self {
            config,
            tensors,
            fingerprint,
        })
    }

    pub fn random(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = WeightTensors::random(&config);
        Self::new(config, tensors)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &WeightTensors {
        &self.tensors
    }

    pub fn into_tensors(self) -> WeightTensors {
        self.tensors
    }

    /// Hex digest over the shape header and the `f32` body. Directions carry
    /// it so they cannot be applied to a different model.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Embedding row for a token id.
    pub fn token_embedding(&self, token: u32) -> Result<Vec<f64>> {
        let idx = token as usize;
        if idx >= self.config.vocab_size {
            return Err(PtiError::InvalidIndices(format!(
                "token {token} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(self.tensors.token_embedding.row(idx).to_vec())
    }
}

fn fingerprint_of(cfg: &ModelConfig, tensors: &WeightTensors) -> String {
    let mut hasher = Sha256::new();
    for v in [
        cfg.num_layers,
        cfg.num_heads,
        cfg.head_dim,
        cfg.hidden_dim,
        cfg.vocab_size,
        cfg.max_seq_len,
    ] {
        hasher.update((v as u32).to_le_bytes());
    }
    hasher.update([u8::from(cfg.test_mode)]);
    for (_, tensor) in tensors.in_file_order() {
        for v in tensor.iter() {
            hasher.update((*v as f32).to_le_bytes());
        }
    }
    hex::encode(&hasher.finalize()[..16])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hidden_dim_is_heads_times_head_dim() {
        let cfg = ModelConfig::new(2, 3, 4, 16, 8, 0).unwrap();
        assert_eq!(cfg.hidden_dim, 12);
    }

    #[test]
    fn rejects_degenerate_shapes() {
        assert!(ModelConfig::new(0, 1, 1, 4, 4, 0).is_err());
        assert!(ModelConfig::new(1, 1, 1, 1, 4, 0).is_err());
        assert!(ModelConfig::new(1, 1, 1, 4, 0, 0).is_err());
        let mut cfg = ModelConfig::new(1, 2, 2, 4, 4, 0).unwrap();
        cfg.hidden_dim = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn random_weights_are_seeded() {
        let cfg = ModelConfig::new(2, 2, 4, 32, 16, 42).unwrap();
        let a = Weights::random(cfg.clone()).unwrap();
        let b = Weights::random(cfg.clone()).unwrap();
        assert_eq!(a.tensors(), b.tensors());
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = Weights::random(ModelConfig { rng_seed: 43, ..cfg }).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn rejects_bad_shapes_and_nan() {
        let cfg = ModelConfig::new(1, 1, 2, 4, 4, 0).unwrap();
        let mut t = WeightTensors::zeros(&cfg);
        t.layers[0].w_k = Array2::zeros((2, 3));
        assert!(matches!(Weights::new(cfg.clone(), t), Err(PtiError::Shape(_))));

        let mut t = WeightTensors::zeros(&cfg);
        t.output_head[[0, 0]] = f64::NAN;
        assert!(matches!(Weights::new(cfg, t), Err(PtiError::NonFinite(_))));
    }
}
