// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prefill-time KV-cache steering for a small multi-modal decoder.
//!
//! The pipeline:
//!
//! 1. [`decoder::prefill`] builds the per-layer key/value cache for a prompt
//!    whose positions are split into visual and textual tokens.
//! 2. [`directions`] distils per-layer key and value steering directions
//!    from object/background (visual) and anchor/context (textual)
//!    contrastive prompts.
//! 3. [`intervention::apply_pti`] adds the directions once to the cached
//!    rows of the matching modality.
//! 4. [`generate::generate`] decodes greedily, by beam search or by nucleus
//!    sampling, optionally recording last-token attention rows.
//!
//! [`analytics`] turns recorded attention into visual-attention and
//! object-centric scores, and [`eval`] holds hallucination metrics, a
//! synthetic grounding dataset and the latency bench.

pub mod analytics;
pub mod cache;
pub mod decoder;
pub mod directions;
pub mod error;
pub mod eval;
pub mod generate;
pub mod intervention;
pub mod model;
pub mod sequence;
pub mod trace;
pub mod weights_file;

pub use cache::{KVCache, LayerCache};
pub use decoder::{attention_oracle, decode_step, prefill, DecodeStep, Prefill};
pub use directions::SteeringDirections;
pub use error::{Modality, PtiError, Result};
pub use generate::{generate, Generation, Strategy, EOS_TOKEN};
pub use intervention::{apply_pti, InterventionConfig};
pub use model::{ModelConfig, WeightTensors, Weights};
pub use sequence::ModalitySegmentedSequence;
pub use trace::AttentionTrace;
