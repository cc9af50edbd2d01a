// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded synthetic grounding task.
//!
//! Each sample hides a random unit "object" vector `u` in a few visual
//! tokens. Every other component of every visual row is noise orthogonal to
//! `u`, so the object rows are the only place the signal lives. The expected
//! answer is the token whose output-head column best matches `u`.
//! With `shared_fraction > 0` every `u` leans toward one common direction,
//! so object and background tokens differ the same way across samples.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::directions::{build_textual_contrast, build_visual_contrast, ContrastiveTextualPair, ContrastiveVisualPair, ObjectMask};
use crate::error::{PtiError, Result};
use crate::generate::EOS_TOKEN;
use crate::model::Weights;
use crate::sequence::{matrix_from_rows, rows_of, ModalitySegmentedSequence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthTaskConfig {
    pub num_samples: usize,
    pub visual_token_count: usize,
    pub object_fraction: f64,
    pub prompt_length: usize,
    pub signal_strength: f64,
    pub noise_scale: f64,
    pub rng_seed: u64,
    /// Share of each object vector's energy along one direction common to
    /// all samples. 0 draws every object vector independently.
    #[serde(default)]
    pub shared_fraction: f64,
}

impl Default for SynthTaskConfig {
    fn default() -> Self {
        Self {
            num_samples: 64,
            visual_token_count: 16,
            object_fraction: 0.25,
            prompt_length: 6,
            signal_strength: 3.0,
            noise_scale: 1.0,
            rng_seed: 0,
            shared_fraction: 0.0,
        }
    }
}

impl SynthTaskConfig {
    pub fn object_count(&self) -> usize {
        (self.object_fraction * self.visual_token_count as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(PtiError::InvalidConfig("num_samples must be at least 1".into()));
        }
        if !(self.object_fraction > 0.0 && self.object_fraction < 1.0) {
            return Err(PtiError::InvalidConfig(format!(
                "object_fraction {} outside (0, 1)",
                self.object_fraction
            )));
        }
        if self.object_count() < 1 {
            return Err(PtiError::InvalidConfig(format!(
                "object_fraction {} of {} visual tokens selects no object token",
                self.object_fraction, self.visual_token_count
            )));
        }
        if self.prompt_length == 0 {
            return Err(PtiError::InvalidConfig("prompt_length must be at least 1".into()));
        }
        for (name, v) in [("signal_strength", self.signal_strength), ("noise_scale", self.noise_scale)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(PtiError::InvalidConfig(format!("{name} {v} must be finite and non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.shared_fraction) {
            return Err(PtiError::InvalidConfig(format!(
                "shared_fraction {} outside [0, 1)",
                self.shared_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image_tokens: Array2<f64>,
    /// Shared question prompt.
    pub prompt_tokens: Array2<f64>,
    /// Prompt with the target token written at the anchor positions.
    pub caption_tokens: Array2<f64>,
    pub anchor_indices: Vec<usize>,
    pub mask: ObjectMask,
    /// Unit object vector `u`.
    pub object_signal: Array1<f64>,
    pub target_tokens: Vec<u32>,
    pub ground_truth: Vec<String>,
}

impl SynthSample {
    pub fn sequence(&self) -> Result<ModalitySegmentedSequence> {
        ModalitySegmentedSequence::from_segments(&self.image_tokens, &self.prompt_tokens)
    }

    pub fn visual_pair(&self) -> Result<ContrastiveVisualPair> {
        build_visual_contrast(&self.image_tokens, &self.mask, &self.prompt_tokens)
    }

    pub fn textual_pair(&self) -> Result<ContrastiveTextualPair> {
        build_textual_contrast(&self.caption_tokens, &self.anchor_indices, &self.image_tokens, &[])
    }
}

/// Object label used as ground truth for a token.
pub fn object_label(token: u32) -> String {
    format!("obj_{token}")
}

/// Builds the dataset. The model supplies the width, the prompt token
/// embeddings and the output head that defines each target token.
pub fn synth_grounding_dataset(weights: &Weights, cfg: &SynthTaskConfig) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    let mc = weights.config();
    let n = cfg.visual_token_count + cfg.prompt_length;
    if n > mc.max_seq_len {
        return Err(PtiError::SequenceTooLong {
            len: n,
            max: mc.max_seq_len,
        });
    }
    if mc.vocab_size < 2 {
        return Err(PtiError::InvalidConfig("synthetic targets need a vocabulary of at least 2".into()));
    }
    let d = mc.hidden_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);

    let prompt_ids: Vec<u32> = (0..cfg.prompt_length)
        .map(|_| rng.random_range(1..mc.vocab_size as u32))
        .collect();
    let mut prompt = Array2::zeros((cfg.prompt_length, d));
    for (r, id) in prompt_ids.iter().enumerate() {
        prompt.row_mut(r).assign(&Array1::from(weights.token_embedding(*id)?));
    }
    let mut anchors = vec![cfg.prompt_length / 2, cfg.prompt_length - 1];
    anchors.dedup();

    let common = unit_vector(&mut rng, d);
    let head = &weights.tensors().output_head;
    let k = cfg.object_count();
    let mut samples = Vec::with_capacity(cfg.num_samples);
    for _ in 0..cfg.num_samples {
        let own = unit_vector(&mut rng, d);
        let mut u = &own * (1.0 - cfg.shared_fraction).sqrt();
        u.scaled_add(cfg.shared_fraction.sqrt(), &common);
        let norm = u.dot(&u).sqrt();
        let u = if norm > 1e-12 { u / norm } else { own };
        let objects = rand::seq::index::sample(&mut rng, cfg.visual_token_count, k).into_vec();
        let mut mask = vec![0u8; cfg.visual_token_count];
        for &i in &objects {
            mask[i] = 1;
        }
        let mut image = Array2::zeros((cfg.visual_token_count, d));
        for (r, m) in mask.iter().enumerate() {
            let mut noise: Array1<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let along = noise.dot(&u);
            noise.scaled_add(-along, &u);
            let mut row = noise * cfg.noise_scale;
            if *m == 1 {
                row.scaled_add(cfg.signal_strength, &u);
            }
            image.row_mut(r).assign(&row);
        }
        let target = (0..mc.vocab_size)
            .filter(|&j| j as u32 != EOS_TOKEN)
            .map(|j| (j, u.dot(&head.column(j))))
            .fold((usize::MAX, f64::NEG_INFINITY), |best, (j, s)| if s > best.1 { (j, s) } else { best })
            .0 as u32;
        let mut caption = prompt.clone();
        let target_embedding = Array1::from(weights.token_embedding(target)?);
        for &a in &anchors {
            caption.row_mut(a).assign(&target_embedding);
        }
        samples.push(SynthSample {
            image_tokens: image,
            prompt_tokens: prompt.clone(),
            caption_tokens: caption,
            anchor_indices: anchors.clone(),
            mask: ObjectMask::new(mask)?,
            object_signal: u,
            target_tokens: vec![target],
            ground_truth: vec![object_label(target)],
        });
    }
    Ok(samples)
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// On-disk form of a generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthDataset {
    pub config: SynthTaskConfig,
    pub model_fingerprint: String,
    pub samples: Vec<SynthSampleDocument>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSampleDocument {
    pub image_tokens: Vec<Vec<f64>>,
    pub prompt_tokens: Vec<Vec<f64>>,
    pub caption_tokens: Vec<Vec<f64>>,
    pub anchor_indices: Vec<usize>,
    pub mask: ObjectMask,
    pub object_signal: Vec<f64>,
    pub target_tokens: Vec<u32>,
    pub ground_truth: Vec<String>,
}

impl SynthDataset {
    pub fn new(weights: &Weights, config: SynthTaskConfig, samples: &[SynthSample]) -> Self {
        Self {
            config,
            model_fingerprint: weights.fingerprint().to_owned(),
            samples: samples
                .iter()
                .map(|s| SynthSampleDocument {
                    image_tokens: rows_of(&s.image_tokens),
                    prompt_tokens: rows_of(&s.prompt_tokens),
                    caption_tokens: rows_of(&s.caption_tokens),
                    anchor_indices: s.anchor_indices.clone(),
                    mask: s.mask.clone(),
                    object_signal: s.object_signal.to_vec(),
                    target_tokens: s.target_tokens.clone(),
                    ground_truth: s.ground_truth.clone(),
                })
                .collect(),
        }
    }

    pub fn to_samples(&self) -> Result<Vec<SynthSample>> {
        self.samples
            .iter()
            .map(|s| {
                Ok(SynthSample {
                    image_tokens: matrix_from_rows(&s.image_tokens)?,
                    prompt_tokens: matrix_from_rows(&s.prompt_tokens)?,
                    caption_tokens: matrix_from_rows(&s.caption_tokens)?,
                    anchor_indices: s.anchor_indices.clone(),
                    mask: s.mask.clone(),
                    object_signal: Array1::from(s.object_signal.clone()),
                    target_tokens: s.target_tokens.clone(),
                    ground_truth: s.ground_truth.clone(),
                })
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> Weights {
        Weights::random(ModelConfig::new(1, 2, 4, 32, 32, 3).unwrap()).unwrap()
    }

    #[test]
    fn same_seed_same_dataset() {
        let w = model();
        let cfg = SynthTaskConfig {
            num_samples: 5,
            ..SynthTaskConfig::default()
        };
        let a = synth_grounding_dataset(&w, &cfg).unwrap();
        let b = synth_grounding_dataset(&w, &cfg).unwrap();
        assert_eq!(a, b);
        let c = synth_grounding_dataset(&w, &SynthTaskConfig { rng_seed: 1, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn shared_fraction_aligns_object_vectors() {
        let w = model();
        let mean_cos = |rho: f64| {
            let cfg = SynthTaskConfig {
                num_samples: 12,
                shared_fraction: rho,
                ..SynthTaskConfig::default()
            };
            let s = synth_grounding_dataset(&w, &cfg).unwrap();
            let mut total = 0.0;
            let mut pairs = 0.0;
            for i in 0..s.len() {
                assert!((s[i].object_signal.dot(&s[i].object_signal) - 1.0).abs() < 1e-12);
                for j in i + 1..s.len() {
                    total += s[i].object_signal.dot(&s[j].object_signal);
                    pairs += 1.0;
                }
            }
            total / pairs
        };
        assert!(mean_cos(0.0).abs() < 0.3);
        assert!(mean_cos(0.9) > 0.75);
        let bad = SynthTaskConfig {
            shared_fraction: 1.0,
            ..SynthTaskConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn exact_object_count() {
        let w = model();
        let cfg = SynthTaskConfig {
            num_samples: 8,
            visual_token_count: 16,
            object_fraction: 0.25,
            ..SynthTaskConfig::default()
        };
        for s in synth_grounding_dataset(&w, &cfg).unwrap() {
            assert_eq!(s.mask.object_count(), 4);
        }
    }

    #[test]
    fn signal_lives_only_on_object_rows() {
        let w = model();
        let cfg = SynthTaskConfig {
            num_samples: 4,
            signal_strength: 2.5,
            ..SynthTaskConfig::default()
        };
        for s in synth_grounding_dataset(&w, &cfg).unwrap() {
            for (r, row) in s.image_tokens.rows().into_iter().enumerate() {
                let proj: f64 = row.iter().zip(s.object_signal.iter()).map(|(a, b)| a * b).sum();
                let want = if s.mask.is_object(r) { 2.5 } else { 0.0 };
                assert!((proj - want).abs() < 1e-12, "row {r}: {proj}");
            }
        }
    }

    #[test]
    fn target_is_best_matching_head_column() {
        let w = model();
        let head = &w.tensors().output_head;
        for s in synth_grounding_dataset(&w, &SynthTaskConfig { num_samples: 3, ..Default::default() }).unwrap() {
            let t = s.target_tokens[0] as usize;
            let score = |j: usize| (0..head.nrows()).map(|r| s.object_signal[r] * head[[r, j]]).sum::<f64>();
            assert_ne!(t, 0);
            assert!((1..32).all(|j| score(j) <= score(t)));
            assert_eq!(s.ground_truth, vec![format!("obj_{t}")]);
            let pair = s.textual_pair().unwrap();
            assert!(!pair.degenerate);
            assert_eq!(pair.last_index, 16 + 5);
        }
    }

    #[test]
    fn config_validation() {
        let bad = SynthTaskConfig {
            visual_token_count: 3,
            object_fraction: 0.25,
            ..SynthTaskConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(SynthTaskConfig { object_fraction: 1.0, ..Default::default() }.validate().is_err());
        let w = model();
        let long = SynthTaskConfig { visual_token_count: 40, ..Default::default() };
        assert!(matches!(synth_grounding_dataset(&w, &long), Err(PtiError::SequenceTooLong { .. })));
    }

    #[test]
    fn document_round_trip() {
        let w = model();
        let cfg = SynthTaskConfig { num_samples: 2, ..Default::default() };
        let samples = synth_grounding_dataset(&w, &cfg).unwrap();
        let doc = SynthDataset::new(&w, cfg, &samples);
        let text = serde_json::to_string(&doc).unwrap();
        let back: SynthDataset = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_samples().unwrap(), samples);
    }
}
