// SPDX-License-Identifier: MIT OR Apache-2.0

//! Row-local additions of steering directions to a prefill cache.

use ndarray::Array2;

use super::{InterventionConfig, TextualPositionMode};
use crate::cache::KVCache;
use crate::directions::{ModalityDirections, SteeringDirections};
use crate::error::{Modality, PtiError, Result};
use crate::sequence::ModalitySegmentedSequence;

/// Adds `λ_k,img · S_k,img` to the key rows and `λ_v,img · S_v,img` to the
/// value rows of every visual position, in every layer and head.
pub fn apply_visual_intervention(
    cache: &mut KVCache,
    dirs: &SteeringDirections,
    cfg: &InterventionConfig,
    visual_indices: &[usize],
) -> Result<()> {
    check(cache, dirs, cfg, Modality::Visual, visual_indices)?;
    add_directions(cache, dirs.visual(), cfg.lambda_k_img, cfg.lambda_v_img, cfg.normalize(), visual_indices);
    cache.mark_applied(Modality::Visual);
    Ok(())
}

/// Textual counterpart of [`apply_visual_intervention`]. Targets every
/// textual position, or only the last prompt position in
/// [`TextualPositionMode::LastTokenOnly`].
pub fn apply_textual_intervention(
    cache: &mut KVCache,
    dirs: &SteeringDirections,
    cfg: &InterventionConfig,
    textual_indices: &[usize],
) -> Result<()> {
    let targets = textual_targets(cache, cfg, textual_indices)?;
    check(cache, dirs, cfg, Modality::Textual, &targets)?;
    add_directions(cache, dirs.textual(), cfg.lambda_k_txt, cfg.lambda_v_txt, cfg.normalize(), &targets);
    cache.mark_applied(Modality::Textual);
    Ok(())
}

fn textual_targets(cache: &KVCache, cfg: &InterventionConfig, textual_indices: &[usize]) -> Result<Vec<usize>> {
    match cfg.textual_position_mode {
        TextualPositionMode::AllTextual => Ok(textual_indices.to_vec()),
        TextualPositionMode::LastTokenOnly => {
            let last = cache.origin_length().wrapping_sub(1);
            if textual_indices.contains(&last) {
                Ok(vec![last])
            } else {
                Err(PtiError::InvalidIndices("last prompt position is not a textual position".into()))
            }
        }
    }
}

/// Visual then textual intervention. The two touch disjoint rows, so the
/// order does not matter.
pub fn apply_pti(
    cache: &mut KVCache,
    dirs: &SteeringDirections,
    cfg: &InterventionConfig,
    seq: &ModalitySegmentedSequence,
) -> Result<()> {
    if seq.len() != cache.origin_length() {
        return Err(PtiError::LengthMismatch {
            what: "sequence for intervention",
            expected: cache.origin_length(),
            found: seq.len(),
        });
    }
    // validate both halves first so a failure leaves the cache untouched
    let textual = textual_targets(cache, cfg, seq.textual_indices())?;
    check(cache, dirs, cfg, Modality::Visual, seq.visual_indices())?;
    check(cache, dirs, cfg, Modality::Textual, &textual)?;
    apply_visual_intervention(cache, dirs, cfg, seq.visual_indices())?;
    apply_textual_intervention(cache, dirs, cfg, seq.textual_indices())
}

fn check(
    cache: &KVCache,
    dirs: &SteeringDirections,
    cfg: &InterventionConfig,
    modality: Modality,
    targets: &[usize],
) -> Result<()> {
    cfg.validate()?;
    if cache.model_fingerprint() != dirs.model_fingerprint() {
        return Err(PtiError::FingerprintMismatch {
            expected: cache.model_fingerprint().to_owned(),
            found: dirs.model_fingerprint().to_owned(),
        });
    }
    if cache.applied().contains(modality) {
        return Err(PtiError::AlreadyApplied(modality));
    }
    if cache.len() != cache.origin_length() {
        return Err(PtiError::NotAtPrefill {
            len: cache.len(),
            origin: cache.origin_length(),
        });
    }
    let layer0 = cache.layer(0);
    if dirs.num_layers() != cache.num_layers()
        || dirs.num_heads() != layer0.num_heads()
        || dirs.head_dim() != layer0.head_dim()
    {
        return Err(PtiError::Shape(format!(
            "directions are {}x{}x{}, cache is {}x{}x{}",
            dirs.num_layers(),
            dirs.num_heads(),
            dirs.head_dim(),
            cache.num_layers(),
            layer0.num_heads(),
            layer0.head_dim()
        )));
    }
    if let Some(bad) = targets.iter().find(|i| **i >= cache.origin_length()) {
        return Err(PtiError::InvalidIndices(format!(
            "position {bad} outside prefill of length {}",
            cache.origin_length()
        )));
    }
    Ok(())
}

fn add_directions(
    cache: &mut KVCache,
    dirs: &ModalityDirections,
    lambda_k: f64,
    lambda_v: f64,
    normalize: bool,
    targets: &[usize],
) {
    for (l, dir) in dirs.layers.iter().enumerate() {
        let layer = cache.layer_mut(l);
        for h in 0..dir.key.nrows() {
            for &pos in targets {
                if lambda_k != 0.0 {
                    shift_row(layer.key_mut(h, pos), &dir.key, h, lambda_k, normalize);
                }
                if lambda_v != 0.0 {
                    shift_row(layer.value_mut(h, pos), &dir.value, h, lambda_v, normalize);
                }
            }
        }
    }
}

fn shift_row(row: &mut [f64], dir: &Array2<f64>, head: usize, lambda: f64, normalize: bool) {
    let before = if normalize { l2(row) } else { 0.0 };
    let original = if normalize { row.to_vec() } else { Vec::new() };
    for (r, s) in row.iter_mut().zip(dir.row(head)) {
        *r += lambda * s;
    }
    if normalize {
        let after = l2(row);
        if after > 0.0 {
            let scale = before / after;
            row.iter_mut().for_each(|r| *r *= scale);
        } else {
            // the shift cancelled the row exactly; no direction to rescale
            row.copy_from_slice(&original);
        }
    }
}

fn l2(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}
