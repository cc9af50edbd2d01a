// SPDX-License-Identifier: MIT OR Apache-2.0

//! Contrastive prompt pairs.
//!
//! Masking works at the embedding level: a masked token's embedding row is
//! zeroed. The visual pair keeps object tokens on one side and background
//! tokens on the other; the textual pair keeps anchor words on one side and
//! the remaining context on the other.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{PtiError, Result};
use crate::sequence::ModalitySegmentedSequence;

/// Binary object mask over the visual positions (`1` = object token).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct ObjectMask(Vec<u8>);

impl ObjectMask {
    pub fn new(values: Vec<u8>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| **v > 1) {
            return Err(PtiError::InvalidIndices(format!("mask value {bad} is not 0 or 1")));
        }
        Ok(Self(values))
    }

    pub fn from_bools(values: &[bool]) -> Self {
        Self(values.iter().map(|b| u8::from(*b)).collect())
    }

    pub fn values(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_object(&self, i: usize) -> bool {
        self.0[i] == 1
    }

    pub fn object_count(&self) -> usize {
        self.0.iter().filter(|v| **v == 1).count()
    }
}

impl TryFrom<Vec<u8>> for ObjectMask {
    type Error = PtiError;

    fn try_from(v: Vec<u8>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ObjectMask> for Vec<u8> {
    fn from(m: ObjectMask) -> Self {
        m.0
    }
}

/// Object-only (positive) and background-only (negative) prompts sharing the
/// same textual prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveVisualPair {
    pub positive: ModalitySegmentedSequence,
    pub negative: ModalitySegmentedSequence,
    /// Mask was all-object or all-background, so one side has no visual signal.
    pub degenerate: bool,
}

pub fn build_visual_contrast(
    image_tokens: &Array2<f64>,
    mask: &ObjectMask,
    prompt_tokens: &Array2<f64>,
) -> Result<ContrastiveVisualPair> {
    let m = image_tokens.nrows();
    if m == 0 {
        return Err(PtiError::Empty("image tokens"));
    }
    if prompt_tokens.nrows() == 0 {
        return Err(PtiError::Empty("prompt tokens"));
    }
    if mask.len() != m {
        return Err(PtiError::LengthMismatch {
            what: "object mask",
            expected: m,
            found: mask.len(),
        });
    }
    let mut pos = image_tokens.clone();
    let mut neg = image_tokens.clone();
    for i in 0..m {
        if mask.is_object(i) {
            neg.row_mut(i).fill(0.0);
        } else {
            pos.row_mut(i).fill(0.0);
        }
    }
    let objects = mask.object_count();
    Ok(ContrastiveVisualPair {
        positive: ModalitySegmentedSequence::from_segments(&pos, prompt_tokens)?,
        negative: ModalitySegmentedSequence::from_segments(&neg, prompt_tokens)?,
        degenerate: objects == 0 || objects == m,
    })
}

/// Anchor-preserving (positive) and anchor-masked (negative) prompts sharing
/// the same image tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveTextualPair {
    pub positive: ModalitySegmentedSequence,
    pub negative: ModalitySegmentedSequence,
    /// Anchor positions relative to the start of the prompt.
    pub anchor_indices: Vec<usize>,
    /// Absolute index of the last textual token, `m + p - 1`.
    pub last_index: usize,
    /// Every maskable textual position is an anchor, so the control set is empty.
    pub degenerate: bool,
}

/// `protected` lists prompt positions (instruction scaffolding) that stay
/// intact on both sides.
pub fn build_textual_contrast(
    prompt_tokens: &Array2<f64>,
    anchor_indices: &[usize],
    image_tokens: &Array2<f64>,
    protected: &[usize],
) -> Result<ContrastiveTextualPair> {
    let p = prompt_tokens.nrows();
    if image_tokens.nrows() == 0 {
        return Err(PtiError::Empty("image tokens"));
    }
    if anchor_indices.is_empty() {
        return Err(PtiError::Empty("anchor index set"));
    }
    let mut anchors = anchor_indices.to_vec();
    anchors.sort_unstable();
    anchors.dedup();
    if let Some(bad) = anchors.iter().chain(protected).find(|i| **i >= p) {
        return Err(PtiError::InvalidIndices(format!(
            "prompt index {bad} outside prompt of length {p}"
        )));
    }
    if let Some(both) = anchors.iter().find(|i| protected.contains(i)) {
        return Err(PtiError::InvalidIndices(format!(
            "prompt index {both} is both anchor and protected"
        )));
    }

    let mut pos = prompt_tokens.clone();
    let mut neg = prompt_tokens.clone();
    let mut controls = 0;
    for i in 0..p {
        if protected.contains(&i) {
            continue;
        }
        if anchors.binary_search(&i).is_ok() {
            neg.row_mut(i).fill(0.0);
        } else {
            pos.row_mut(i).fill(0.0);
            controls += 1;
        }
    }
    let m = image_tokens.nrows();
    Ok(ContrastiveTextualPair {
        positive: ModalitySegmentedSequence::from_segments(image_tokens, &pos)?,
        negative: ModalitySegmentedSequence::from_segments(image_tokens, &neg)?,
        anchor_indices: anchors,
        last_index: m + p - 1,
        degenerate: controls == 0,
    })
}
