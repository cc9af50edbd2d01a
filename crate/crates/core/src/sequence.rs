// SPDX-License-Identifier: MIT OR Apache-2.0

//! Input embeddings with their visual/textual position partition.

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{PtiError, Result};

/// Prompt embeddings `X` (`N_x × D`) plus disjoint, covering, sorted index
/// sets for the visual and textual positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySegmentedSequence {
    embeddings: Array2<f64>,
    visual_indices: Vec<usize>,
    textual_indices: Vec<usize>,
    token_ids: Option<Vec<u32>>,
}

impl ModalitySegmentedSequence {
    pub fn new(
        embeddings: Array2<f64>,
        visual_indices: Vec<usize>,
        textual_indices: Vec<usize>,
        token_ids: Option<Vec<u32>>,
    ) -> Result<Self> {
        let n = embeddings.nrows();
        check_partition(n, &visual_indices, &textual_indices)?;
        if let Some(ids) = &token_ids {
            if ids.len() != n {
                return Err(PtiError::LengthMismatch {
                    what: "token_ids",
                    expected: n,
                    found: ids.len(),
                });
            }
        }
        Ok(Self {
            embeddings,
            visual_indices,
            textual_indices,
            token_ids,
        })
    }

    /// Image tokens first (`I_img = 0..m`), prompt tokens after (`I_txt = m..m+p`).
    pub fn from_segments(image_tokens: &Array2<f64>, prompt_tokens: &Array2<f64>) -> Result<Self> {
        if image_tokens.ncols() != prompt_tokens.ncols() {
            return Err(PtiError::Shape(format!(
                "image width {} != prompt width {}",
                image_tokens.ncols(),
                prompt_tokens.ncols()
            )));
        }
        let m = image_tokens.nrows();
        let p = prompt_tokens.nrows();
        let embeddings = concatenate(Axis(0), &[image_tokens.view(), prompt_tokens.view()])
            .map_err(|e| PtiError::Shape(e.to_string()))?;
        Self::new(embeddings, (0..m).collect(), (m..m + p).collect(), None)
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn visual_indices(&self) -> &[usize] {
        &self.visual_indices
    }

    pub fn textual_indices(&self) -> &[usize] {
        &self.textual_indices
    }

    pub fn token_ids(&self) -> Option<&[u32]> {
        self.token_ids.as_deref()
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.embeddings.ncols()
    }
}

fn check_partition(n: usize, visual: &[usize], textual: &[usize]) -> Result<()> {
    let mut seen = vec![false; n];
    for (name, set) in [("visual", visual), ("textual", textual)] {
        if set.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PtiError::InvalidIndices(format!(
                "{name} indices must be strictly increasing"
            )));
        }
        for &i in set {
            if i >= n {
                return Err(PtiError::InvalidIndices(format!(
                    "{name} index {i} out of range for length {n}"
                )));
            }
            if seen[i] {
                return Err(PtiError::InvalidIndices(format!(
                    "position {i} is both visual and textual"
                )));
            }
            seen[i] = true;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(PtiError::InvalidIndices(format!(
            "position {missing} belongs to neither modality"
        )));
    }
    Ok(())
}

/// JSON form of a sequence: nested float rows plus the two index lists.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceDocument {
    pub embeddings: Vec<Vec<f64>>,
    pub visual_indices: Vec<usize>,
    pub textual_indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_ids: Option<Vec<u32>>,
    /// Token whose embedding seeds the first decode step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_token: Option<u32>,
}

impl SequenceDocument {
    pub fn from_sequence(seq: &ModalitySegmentedSequence) -> Self {
        Self {
            embeddings: rows_of(seq.embeddings()),
            visual_indices: seq.visual_indices().to_vec(),
            textual_indices: seq.textual_indices().to_vec(),
            token_ids: seq.token_ids().map(<[u32]>::to_vec),
            first_token: None,
        }
    }

    pub fn to_sequence(&self) -> Result<ModalitySegmentedSequence> {
        ModalitySegmentedSequence::new(
            matrix_from_rows(&self.embeddings)?,
            self.visual_indices.clone(),
            self.textual_indices.clone(),
            self.token_ids.clone(),
        )
    }
}

pub(crate) fn rows_of(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(PtiError::Shape("ragged embedding rows".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), width), flat).map_err(|e| PtiError::Shape(e.to_string()))
}
