// SPDX-License-Identifier: MIT OR Apache-2.0

//! Steering directions distilled from contrastive prompts.
//!
//! Every direction is stored per layer as an `N_h × d_h` array so it lines
//! up with the per-head cache rows it is added to.

mod contrast;
mod extract;
mod pca;

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{PtiError, Result};
use crate::model::Weights;

pub use contrast::{build_textual_contrast, build_visual_contrast, ContrastiveTextualPair, ContrastiveVisualPair, ObjectMask};
pub use extract::{extract_textual_directions, extract_visual_directions, Extraction, PcaReport};
pub use pca::{pca_denoise, PcaOutcome};

pub const DIRECTIONS_FORMAT_VERSION: u32 = 1;

/// Key and value direction of one layer, each `N_h × d_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvDirection {
    pub key: Array2<f64>,
    pub value: Array2<f64>,
}

impl KvDirection {
    pub fn zeros(num_heads: usize, head_dim: usize) -> Self {
        Self {
            key: Array2::zeros((num_heads, head_dim)),
            value: Array2::zeros((num_heads, head_dim)),
        }
    }
}

/// Directions of one modality across all layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityDirections {
    pub layers: Vec<KvDirection>,
    pub sample_count: usize,
    pub pca_rank: Option<usize>,
}

impl ModalityDirections {
    pub fn zeros(num_layers: usize, num_heads: usize, head_dim: usize) -> Self {
        Self {
            layers: vec![KvDirection::zeros(num_heads, head_dim); num_layers],
            sample_count: 0,
            pca_rank: None,
        }
    }
}

/// Visual and textual key/value directions bound to one model.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringDirections {
    model_fingerprint: String,
    num_heads: usize,
    head_dim: usize,
    visual: ModalityDirections,
    textual: ModalityDirections,
}

impl SteeringDirections {
    pub fn new(model_fingerprint: String, visual: ModalityDirections, textual: ModalityDirections) -> Result<Self> {
        let first = visual
            .layers
            .first()
            .ok_or(PtiError::Empty("visual direction layers"))?;
        let (num_heads, head_dim) = first.key.dim();
        if textual.layers.len() != visual.layers.len() {
            return Err(PtiError::LengthMismatch {
                what: "textual direction layers",
                expected: visual.layers.len(),
                found: textual.layers.len(),
            });
        }
        for dir in visual.layers.iter().chain(&textual.layers) {
            for m in [&dir.key, &dir.value] {
                if m.dim() != (num_heads, head_dim) {
                    return Err(PtiError::Shape(format!(
                        "direction shape {:?}, expected ({num_heads}, {head_dim})",
                        m.dim()
                    )));
                }
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(PtiError::NonFinite("steering direction".into()));
                }
            }
        }
        Ok(Self {
            model_fingerprint,
            num_heads,
            head_dim,
            visual,
            textual,
        })
    }

    /// Zero directions for a model; applying them leaves a cache unchanged.
    pub fn zeros(weights: &Weights) -> Self {
        let c = weights.config();
        let z = ModalityDirections::zeros(c.num_layers, c.num_heads, c.head_dim);
        Self::new(weights.fingerprint().to_owned(), z.clone(), z).expect("valid zero directions")
    }

    pub fn model_fingerprint(&self) -> &str {
        &self.model_fingerprint
    }

    pub fn num_layers(&self) -> usize {
        self.visual.layers.len()
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn visual(&self) -> &ModalityDirections {
        &self.visual
    }

    pub fn textual(&self) -> &ModalityDirections {
        &self.textual
    }

    pub fn check_model(&self, weights: &Weights) -> Result<()> {
        if self.model_fingerprint != weights.fingerprint() {
            return Err(PtiError::FingerprintMismatch {
                expected: weights.fingerprint().to_owned(),
                found: self.model_fingerprint.clone(),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let layers = (0..self.num_layers())
            .map(|l| {
                let (vi, tx) = (&self.visual.layers[l], &self.textual.layers[l]);
                LayerDocument {
                    norms: Norms {
                        key_img: frobenius(&vi.key),
                        value_img: frobenius(&vi.value),
                        key_txt: frobenius(&tx.key),
                        value_txt: frobenius(&tx.value),
                    },
                    key_img: nested(&vi.key),
                    value_img: nested(&vi.value),
                    key_txt: nested(&tx.key),
                    value_txt: nested(&tx.value),
                }
            })
            .collect();
        let doc = DirectionsDocument {
            format_version: DIRECTIONS_FORMAT_VERSION,
            model_fingerprint: self.model_fingerprint.clone(),
            num_layers: self.num_layers(),
            num_heads: self.num_heads,
            head_dim: self.head_dim,
            sample_count: PerModality {
                visual: self.visual.sample_count,
                textual: self.textual.sample_count,
            },
            pca_rank: PerModality {
                visual: self.visual.pca_rank,
                textual: self.textual.pca_rank,
            },
            layers,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: DirectionsDocument = serde_json::from_str(text)?;
        if doc.format_version != DIRECTIONS_FORMAT_VERSION {
            return Err(PtiError::Format(format!(
                "unsupported directions format version {}",
                doc.format_version
            )));
        }
        if doc.layers.len() != doc.num_layers {
            return Err(PtiError::LengthMismatch {
                what: "direction layers",
                expected: doc.num_layers,
                found: doc.layers.len(),
            });
        }
        let shape = (doc.num_heads, doc.head_dim);
        let mut visual = Vec::with_capacity(doc.num_layers);
        let mut textual = Vec::with_capacity(doc.num_layers);
        for layer in &doc.layers {
            visual.push(KvDirection {
                key: unnested(&layer.key_img, shape)?,
                value: unnested(&layer.value_img, shape)?,
            });
            textual.push(KvDirection {
                key: unnested(&layer.key_txt, shape)?,
                value: unnested(&layer.value_txt, shape)?,
            });
        }
        Self::new(
            doc.model_fingerprint,
            ModalityDirections {
                layers: visual,
                sample_count: doc.sample_count.visual,
                pca_rank: doc.pca_rank.visual,
            },
            ModalityDirections {
                layers: textual,
                sample_count: doc.sample_count.textual,
                pca_rank: doc.pca_rank.textual,
            },
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn nested(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn unnested(rows: &[Vec<f64>], shape: (usize, usize)) -> Result<Array2<f64>> {
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
        return Err(PtiError::Shape(format!("direction array is not {}x{}", shape.0, shape.1)));
    }
    Ok(Array2::from_shape_fn(shape, |(h, c)| rows[h][c]))
}

#[derive(Debug, Serialize, Deserialize)]
struct DirectionsDocument {
    format_version: u32,
    model_fingerprint: String,
    #[serde(rename = "L")]
    num_layers: usize,
    #[serde(rename = "N_h")]
    num_heads: usize,
    #[serde(rename = "d_h")]
    head_dim: usize,
    #[serde(rename = "N")]
    sample_count: PerModality<usize>,
    pca_rank: PerModality<Option<usize>>,
    layers: Vec<LayerDocument>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PerModality<T> {
    visual: T,
    textual: T,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerDocument {
    key_img: Vec<Vec<f64>>,
    value_img: Vec<Vec<f64>>,
    key_txt: Vec<Vec<f64>>,
    value_txt: Vec<Vec<f64>>,
    norms: Norms,
}

#[derive(Debug, Serialize, Deserialize)]
struct Norms {
    key_img: f64,
    value_img: f64,
    key_txt: f64,
    value_txt: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn sample_dirs() -> SteeringDirections {
        let layer = |s: f64| KvDirection {
            key: Array2::from_shape_fn((2, 3), |(h, c)| s * (h as f64 + 0.1 * c as f64) / 7.0),
            value: Array2::from_shape_fn((2, 3), |(h, c)| -s * (c as f64 - h as f64) / 3.0),
        };
        SteeringDirections::new(
            "abc".into(),
            ModalityDirections {
                layers: vec![layer(1.0), layer(2.5)],
                sample_count: 4,
                pca_rank: Some(1),
            },
            ModalityDirections {
                layers: vec![layer(-0.3), layer(1e-17)],
                sample_count: 3,
                pca_rank: None,
            },
        )
        .unwrap()
    }

    #[test]
    fn json_round_trip_is_exact() {
        let d = sample_dirs();
        let text = d.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["L"], 2);
        assert_eq!(v["N_h"], 2);
        assert_eq!(v["N"]["visual"], 4);
        assert!(v["layers"][0]["norms"]["key_img"].as_f64().unwrap() > 0.0);
        assert_eq!(SteeringDirections::from_json(&text).unwrap(), d);
    }

    #[test]
    fn rejects_bad_documents() {
        let d = sample_dirs();
        let mut v: serde_json::Value = serde_json::from_str(&d.to_json().unwrap()).unwrap();
        v["format_version"] = 9.into();
        assert!(SteeringDirections::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&d.to_json().unwrap()).unwrap();
        v["layers"][1]["value_txt"][0] = serde_json::json!([1.0]);
        assert!(matches!(SteeringDirections::from_json(&v.to_string()), Err(PtiError::Shape(_))));
    }

    #[test]
    fn fingerprint_is_checked() {
        let w = Weights::random(ModelConfig::new(1, 2, 3, 8, 8, 1).unwrap()).unwrap();
        let z = SteeringDirections::zeros(&w);
        z.check_model(&w).unwrap();
        assert!(matches!(sample_dirs().check_model(&w), Err(PtiError::FingerprintMismatch { .. })));
    }

    #[test]
    fn non_finite_directions_rejected() {
        let mut v = ModalityDirections::zeros(1, 1, 1);
        v.layers[0].value[[0, 0]] = f64::NAN;
        assert!(SteeringDirections::new("x".into(), v, ModalityDirections::zeros(1, 1, 1)).is_err());
    }
}
