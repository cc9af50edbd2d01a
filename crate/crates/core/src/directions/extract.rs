// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-layer key/value difference vectors from contrastive prefill passes.

use ndarray::{Array1, Array2};

use super::contrast::{ContrastiveTextualPair, ContrastiveVisualPair};
use super::pca::pca_denoise;
use super::{KvDirection, ModalityDirections};
use crate::cache::KVCache;
use crate::decoder::prefill;
use crate::error::{PtiError, Result};
use crate::model::Weights;
use crate::sequence::ModalitySegmentedSequence;

/// PCA diagnostics for one layer and one of key/value.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaReport {
    pub layer: usize,
    pub is_key: bool,
    pub effective_rank: usize,
    pub clamped: bool,
    pub degenerate: bool,
}

#[derive(Debug, Clone)]
pub struct Extraction {
    /// Final directions (mean, then PCA when a rank was given).
    pub directions: ModalityDirections,
    /// Plain mean of the per-sample vectors.
    pub mean: Vec<KvDirection>,
    /// `[sample][layer]` difference vectors.
    pub per_sample: Vec<Vec<KvDirection>>,
    pub pca: Vec<PcaReport>,
    /// Pairs whose contrast was flagged degenerate.
    pub degenerate_pairs: usize,
}

/// Visual directions: per sample, the mean over `I_img` of the positive
/// minus negative cached rows; then the mean over samples.
pub fn extract_visual_directions(
    weights: &Weights,
    pairs: &[ContrastiveVisualPair],
    pca_rank: Option<usize>,
) -> Result<Extraction> {
    let first = pairs.first().ok_or(PtiError::Empty("visual contrast pairs"))?;
    let visual = first.positive.visual_indices().to_vec();
    for p in pairs {
        for seq in [&p.positive, &p.negative] {
            if seq.visual_indices() != visual.as_slice() {
                return Err(PtiError::InvalidIndices(
                    "contrast pairs disagree on the visual index set".into(),
                ));
            }
        }
    }
    let per_sample = pairs
        .iter()
        .map(|p| sample_difference(weights, &p.positive, &p.negative, &visual))
        .collect::<Result<Vec<_>>>()?;
    let degenerate = pairs.iter().filter(|p| p.degenerate).count();
    finish(weights, per_sample, pca_rank, degenerate)
}

/// Textual directions: per sample, the positive minus negative cached row at
/// the last prompt position `N_x - 1`; then the mean over samples.
pub fn extract_textual_directions(
    weights: &Weights,
    pairs: &[ContrastiveTextualPair],
    pca_rank: Option<usize>,
) -> Result<Extraction> {
    let first = pairs.first().ok_or(PtiError::Empty("textual contrast pairs"))?;
    let n = first.positive.len();
    for p in pairs {
        for seq in [&p.positive, &p.negative] {
            if seq.len() != n {
                return Err(PtiError::LengthMismatch {
                    what: "textual contrast sequence",
                    expected: n,
                    found: seq.len(),
                });
            }
        }
    }
    let per_sample = pairs
        .iter()
        .map(|p| sample_difference(weights, &p.positive, &p.negative, &[n - 1]))
        .collect::<Result<Vec<_>>>()?;
    let degenerate = pairs.iter().filter(|p| p.degenerate).count();
    finish(weights, per_sample, pca_rank, degenerate)
}

fn sample_difference(
    weights: &Weights,
    positive: &ModalitySegmentedSequence,
    negative: &ModalitySegmentedSequence,
    rows: &[usize],
) -> Result<Vec<KvDirection>> {
    if rows.is_empty() {
        return Err(PtiError::Empty("pooled positions"));
    }
    let pos = prefill(weights, positive)?.cache;
    let neg = prefill(weights, negative)?.cache;
    let cfg = weights.config();
    Ok((0..cfg.num_layers)
        .map(|l| KvDirection {
            key: pooled_difference(&pos, &neg, l, rows, true, cfg.num_heads, cfg.head_dim),
            value: pooled_difference(&pos, &neg, l, rows, false, cfg.num_heads, cfg.head_dim),
        })
        .collect())
}

fn pooled_difference(
    pos: &KVCache,
    neg: &KVCache,
    layer: usize,
    rows: &[usize],
    key: bool,
    heads: usize,
    head_dim: usize,
) -> Array2<f64> {
    let (lp, ln) = (pos.layer(layer), neg.layer(layer));
    let mut acc = Array1::<f64>::zeros(heads * head_dim);
    for &r in rows {
        let (a, b) = if key {
            (lp.key_row(r), ln.key_row(r))
        } else {
            (lp.value_row(r), ln.value_row(r))
        };
        for ((s, x), y) in acc.iter_mut().zip(a).zip(b) {
            *s += x - y;
        }
    }
    acc /= rows.len() as f64;
    acc.into_shape_with_order((heads, head_dim)).expect("row width is heads * head_dim")
}

fn finish(
    weights: &Weights,
    per_sample: Vec<Vec<KvDirection>>,
    pca_rank: Option<usize>,
    degenerate_pairs: usize,
) -> Result<Extraction> {
    let cfg = weights.config();
    let n = per_sample.len();
    let mut mean: Vec<KvDirection> = (0..cfg.num_layers)
        .map(|_| KvDirection::zeros(cfg.num_heads, cfg.head_dim))
        .collect();
    // fixed sample order keeps the reduction reproducible
    for sample in &per_sample {
        for (acc, s) in mean.iter_mut().zip(sample) {
            acc.key += &s.key;
            acc.value += &s.value;
        }
    }
    for m in &mut mean {
        m.key /= n as f64;
        m.value /= n as f64;
    }

    let mut layers = mean.clone();
    let mut reports = Vec::new();
    if let Some(rank) = pca_rank {
        let width = cfg.num_heads * cfg.head_dim;
        for (l, out) in layers.iter_mut().enumerate() {
            for is_key in [true, false] {
                let samples = Array2::from_shape_fn((n, width), |(i, c)| {
                    let s = &per_sample[i][l];
                    let m = if is_key { &s.key } else { &s.value };
                    m[[c / cfg.head_dim, c % cfg.head_dim]]
                });
                let outcome = pca_denoise(&samples, rank)?;
                if outcome.clamped || outcome.degenerate {
                    log::debug!(
                        "pca layer {l} {}: effective rank {}, degenerate {}",
                        if is_key { "key" } else { "value" },
                        outcome.effective_rank,
                        outcome.degenerate
                    );
                }
                let shaped = outcome
                    .direction
                    .into_shape_with_order((cfg.num_heads, cfg.head_dim))
                    .expect("row width is heads * head_dim");
                if is_key {
                    out.key = shaped;
                } else {
                    out.value = shaped;
                }
                reports.push(PcaReport {
                    layer: l,
                    is_key,
                    effective_rank: outcome.effective_rank,
                    clamped: outcome.clamped,
                    degenerate: outcome.degenerate,
                });
            }
        }
    }
    Ok(Extraction {
        directions: ModalityDirections {
            layers,
            sample_count: n,
            pca_rank,
        },
        mean,
        per_sample,
        pca: reports,
        degenerate_pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::directions::contrast::{build_textual_contrast, build_visual_contrast, ObjectMask};
    use crate::model::{ModelConfig, WeightTensors};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn grid(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
    }

    /// Test-mode, single-layer model with identity key/value projections.
    fn identity_model(heads: usize, head_dim: usize) -> Weights {
        let cfg = ModelConfig::new(1, heads, head_dim, 8, 32, 0).unwrap().with_test_mode(true);
        let mut t = WeightTensors::zeros(&cfg);
        let d = heads * head_dim;
        t.layers[0].w_k = Array2::eye(d);
        t.layers[0].w_v = Array2::eye(d) * 2.0;
        Weights::new(cfg, t).unwrap()
    }

    fn random_model(seed: u64) -> Weights {
        Weights::random(ModelConfig::new(2, 2, 4, 16, 32, seed).unwrap()).unwrap()
    }

    fn max_norm(dirs: &ModalityDirections) -> f64 {
        dirs.layers
            .iter()
            .flat_map(|d| d.key.iter().chain(d.value.iter()))
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn identical_contrast_gives_zero_directions() {
        let w = random_model(1);
        let img = grid(4, 8, 2);
        let prompt = grid(3, 8, 3);
        let seq = ModalitySegmentedSequence::from_segments(&img, &prompt).unwrap();
        let vpair = ContrastiveVisualPair {
            positive: seq.clone(),
            negative: seq.clone(),
            degenerate: false,
        };
        let ex = extract_visual_directions(&w, &[vpair.clone(), vpair], None).unwrap();
        assert!(max_norm(&ex.directions) < 1e-12);
        let tpair = ContrastiveTextualPair {
            positive: seq.clone(),
            negative: seq,
            anchor_indices: vec![0],
            last_index: 6,
            degenerate: false,
        };
        let ex = extract_textual_directions(&w, &[tpair], None).unwrap();
        assert!(max_norm(&ex.directions) < 1e-12);
    }

    #[test]
    fn antisymmetric_pairs_cancel() {
        let w = random_model(4);
        let mask = ObjectMask::new(vec![1, 0, 1, 0]).unwrap();
        let a = build_visual_contrast(&grid(4, 8, 5), &mask, &grid(2, 8, 6)).unwrap();
        let b = ContrastiveVisualPair {
            positive: a.negative.clone(),
            negative: a.positive.clone(),
            degenerate: false,
        };
        let ex = extract_visual_directions(&w, &[a, b], None).unwrap();
        assert!(ex.per_sample[0][0].key.iter().any(|v| v.abs() > 1e-6));
        assert_eq!(max_norm(&ex.directions), 0.0);
    }

    #[test]
    fn identity_keys_give_mean_row_difference() {
        let w = identity_model(2, 2);
        let img = grid(3, 4, 9);
        let prompt = grid(2, 4, 10);
        let mask = ObjectMask::new(vec![1, 0, 1]).unwrap();
        let pair = build_visual_contrast(&img, &mask, &prompt).unwrap();
        let ex = extract_visual_directions(&w, std::slice::from_ref(&pair), None).unwrap();
        // hand oracle: object rows minus background rows, averaged over 3
        let xp = pair.positive.embeddings();
        let xn = pair.negative.embeddings();
        for c in 0..4 {
            let want = ((xp[[0, c]] - xn[[0, c]]) + (xp[[1, c]] - xn[[1, c]]) + (xp[[2, c]] - xn[[2, c]])) / 3.0;
            let got = ex.directions.layers[0].key[[c / 2, c % 2]];
            assert!((got - want).abs() < 1e-12, "col {c}: {got} vs {want}");
            let got_v = ex.directions.layers[0].value[[c / 2, c % 2]];
            assert!((got_v - 2.0 * want).abs() < 1e-12);
        }
    }

    #[test]
    fn textual_last_row_difference() {
        let w = identity_model(2, 3);
        let img = grid(2, 6, 1);
        let prompt = grid(3, 6, 2);
        let delta = [0.5, -1.0, 0.25, 2.0, 0.0, -0.125];
        let mut shifted = prompt.clone();
        for (c, d) in delta.iter().enumerate() {
            shifted[[2, c]] += d;
        }
        let pair = ContrastiveTextualPair {
            positive: ModalitySegmentedSequence::from_segments(&img, &shifted).unwrap(),
            negative: ModalitySegmentedSequence::from_segments(&img, &prompt).unwrap(),
            anchor_indices: vec![2],
            last_index: 4,
            degenerate: false,
        };
        let ex = extract_textual_directions(&w, &[pair], None).unwrap();
        for (c, d) in delta.iter().enumerate() {
            let got = ex.directions.layers[0].key[[c / 3, c % 3]];
            assert!((got - d).abs() < 1e-12);
        }
    }

    #[test]
    fn n_sample_direction_is_mean_of_single_sample_runs() {
        let w = random_model(21);
        let img = grid(4, 8, 30);
        let pairs: Vec<_> = (0..3)
            .map(|i| build_textual_contrast(&grid(5, 8, 40 + i), &[1, 3], &img, &[]).unwrap())
            .collect();
        let joint = extract_textual_directions(&w, &pairs, None).unwrap();
        let singles: Vec<_> = pairs
            .iter()
            .map(|p| extract_textual_directions(&w, std::slice::from_ref(p), None).unwrap())
            .collect();
        for l in 0..2 {
            for (h, c) in [(0, 0), (1, 3), (0, 2)] {
                let want = singles.iter().map(|s| s.directions.layers[l].value[[h, c]]).sum::<f64>() / 3.0;
                assert!((joint.directions.layers[l].value[[h, c]] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pca_rank_is_recorded() {
        let w = random_model(2);
        let mask = ObjectMask::new(vec![1, 1, 0, 0]).unwrap();
        let pairs: Vec<_> = (0..3)
            .map(|i| build_visual_contrast(&grid(4, 8, 50 + i), &mask, &grid(2, 8, 9)).unwrap())
            .collect();
        let ex = extract_visual_directions(&w, &pairs, Some(1)).unwrap();
        assert_eq!(ex.pca.len(), 4);
        assert_eq!(ex.directions.pca_rank, Some(1));
        assert_eq!(ex.directions.sample_count, 3);
        let full = extract_visual_directions(&w, &pairs, Some(3)).unwrap();
        for (a, b) in full.directions.layers.iter().zip(&full.mean) {
            for (x, y) in a.key.iter().zip(b.key.iter()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_empty_and_mismatched_inputs() {
        let w = random_model(3);
        assert!(matches!(extract_visual_directions(&w, &[], None), Err(PtiError::Empty(_))));
        let a = build_visual_contrast(&grid(4, 8, 1), &ObjectMask::new(vec![1, 0, 0, 0]).unwrap(), &grid(2, 8, 2)).unwrap();
        let b = build_visual_contrast(&grid(3, 8, 1), &ObjectMask::new(vec![1, 0, 0]).unwrap(), &grid(3, 8, 2)).unwrap();
        assert!(extract_visual_directions(&w, &[a, b], None).is_err());
        let img = grid(2, 8, 1);
        let t1 = build_textual_contrast(&grid(3, 8, 1), &[0], &img, &[]).unwrap();
        let t2 = build_textual_contrast(&grid(4, 8, 1), &[0], &img, &[]).unwrap();
        assert!(matches!(
            extract_textual_directions(&w, &[t1, t2], None),
            Err(PtiError::LengthMismatch { .. })
        ));
    }
}
