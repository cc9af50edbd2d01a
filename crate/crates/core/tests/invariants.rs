// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use pti_core::analytics::{renormalized_visual_attention, stage_indices};
use pti_core::directions::{KvDirection, ModalityDirections};
use pti_core::weights_file::{decode_weights, encode_weights};
use pti_core::{apply_pti, prefill, InterventionConfig, KVCache, ModalitySegmentedSequence, ModelConfig, SteeringDirections, Weights};

fn normal(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || {
        let z: f64 = StandardNormal.sample(&mut *rng);
        scale * z
    })
}

fn modality(rng: &mut ChaCha8Rng, w: &Weights, scale: f64) -> ModalityDirections {
    let c = w.config();
    ModalityDirections {
        layers: (0..c.num_layers)
            .map(|_| KvDirection {
                key: normal(rng, (c.num_heads, c.head_dim), scale),
                value: normal(rng, (c.num_heads, c.head_dim), scale),
            })
            .collect(),
        sample_count: 1,
        pca_rank: None,
    }
}

fn rows(cache: &KVCache) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for layer in cache.layers() {
        for pos in 0..layer.len() {
            for h in 0..layer.num_heads() {
                out.push(layer.key(h, pos).to_vec());
                out.push(layer.value(h, pos).to_vec());
            }
        }
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn steering_keeps_row_norms(
        seed in 0u64..1000,
        heads in 1usize..4,
        visual in 1usize..6,
        textual in 1usize..6,
        lk in 0.0f64..1.0,
        lv in 0.0f64..1.0,
        scale in 0.01f64..5.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Weights::random(ModelConfig::new(2, heads, 4, 16, 32, seed).unwrap()).unwrap();
        let d = w.config().hidden_dim;
        let seq = ModalitySegmentedSequence::from_segments(
            &normal(&mut rng, (visual, d), 1.0),
            &normal(&mut rng, (textual, d), 1.0),
        ).unwrap();
        let v = modality(&mut rng, &w, scale);
        let t = modality(&mut rng, &w, scale);
        let dirs = SteeringDirections::new(w.fingerprint().to_owned(), v, t).unwrap();
        let mut cache = prefill(&w, &seq).unwrap().cache;
        let before = rows(&cache);
        apply_pti(&mut cache, &dirs, &InterventionConfig::tied(lk, lv), &seq).unwrap();
        for (a, b) in before.iter().zip(rows(&cache)) {
            let (na, nb) = (norm(a), norm(&b));
            prop_assert!((na - nb).abs() <= 1e-9 * na.max(1.0));
        }
    }

    #[test]
    fn stages_span_the_generation(steps in 1usize..500, stages in 1usize..12) {
        let idx = stage_indices(steps, stages).unwrap();
        prop_assert_eq!(idx.len(), stages + 1);
        prop_assert_eq!(idx[0], 0);
        prop_assert_eq!(*idx.last().unwrap(), steps - 1);
        prop_assert!(idx.windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn renormalized_visual_rows_sum_to_one(
        row in prop::collection::vec(1e-6f64..1.0, 2..40),
        picks in prop::collection::vec(any::<prop::sample::Index>(), 1..10),
    ) {
        let mut visual: Vec<usize> = picks.iter().map(|i| i.index(row.len())).collect();
        visual.sort_unstable();
        visual.dedup();
        let dist = renormalized_visual_attention(&row, &visual).unwrap();
        prop_assert_eq!(dist.len(), visual.len());
        prop_assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weights_round_trip(seed in 0u64..1000, layers in 1usize..3, heads in 1usize..3) {
        let w = Weights::random(ModelConfig::new(layers, heads, 4, 12, 16, seed).unwrap()).unwrap();
        let bytes = encode_weights(&w).unwrap();
        let back = decode_weights(&bytes).unwrap();
        prop_assert_eq!(back.fingerprint(), w.fingerprint());
        prop_assert_eq!(encode_weights(&back).unwrap(), bytes);
    }
}
