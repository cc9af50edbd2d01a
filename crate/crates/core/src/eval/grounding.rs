// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end runs on the synthetic grounding task: extract directions from
//! one split, decode another with or without the intervention, and
//! summarise the recorded attention.

use crate::analytics::{mean_object_score, proportion_series, AnalyticsConfig, StageSeries};
use crate::decoder::prefill;
use crate::directions::{extract_textual_directions, extract_visual_directions, Extraction, SteeringDirections};
use crate::error::{PtiError, Result};
use crate::eval::synth::SynthSample;
use crate::generate::{generate, Strategy};
use crate::intervention::{apply_pti, Evaluation, InterventionConfig};
use crate::model::Weights;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundingConfig {
    pub max_new: usize,
    pub first_token: u32,
    pub analytics: AnalyticsConfig,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self {
            max_new: 16,
            first_token: 1,
            analytics: AnalyticsConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DirectionBundle {
    pub directions: SteeringDirections,
    pub visual: Extraction,
    pub textual: Extraction,
}

/// Visual directions from the object/background pairs and textual
/// directions from the anchor/context pairs of every sample.
pub fn extract_from_samples(weights: &Weights, samples: &[SynthSample], pca_rank: Option<usize>) -> Result<DirectionBundle> {
    let vpairs = samples.iter().map(SynthSample::visual_pair).collect::<Result<Vec<_>>>()?;
    let tpairs = samples.iter().map(SynthSample::textual_pair).collect::<Result<Vec<_>>>()?;
    let rank = pca_rank.map(|r| r.min(samples.len()));
    let visual = extract_visual_directions(weights, &vpairs, rank)?;
    let textual = extract_textual_directions(weights, &tpairs, rank)?;
    let directions = SteeringDirections::new(
        weights.fingerprint().to_owned(),
        visual.directions.clone(),
        textual.directions.clone(),
    )?;
    Ok(DirectionBundle {
        directions,
        visual,
        textual,
    })
}

#[derive(Debug, Clone)]
pub struct GroundingOutcome {
    /// Mean over samples of each sample's step/layer/head-averaged `S_obj`.
    pub mean_s_obj: f64,
    pub per_sample_s_obj: Vec<f64>,
    /// Per-sample `P_img` stage series.
    pub p_series: Vec<StageSeries>,
    /// Stage-wise mean of `p_series`; indices are stage numbers since the
    /// samples decode to different lengths.
    pub mean_p_series: StageSeries,
    pub tokens: Vec<Vec<u32>>,
}

/// Greedy decoding of every sample with attention recording.
pub fn evaluate_grounding(
    weights: &Weights,
    samples: &[SynthSample],
    intervention: Option<(&InterventionConfig, &SteeringDirections)>,
    cfg: &GroundingConfig,
) -> Result<GroundingOutcome> {
    if samples.is_empty() {
        return Err(PtiError::Empty("grounding samples"));
    }
    let first = weights.token_embedding(cfg.first_token)?;
    let mut per_sample_s_obj = Vec::with_capacity(samples.len());
    let mut p_series = Vec::with_capacity(samples.len());
    let mut tokens = Vec::with_capacity(samples.len());
    for s in samples {
        let seq = s.sequence()?;
        let mut cache = prefill(weights, &seq)?.cache;
        if let Some((icfg, dirs)) = intervention {
            apply_pti(&mut cache, dirs, icfg, &seq)?;
        }
        let g = generate(weights, &mut cache, Strategy::Greedy, &first, cfg.max_new, true)?;
        let trace = g.trace.as_ref().expect("recording requested");
        per_sample_s_obj.push(mean_object_score(trace, seq.visual_indices(), &s.mask)?);
        p_series.push(proportion_series(trace, seq.visual_indices(), &cfg.analytics)?);
        tokens.push(g.tokens);
    }
    let n = samples.len() as f64;
    let stages = cfg.analytics.num_stages + 1;
    let mean_values: Vec<f64> = (0..stages)
        .map(|k| p_series.iter().map(|p| p.values[k]).sum::<f64>() / n)
        .collect();
    Ok(GroundingOutcome {
        mean_s_obj: per_sample_s_obj.iter().sum::<f64>() / n,
        per_sample_s_obj,
        mean_p_series: StageSeries {
            indices: (0..stages).collect(),
            values: mean_values,
            flags: vec![false; stages],
        },
        p_series,
        tokens,
    })
}

/// Grid objective: mean `S_obj`, with the final-stage mean `P_img` as an
/// extra column.
pub fn grounding_objective<'a>(
    weights: &'a Weights,
    samples: &'a [SynthSample],
    dirs: &'a SteeringDirections,
    cfg: &GroundingConfig,
) -> impl FnMut(&InterventionConfig) -> Result<Evaluation> + 'a {
    let cfg = *cfg;
    move |icfg: &InterventionConfig| {
        let out = evaluate_grounding(weights, samples, Some((icfg, dirs)), &cfg)?;
        let p_final = *out.mean_p_series.values.last().expect("at least one stage");
        Ok(Evaluation {
            score: out.mean_s_obj,
            metrics: vec![("s_obj".into(), out.mean_s_obj), ("p_img_final".into(), p_final)],
        })
    }
}
