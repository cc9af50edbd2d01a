// SPDX-License-Identifier: MIT OR Apache-2.0

//! Autoregressive decoding on top of a (possibly steered) prefill cache.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cache::KVCache;
use crate::decoder::{decode_step, softmax_in_place};
use crate::error::{PtiError, Result};
use crate::model::Weights;
use crate::trace::AttentionTrace;

/// Token id that terminates generation.
pub const EOS_TOKEN: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    Greedy,
    Beam { width: usize },
    Nucleus { top_p: f64, temperature: f64, seed: u64 },
}

impl Strategy {
    fn validate(&self) -> Result<()> {
        match *self {
            Self::Greedy => Ok(()),
            Self::Beam { width } if width >= 1 => Ok(()),
            Self::Beam { .. } => Err(PtiError::InvalidConfig("beam width must be >= 1".into())),
            Self::Nucleus { top_p, temperature, .. } => {
                if !(top_p > 0.0 && top_p <= 1.0) {
                    return Err(PtiError::InvalidConfig(format!("top_p {top_p} outside (0, 1]")));
                }
                if !(temperature > 0.0 && temperature.is_finite()) {
                    return Err(PtiError::InvalidConfig(format!(
                        "temperature {temperature} must be positive"
                    )));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub trace: Option<AttentionTrace>,
    /// Set when the cache filled up before `max_new` tokens or EOS.
    pub truncated: bool,
}

/// Decodes up to `max_new` tokens. Step 0 consumes `first_input`; every
/// later step consumes the embedding of the previously emitted token.
/// Stops after emitting [`EOS_TOKEN`]. On return `cache` holds the state of
/// the emitted sequence (the winning hypothesis for beam search).
pub fn generate(
    weights: &Weights,
    cache: &mut KVCache,
    strategy: Strategy,
    first_input: &[f64],
    max_new: usize,
    record: bool,
) -> Result<Generation> {
    strategy.validate()?;
    if max_new == 0 {
        return Err(PtiError::InvalidConfig("max_new must be >= 1".into()));
    }
    match strategy {
        Strategy::Greedy => sample_loop(weights, cache, first_input, max_new, record, |logits| {
            Ok(argmax(logits))
        }),
        Strategy::Nucleus {
            top_p,
            temperature,
            seed,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_loop(weights, cache, first_input, max_new, record, |logits| {
                Ok(nucleus_sample(logits, top_p, temperature, &mut rng))
            })
        }
        Strategy::Beam { width } => {
            if record {
                return Err(PtiError::TraceUnsupported);
            }
            beam_search(weights, cache, first_input, max_new, width)
        }
    }
}

fn sample_loop<F>(
    weights: &Weights,
    cache: &mut KVCache,
    first_input: &[f64],
    max_new: usize,
    record: bool,
    mut pick: F,
) -> Result<Generation>
where
    F: FnMut(&[f64]) -> Result<u32>,
{
    let cfg = weights.config();
    let mut trace = record.then(|| AttentionTrace::new(cfg.num_layers, cfg.num_heads, cache.len()));
    let mut tokens = Vec::with_capacity(max_new);
    let mut input = first_input.to_vec();
    let mut truncated = false;
    for _ in 0..max_new {
        if cache.is_full() {
            truncated = true;
            break;
        }
        let step = decode_step(weights, cache, &input, record)?;
        if step.logits.is_empty() {
            return Err(PtiError::Empty("vocabulary"));
        }
        if let (Some(t), Some(rows)) = (trace.as_mut(), step.trace_rows) {
            t.push(rows);
        }
        let tok = pick(&step.logits)?;
        tokens.push(tok);
        if tok == EOS_TOKEN {
            break;
        }
        input = weights.token_embedding(tok)?;
    }
    Ok(Generation {
        tokens,
        trace,
        truncated,
    })
}

/// Index of the largest logit; ties go to the lowest id.
pub fn argmax(logits: &[f64]) -> u32 {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Probabilities after temperature scaling.
pub fn tempered_probs(logits: &[f64], temperature: f64) -> Vec<f64> {
    let mut p: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    softmax_in_place(&mut p);
    p
}

/// Smallest descending-probability prefix whose mass reaches `top_p`.
/// Ties in probability are ordered by lowest token id.
pub fn nucleus(probs: &[f64], top_p: f64) -> Vec<(u32, f64)> {
    let mut order: Vec<(u32, f64)> = probs.iter().enumerate().map(|(i, p)| (i as u32, *p)).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut mass = 0.0;
    let mut keep = order.len();
    for (i, (_, p)) in order.iter().enumerate() {
        mass += p;
        if mass >= top_p {
            keep = i + 1;
            break;
        }
    }
    order.truncate(keep);
    order
}

fn nucleus_sample(logits: &[f64], top_p: f64, temperature: f64, rng: &mut ChaCha8Rng) -> u32 {
    let kept = nucleus(&tempered_probs(logits, temperature), top_p);
    let total: f64 = kept.iter().map(|(_, p)| p).sum();
    let r = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (tok, p) in &kept {
        acc += p;
        if r < acc {
            return *tok;
        }
    }
    kept.last().expect("nucleus is never empty").0
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

struct Hypothesis {
    tokens: Vec<u32>,
    score: f64,
    cache: KVCache,
    next_input: Vec<f64>,
}

/// Higher score first; then shorter; then lexicographically smaller ids.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn beam_search(
    weights: &Weights,
    cache: &mut KVCache,
    first_input: &[f64],
    max_new: usize,
    width: usize,
) -> Result<Generation> {
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        cache: cache.clone(),
        next_input: first_input.to_vec(),
    }];
    let mut completed: Vec<Hypothesis> = Vec::new();
    let mut truncated = false;

    for _ in 0..max_new {
        if live[0].cache.is_full() {
            truncated = true;
            break;
        }
        // (score, step logit, token, parent)
        let mut candidates: Vec<(f64, f64, u32, usize)> = Vec::new();
        for (hi, hyp) in live.iter_mut().enumerate() {
            let step = decode_step(weights, &mut hyp.cache, &hyp.next_input, false)?;
            if step.logits.is_empty() {
                return Err(PtiError::Empty("vocabulary"));
            }
            let logp = log_softmax(&step.logits);
            for (tok, (lp, logit)) in logp.iter().zip(&step.logits).enumerate() {
                candidates.push((hyp.score + lp, *logit, tok as u32, hi));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(b.1.total_cmp(&a.1))
                .then(a.2.cmp(&b.2))
                .then(a.3.cmp(&b.3))
        });
        candidates.truncate(width);

        let mut next_live = Vec::with_capacity(width);
        for (score, _, tok, hi) in candidates {
            let parent = &live[hi];
            let mut tokens = parent.tokens.clone();
            tokens.push(tok);
            let hyp = Hypothesis {
                tokens,
                score,
                cache: parent.cache.clone(),
                next_input: if tok == EOS_TOKEN {
                    Vec::new()
                } else {
                    weights.token_embedding(tok)?
                },
            };
            if tok == EOS_TOKEN {
                completed.push(hyp);
            } else {
                next_live.push(hyp);
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
        // Log-probabilities are <= 0, so live scores only fall from here.
        let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if completed.iter().any(|c| c.score >= best_live) {
            break;
        }
    }

    let pool = if completed.is_empty() { live } else { completed };
    let best = pool
        .into_iter()
        .min_by(rank)
        .expect("beam always holds at least one hypothesis");
    *cache = best.cache;
    Ok(Generation {
        tokens: best.tokens,
        trace: None,
        truncated,
    })
}

/// Forced decoding of a known continuation.
#[derive(Debug, Clone)]
pub struct Replay {
    /// Logits produced at every step.
    pub logits: Vec<Vec<f64>>,
    pub trace: Option<AttentionTrace>,
}

/// Feeds `first_input` and then the embeddings of `tokens[..len-1]`,
/// producing one step per entry of `tokens`, regardless of what the model
/// would have chosen.
pub fn replay(
    weights: &Weights,
    cache: &mut KVCache,
    first_input: &[f64],
    tokens: &[u32],
    record: bool,
) -> Result<Replay> {
    let cfg = weights.config();
    let mut trace = record.then(|| AttentionTrace::new(cfg.num_layers, cfg.num_heads, cache.len()));
    let mut logits = Vec::with_capacity(tokens.len());
    let mut input = first_input.to_vec();
    for (t, tok) in tokens.iter().enumerate() {
        let step = decode_step(weights, cache, &input, record)?;
        if let (Some(tr), Some(rows)) = (trace.as_mut(), step.trace_rows) {
            tr.push(rows);
        }
        logits.push(step.logits);
        if t + 1 < tokens.len() {
            input = weights.token_embedding(*tok)?;
        }
    }
    Ok(Replay { logits, trace })
}
