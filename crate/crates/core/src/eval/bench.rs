// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decode latency with and without a prefill intervention.
//!
//! Vanilla and intervened decodes advance in lockstep inside one process so
//! drift in machine load hits both sides equally. Decode figures are
//! medians; the one-off intervention cost is the best of several batches.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::cache::KVCache;
use crate::decoder::{decode_step, prefill};
use crate::directions::SteeringDirections;
use crate::error::{PtiError, Result};
use crate::generate::argmax;
use crate::intervention::{apply_pti, InterventionConfig};
use crate::model::Weights;
use crate::sequence::ModalitySegmentedSequence;

const INTERVENTION_BATCHES: usize = 41;
const INTERVENTION_BATCH_SIZE: usize = 8;
const MIN_TICKS: f64 = 10.0;

static BENCH_RUNNING: AtomicBool = AtomicBool::new(false);

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyReport {
    pub ms_per_token: f64,
    pub tokens_per_second: f64,
    pub prefill_ms: f64,
    /// One application of the intervention, best batch; 0 without one.
    pub intervention_ms: f64,
    /// Median over runs of subject time over the vanilla time measured in
    /// lockstep with it (vanilla = 1.00).
    pub factor_vs_baseline: f64,
    pub baseline_ms_per_token: f64,
    pub n_tokens: usize,
    pub timed_iters: usize,
}

struct Guard;

impl Guard {
    fn acquire() -> Result<Self> {
        BENCH_RUNNING
            .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
            .map(|_| Guard)
            .map_err(|_| PtiError::BenchmarkBusy)
    }
}

impl Drop for Guard {
    fn drop(&mut self) {
        BENCH_RUNNING.store(false, Ordering::SeqCst);
    }
}

/// Smallest observable step of the monotonic clock.
pub fn timer_tick() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let t0 = Instant::now();
        let mut t1 = Instant::now();
        while t1 == t0 {
            t1 = Instant::now();
        }
        best = best.min(t1 - t0);
    }
    best
}

fn check_resolution(measured: Duration, tick: Duration) -> Result<()> {
    let ticks = measured.as_secs_f64() / tick.as_secs_f64();
    if ticks < MIN_TICKS {
        return Err(PtiError::TimerResolution { ticks });
    }
    Ok(())
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Greedy decoder that ignores EOS, so every session runs exactly
/// `n_tokens` steps.
struct Stepper {
    cache: KVCache,
    input: Vec<f64>,
    checksum: u64,
    elapsed: Duration,
}

impl Stepper {
    fn new(weights: &Weights, cache: KVCache) -> Result<Self> {
        Ok(Self {
            cache,
            input: weights.token_embedding(1.min(weights.config().vocab_size as u32 - 1))?,
            checksum: 0,
            elapsed: Duration::ZERO,
        })
    }

    fn step(&mut self, weights: &Weights) -> Result<()> {
        let t0 = Instant::now();
        let out = decode_step(weights, &mut self.cache, &self.input, false)?;
        let tok = argmax(&out.logits);
        self.input = weights.token_embedding(tok)?;
        self.elapsed += t0.elapsed();
        self.checksum = self.checksum.wrapping_mul(31).wrapping_add(u64::from(tok));
        Ok(())
    }
}

struct Session {
    prefill: Duration,
    subject: Duration,
    baseline: Duration,
}

/// One subject and one baseline decode run in lockstep, token by token, with
/// the order alternating, so both see the same machine load.
fn session(
    weights: &Weights,
    seq: &ModalitySegmentedSequence,
    intervention: Option<(&InterventionConfig, &SteeringDirections)>,
    n_tokens: usize,
) -> Result<Session> {
    let t0 = Instant::now();
    let mut cache = prefill(weights, seq)?.cache;
    let prefill_time = t0.elapsed();
    if let Some((cfg, dirs)) = intervention {
        apply_pti(&mut cache, dirs, cfg, seq)?;
    }
    let mut subject = Stepper::new(weights, cache)?;
    let mut baseline = Stepper::new(weights, prefill(weights, seq)?.cache)?;
    for t in 0..n_tokens {
        if t % 2 == 0 {
            subject.step(weights)?;
            baseline.step(weights)?;
        } else {
            baseline.step(weights)?;
            subject.step(weights)?;
        }
    }
    std::hint::black_box((subject.checksum, baseline.checksum));
    Ok(Session {
        prefill: prefill_time,
        subject: subject.elapsed,
        baseline: baseline.elapsed,
    })
}

/// Median decode latency per token. With `intervention` set, the subject
/// sessions apply it after prefill; the baseline sessions never do.
/// Without it the baseline is compared with itself.
pub fn measure_throughput(
    weights: &Weights,
    seq: &ModalitySegmentedSequence,
    intervention: Option<(&InterventionConfig, &SteeringDirections)>,
    n_tokens: usize,
    warmup_iters: usize,
    timed_iters: usize,
) -> Result<LatencyReport> {
    if n_tokens == 0 {
        return Err(PtiError::InvalidConfig("n_tokens must be at least 1".into()));
    }
    if timed_iters < 3 {
        return Err(PtiError::InvalidConfig("timed_iters must be at least 3".into()));
    }
    let max = weights.config().max_seq_len;
    if seq.len() + n_tokens > max {
        return Err(PtiError::SequenceTooLong {
            len: seq.len() + n_tokens,
            max,
        });
    }
    if let Some((cfg, dirs)) = intervention {
        cfg.validate()?;
        dirs.check_model(weights)?;
    }
    let _guard = Guard::acquire()?;
    let tick = timer_tick();
    let intervention_ms = match intervention {
        Some((cfg, dirs)) => time_intervention(weights, seq, cfg, dirs, tick)?,
        None => 0.0,
    };

    let mut subject = Vec::with_capacity(timed_iters);
    let mut baseline = Vec::with_capacity(timed_iters);
    let mut ratios = Vec::with_capacity(timed_iters);
    let mut prefill_times = Vec::with_capacity(timed_iters);
    for i in 0..warmup_iters + timed_iters {
        let s = session(weights, seq, intervention, n_tokens)?;
        if i >= warmup_iters {
            check_resolution(s.subject, tick)?;
            check_resolution(s.baseline, tick)?;
            subject.push(ms(s.subject) / n_tokens as f64);
            baseline.push(ms(s.baseline) / n_tokens as f64);
            ratios.push(s.subject.as_secs_f64() / s.baseline.as_secs_f64());
            prefill_times.push(ms(s.prefill));
        }
    }

    let ms_per_token = median(&mut subject);
    let baseline_ms_per_token = median(&mut baseline);
    let report = LatencyReport {
        ms_per_token,
        tokens_per_second: 1000.0 / ms_per_token,
        prefill_ms: median(&mut prefill_times),
        intervention_ms,
        factor_vs_baseline: median(&mut ratios),
        baseline_ms_per_token,
        n_tokens,
        timed_iters,
    };
    log::info!(
        "decode {:.4} ms/token ({:.1} tok/s), x{:.3} vs vanilla, intervention {:.4} ms",
        report.ms_per_token,
        report.tokens_per_second,
        report.factor_vs_baseline,
        report.intervention_ms
    );
    Ok(report)
}

/// Mean time of one application on a fresh prefill cache, taken from the
/// fastest of several batches. Noise only ever adds time to a fixed amount
/// of work, so the minimum is the stable statistic. Cloning happens outside
/// the timed region.
fn time_intervention(
    weights: &Weights,
    seq: &ModalitySegmentedSequence,
    cfg: &InterventionConfig,
    dirs: &SteeringDirections,
    tick: Duration,
) -> Result<f64> {
    let base = prefill(weights, seq)?.cache;
    let mut best = f64::INFINITY;
    for _ in 0..INTERVENTION_BATCHES {
        let mut caches: Vec<KVCache> = (0..INTERVENTION_BATCH_SIZE).map(|_| base.clone()).collect();
        let t0 = Instant::now();
        for c in &mut caches {
            apply_pti(c, dirs, cfg, seq)?;
        }
        let elapsed = t0.elapsed();
        std::hint::black_box(&caches);
        check_resolution(elapsed, tick)?;
        best = best.min(ms(elapsed) / INTERVENTION_BATCH_SIZE as f64);
    }
    Ok(best)
}
