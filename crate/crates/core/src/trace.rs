// SPDX-License-Identifier: MIT OR Apache-2.0

//! Last-token attention rows recorded during decoding.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{PtiError, Result};

/// Attention probabilities of one decode step, `[layer][head][position]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    len: usize,
    weights: Vec<f64>,
}

impl TraceStep {
    pub(crate) fn new(len: usize, weights: Vec<f64>) -> Self {
        Self { len, weights }
    }

    /// Number of cached positions attended at this step.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// All rows, flattened in `[layer][head][position]` order.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    num_layers: usize,
    num_heads: usize,
    origin_length: usize,
    steps: Vec<TraceStep>,
}

impl AttentionTrace {
    pub fn new(num_layers: usize, num_heads: usize, origin_length: usize) -> Self {
        Self {
            num_layers,
            num_heads,
            origin_length,
            steps: Vec::new(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn origin_length(&self) -> usize {
        self.origin_length
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn steps(&self) -> &[TraceStep] {
        &self.steps
    }

    pub(crate) fn push(&mut self, step: TraceStep) {
        debug_assert_eq!(step.weights.len(), self.num_layers * self.num_heads * step.len);
        self.steps.push(step);
    }

    pub fn step(&self, t: usize) -> Result<&TraceStep> {
        self.steps.get(t).ok_or(PtiError::UnrecordedStep(t))
    }

    /// Attention row `A^t_{l,h}`.
    pub fn row(&self, t: usize, layer: usize, head: usize) -> Result<&[f64]> {
        let step = self.step(t)?;
        if layer >= self.num_layers || head >= self.num_heads {
            return Err(PtiError::InvalidIndices(format!(
                "layer {layer}/head {head} outside {}x{}",
                self.num_layers, self.num_heads
            )));
        }
        let o = (layer * self.num_heads + head) * step.len;
        Ok(&step.weights[o..o + step.len])
    }

    /// Writes `step,layer,head,position,weight` rows. Weights use the
    /// shortest round-tripping decimal form so a re-read is bit-exact.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(["step", "layer", "head", "position", "weight"])?;
        for (t, step) in self.steps.iter().enumerate() {
            for l in 0..self.num_layers {
                for h in 0..self.num_heads {
                    let o = (l * self.num_heads + h) * step.len;
                    for (pos, v) in step.weights[o..o + step.len].iter().enumerate() {
                        w.serialize(TraceCsvRow {
                            step: t,
                            layer: l,
                            head: h,
                            position: pos,
                            weight: *v,
                        })?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a trace written by [`write_csv`](Self::write_csv). Layer/head
    /// counts and the origin length are inferred from the rows.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let rows: Vec<TraceCsvRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
        if rows.is_empty() {
            return Err(PtiError::Empty("attention trace CSV"));
        }
        let num_steps = rows.iter().map(|r| r.step).max().unwrap() + 1;
        let num_layers = rows.iter().map(|r| r.layer).max().unwrap() + 1;
        let num_heads = rows.iter().map(|r| r.head).max().unwrap() + 1;
        let mut lens = vec![0usize; num_steps];
        for row in &rows {
            lens[row.step] = lens[row.step].max(row.position + 1);
        }
        let mut steps: Vec<(Vec<f64>, Vec<bool>)> = lens
            .iter()
            .map(|&n| {
                let size = num_layers * num_heads * n;
                (vec![0.0; size], vec![false; size])
            })
            .collect();
        for row in &rows {
            let n = lens[row.step];
            let idx = (row.layer * num_heads + row.head) * n + row.position;
            let (weights, filled) = &mut steps[row.step];
            if filled[idx] {
                return Err(PtiError::Format(format!(
                    "duplicate trace entry at step {} layer {} head {} position {}",
                    row.step, row.layer, row.head, row.position
                )));
            }
            weights[idx] = row.weight;
            filled[idx] = true;
        }
        let origin_length = lens[0]
            .checked_sub(1)
            .ok_or_else(|| PtiError::Format("empty first step".into()))?;
        let mut trace = Self::new(num_layers, num_heads, origin_length);
        for (t, ((weights, filled), n)) in steps.into_iter().zip(lens).enumerate() {
            if filled.iter().any(|f| !f) {
                return Err(PtiError::Format(format!("step {t} is missing entries")));
            }
            if n != origin_length + t + 1 {
                return Err(PtiError::Format(format!(
                    "step {t} has row length {n}, expected {}",
                    origin_length + t + 1
                )));
            }
            trace.push(TraceStep::new(n, weights));
        }
        Ok(trace)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceCsvRow {
    step: usize,
    layer: usize,
    head: usize,
    position: usize,
    weight: f64,
}
