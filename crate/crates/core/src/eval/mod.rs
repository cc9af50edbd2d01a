// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hallucination metrics, the synthetic grounding task and the latency bench.

pub mod bench;
pub mod grounding;
pub mod metrics;
pub mod synth;

pub use bench::{measure_throughput, LatencyReport};
pub use grounding::{evaluate_grounding, extract_from_samples, grounding_objective, GroundingConfig, GroundingOutcome};
pub use metrics::{chair_scores, pope_scores, read_jsonl, Answer, BinaryQARecord, CaptionRecord, ChairScores, PopeScores};
pub use synth::{synth_grounding_dataset, SynthDataset, SynthSample, SynthTaskConfig};
