// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use log::info;
use serde::{Deserialize, Serialize};

use pti_core::analytics::{mean_object_score_grid, object_attention_shift, write_heatmap_csv, AnalyticsConfig, StageComparison};
use pti_core::directions::ObjectMask;
use pti_core::eval::{
    chair_scores, extract_from_samples, grounding_objective, measure_throughput, pope_scores, read_jsonl,
    synth_grounding_dataset, BinaryQARecord, CaptionRecord, GroundingConfig, SynthDataset, SynthTaskConfig,
};
use pti_core::intervention::{grid_search_lambdas, write_score_table, GridSpec};
use pti_core::sequence::SequenceDocument;
use pti_core::weights_file::{load_weights, save_weights, tensor_manifest};
use pti_core::{
    apply_pti, generate, prefill, AttentionTrace, InterventionConfig, ModalitySegmentedSequence, ModelConfig,
    PtiError, SteeringDirections, Strategy, Weights,
};

use crate::args::{Analyze, Bench, Eval, Extract, Generate, Grid, InitModel, InterventionArgs, MakeSynth, StrategyName};
use crate::error::{CliError, CliResult};
use crate::files::{read_json, require_input, sibling, write_bytes, write_json, Outputs};
use crate::manifest::RunManifest;

/// Token fed to the first decode step when a sequence names none.
const DEFAULT_FIRST_TOKEN: u32 = 1;

fn load_model(path: &Path) -> CliResult<Weights> {
    Ok(load_weights(require_input(path)?)?)
}

fn load_dataset(path: &Path, weights: &Weights) -> CliResult<SynthDataset> {
    let data: SynthDataset = read_json(path)?;
    if data.model_fingerprint != weights.fingerprint() {
        return Err(PtiError::FingerprintMismatch {
            expected: weights.fingerprint().to_owned(),
            found: data.model_fingerprint,
        }
        .into());
    }
    Ok(data)
}

/// A sequence document, or one sample of a synthetic dataset.
fn load_sequence(path: &Path, sample: Option<usize>, weights: &Weights) -> CliResult<(ModalitySegmentedSequence, u32)> {
    match sample {
        Some(i) => {
            let data = load_dataset(path, weights)?;
            let samples = data.to_samples()?;
            let s = samples.get(i).ok_or_else(|| {
                CliError::Usage(format!("sample {i} out of range for {} samples", samples.len()))
            })?;
            Ok((s.sequence()?, DEFAULT_FIRST_TOKEN))
        }
        None => {
            let doc: SequenceDocument = read_json(path)?;
            Ok((doc.to_sequence()?, doc.first_token.unwrap_or(DEFAULT_FIRST_TOKEN)))
        }
    }
}

fn load_intervention(
    args: &InterventionArgs,
    weights: &Weights,
) -> CliResult<Option<(InterventionConfig, SteeringDirections)>> {
    if args.no_intervention {
        return Ok(None);
    }
    let Some(dir_path) = &args.directions else {
        return Err(CliError::Usage("pass --directions or --no-intervention".into()));
    };
    let cfg = match (&args.config, args.lambda_k, args.lambda_v) {
        (Some(path), _, _) => read_json::<InterventionConfig>(path)?,
        (None, Some(k), Some(v)) => InterventionConfig::tied(k, v),
        _ => return Err(CliError::Usage("pass --config or both --lambda-k and --lambda-v".into())),
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let dirs = SteeringDirections::load(require_input(dir_path)?)?;
    dirs.check_model(weights)?;
    Ok(Some((cfg, dirs)))
}

fn add_intervention_inputs(mut m: RunManifest, args: &InterventionArgs) -> RunManifest {
    if let Some(d) = &args.directions {
        m = m.input(d);
    }
    m.config(args.config.as_deref())
}

pub fn init_model(a: &InitModel) -> CliResult<()> {
    let tensors_path = sibling(&a.out.output, "tensors.txt");
    Outputs::new(&a.out.output).add(&tensors_path).check(a.out.force)?;
    let manifest = RunManifest::start("init-model").seed(a.seed);
    let cfg = ModelConfig::new(a.layers, a.heads, a.head_dim, a.vocab, a.max_seq_len, a.seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let weights = Weights::random(cfg)?;
    save_weights(&weights, &a.out.output)?;
    write_bytes(&tensors_path, tensor_manifest(&weights).as_bytes())?;
    info!("model {} written to {}", weights.fingerprint(), a.out.output.display());
    manifest.output(&tensors_path).finish(&a.out.output)
}

pub fn make_synth(a: &MakeSynth) -> CliResult<()> {
    Outputs::new(&a.out.output).check(a.out.force)?;
    let weights = load_model(&a.model)?;
    let cfg = match &a.config {
        Some(path) => read_json::<SynthTaskConfig>(path)?,
        None => SynthTaskConfig {
            num_samples: a.samples,
            visual_token_count: a.visual_tokens,
            object_fraction: a.object_fraction,
            prompt_length: a.prompt_length,
            signal_strength: a.signal_strength,
            noise_scale: a.noise_scale,
            rng_seed: a.seed,
            shared_fraction: a.shared_fraction,
        },
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let samples = synth_grounding_dataset(&weights, &cfg)?;
    write_json(&a.out.output, &SynthDataset::new(&weights, cfg, &samples))?;
    info!("{} synthetic samples written", samples.len());
    RunManifest::start("make-synth")
        .config(a.config.as_deref())
        .seed(cfg.rng_seed)
        .input(&a.model)
        .finish(&a.out.output)
}

pub fn extract(a: &Extract) -> CliResult<()> {
    Outputs::new(&a.out.output).check(a.out.force)?;
    let weights = load_model(&a.model)?;
    let data = load_dataset(&a.data, &weights)?;
    let bundle = extract_from_samples(&weights, &data.to_samples()?, a.pca_rank)?;
    for r in bundle.visual.pca.iter().chain(&bundle.textual.pca) {
        if r.clamped || r.degenerate {
            log::warn!(
                "layer {} {}: pca rank {} (clamped {}, degenerate {})",
                r.layer,
                if r.is_key { "key" } else { "value" },
                r.effective_rank,
                r.clamped,
                r.degenerate
            );
        }
    }
    bundle.directions.save(&a.out.output)?;
    RunManifest::start("extract")
        .seed(data.config.rng_seed)
        .input(&a.model)
        .input(&a.data)
        .finish(&a.out.output)
}

#[derive(Debug, Serialize, Deserialize)]
struct TokensFile {
    tokens: Vec<u32>,
    truncated: bool,
}

/// Modality segments of a traced prompt, written next to the trace.
#[derive(Debug, Serialize, Deserialize)]
struct Segments {
    visual_indices: Vec<usize>,
    textual_indices: Vec<usize>,
}

fn strategy(a: &Generate) -> Strategy {
    match a.strategy {
        StrategyName::Greedy => Strategy::Greedy,
        StrategyName::Beam => Strategy::Beam { width: a.beam_width },
        StrategyName::Nucleus => Strategy::Nucleus {
            top_p: a.top_p,
            temperature: a.temperature,
            seed: a.seed,
        },
    }
}

pub fn generate_cmd(a: &Generate) -> CliResult<()> {
    if a.trace.is_some() && a.strategy == StrategyName::Beam {
        return Err(CliError::Usage("--trace is not available with beam search".into()));
    }
    let mut outputs = Outputs::new(&a.out.output);
    let segments_path = a.trace.as_ref().map(|t| sibling(t, "segments.json"));
    if let (Some(t), Some(s)) = (&a.trace, &segments_path) {
        outputs.add(t).add(s);
    }
    outputs.check(a.out.force)?;

    let weights = load_model(&a.model)?;
    let (seq, first_token) = load_sequence(&a.input, a.sample, &weights)?;
    let intervention = load_intervention(&a.intervention, &weights)?;
    let first = weights.token_embedding(first_token)?;

    let mut cache = prefill(&weights, &seq)?.cache;
    if let Some((cfg, dirs)) = &intervention {
        apply_pti(&mut cache, dirs, cfg, &seq)?;
    }
    let g = generate(&weights, &mut cache, strategy(a), &first, a.max_new, a.trace.is_some())?;
    write_json(&a.out.output, &TokensFile { tokens: g.tokens.clone(), truncated: g.truncated })?;
    let mut manifest = add_intervention_inputs(RunManifest::start("generate").seed(a.seed), &a.intervention)
        .input(&a.model)
        .input(&a.input);
    if let (Some(path), Some(trace), Some(seg)) = (&a.trace, &g.trace, &segments_path) {
        let mut w = BufWriter::new(File::create(path).with_context(|| format!("writing {}", path.display()))?);
        trace.write_csv(&mut w)?;
        w.flush().context("flushing trace")?;
        write_json(
            seg,
            &Segments {
                visual_indices: seq.visual_indices().to_vec(),
                textual_indices: seq.textual_indices().to_vec(),
            },
        )?;
        manifest = manifest.output(path).output(seg);
    }
    info!("{} tokens generated (truncated: {})", g.tokens.len(), g.truncated);
    manifest.finish(&a.out.output)
}

fn read_trace(path: &Path) -> CliResult<AttentionTrace> {
    let f = File::open(require_input(path)?).with_context(|| format!("reading {}", path.display()))?;
    Ok(AttentionTrace::read_csv(BufReader::new(f))?)
}

pub fn analyze(a: &Analyze) -> CliResult<()> {
    let mut outputs = Outputs::new(&a.out.output);
    if let Some(h) = &a.heatmap {
        outputs.add(h);
    }
    outputs.check(a.out.force)?;

    let before = read_trace(&a.before)?;
    let after = read_trace(&a.after)?;
    let (visual, segments_source): (Vec<usize>, PathBuf) = match &a.input {
        Some(p) => (read_json::<SequenceDocument>(p)?.visual_indices, p.clone()),
        None => {
            let p = sibling(&a.before, "segments.json");
            if !p.is_file() {
                return Err(CliError::Usage(format!(
                    "no visual index set: pass --input or keep {} next to the trace",
                    p.display()
                )));
            }
            (read_json::<Segments>(&p)?.visual_indices, p)
        }
    };
    let cfg = AnalyticsConfig {
        epsilon: a.epsilon,
        num_stages: a.stages,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let cmp = StageComparison::new(&before, &after, &visual, &cfg)?;
    let mut buf = Vec::new();
    cmp.write_csv(&mut buf)?;
    write_bytes(&a.out.output, &buf)?;

    let mut manifest = RunManifest::start("analyze").input(&a.before).input(&a.after).input(&segments_source);
    if let (Some(mask_path), Some(heatmap)) = (&a.mask, &a.heatmap) {
        let mask: ObjectMask = read_json(mask_path)?;
        let s_before = mean_object_score_grid(&before, &visual, &mask)?;
        let s_after = mean_object_score_grid(&after, &visual, &mask)?;
        let mut buf = Vec::new();
        write_heatmap_csv(&object_attention_shift(&s_before, &s_after)?, &mut buf)?;
        write_bytes(heatmap, &buf)?;
        info!(
            "mean S_obj {:.6} -> {:.6}",
            s_before.mean().unwrap_or(0.0),
            s_after.mean().unwrap_or(0.0)
        );
        manifest = manifest.input(mask_path).output(heatmap);
    }
    manifest.finish(&a.out.output)
}

fn read_records<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let f = File::open(require_input(path)?).with_context(|| format!("reading {}", path.display()))?;
    Ok(read_jsonl(BufReader::new(f))?)
}

pub fn eval(a: &Eval) -> CliResult<()> {
    Outputs::new(&a.out.output).check(a.out.force)?;
    let mut summary = serde_json::Map::new();
    let mut manifest = RunManifest::start("eval");
    if let Some(path) = &a.chair {
        let scores = chair_scores(&read_records::<CaptionRecord>(path)?)?;
        summary.insert("chair".into(), serde_json::to_value(scores).context("serializing CHAIR")?);
        manifest = manifest.input(path);
    }
    if let Some(path) = &a.pope {
        let scores = pope_scores(&read_records::<BinaryQARecord>(path)?)?;
        summary.insert("pope".into(), serde_json::to_value(scores).context("serializing POPE")?);
        manifest = manifest.input(path);
    }
    write_json(&a.out.output, &summary)?;
    manifest.finish(&a.out.output)
}

pub fn bench(a: &Bench) -> CliResult<()> {
    Outputs::new(&a.out.output).check(a.out.force)?;
    let weights = load_model(&a.model)?;
    let (seq, _) = load_sequence(&a.input, a.sample, &weights)?;
    let intervention = load_intervention(&a.intervention, &weights)?;
    let report = measure_throughput(
        &weights,
        &seq,
        intervention.as_ref().map(|(c, d)| (c, d)),
        a.tokens,
        a.warmup,
        a.runs,
    )?;
    write_json(&a.out.output, &report)?;
    add_intervention_inputs(RunManifest::start("bench"), &a.intervention)
        .input(&a.model)
        .input(&a.input)
        .finish(&a.out.output)
}

pub fn grid(a: &Grid) -> CliResult<()> {
    let mut outputs = Outputs::new(&a.out.output);
    if let Some(b) = &a.best {
        outputs.add(b);
    }
    outputs.check(a.out.force)?;
    let weights = load_model(&a.model)?;
    let data = load_dataset(&a.data, &weights)?;
    let dirs = SteeringDirections::load(require_input(&a.directions)?)?;
    dirs.check_model(&weights)?;
    let spec = match &a.config {
        Some(path) => read_json::<GridSpec>(path)?,
        None => GridSpec::default(),
    };
    let candidates = spec.expand().map_err(|e| CliError::Usage(e.to_string()))?;
    let samples = data.to_samples()?;
    let gcfg = GroundingConfig {
        max_new: a.max_new,
        ..GroundingConfig::default()
    };
    let result = grid_search_lambdas(&candidates, grounding_objective(&weights, &samples, &dirs, &gcfg))?;
    let mut buf = Vec::new();
    write_score_table(&result, &mut buf)?;
    write_bytes(&a.out.output, &buf)?;
    let best = result.best();
    info!(
        "best lambda_k {} lambda_v {}: score {}",
        best.config.lambda_k_img, best.config.lambda_v_img, best.evaluation.score
    );
    let mut manifest = RunManifest::start("grid")
        .config(a.config.as_deref())
        .seed(data.config.rng_seed)
        .input(&a.model)
        .input(&a.data)
        .input(&a.directions);
    if let Some(path) = &a.best {
        write_json(path, &best.config)?;
        manifest = manifest.output(path);
    }
    manifest.finish(&a.out.output)
}
