// SPDX-License-Identifier: MIT OR Apache-2.0

//! Caption hallucination (CHAIR) and yes/no probing (POPE) scores.

use std::collections::BTreeSet;
use std::io::BufRead;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{PtiError, Result};

/// Case-folded, trimmed object label.
pub fn canonical_label(label: &str) -> String {
    label.trim().to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    #[serde(deserialize_with = "label_set")]
    pub mentioned_objects: BTreeSet<String>,
    #[serde(deserialize_with = "label_set")]
    pub ground_truth_objects: BTreeSet<String>,
}

impl CaptionRecord {
    pub fn new<I, J, S, T>(mentioned: I, ground_truth: J) -> Self
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        Self {
            mentioned_objects: mentioned.into_iter().map(|s| canonical_label(s.as_ref())).collect(),
            ground_truth_objects: ground_truth.into_iter().map(|s| canonical_label(s.as_ref())).collect(),
        }
    }

    pub fn hallucinated(&self) -> usize {
        self.mentioned_objects.difference(&self.ground_truth_objects).count()
    }
}

fn label_set<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<BTreeSet<String>, D::Error> {
    let raw = Vec::<String>::deserialize(d)?;
    Ok(raw.iter().map(|s| canonical_label(s)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChairScores {
    pub chair_s: f64,
    pub chair_i: f64,
}

/// `chair_i` = hallucinated mentions / all mentions; `chair_s` = share of
/// records with at least one hallucinated mention. Both are 0 when nothing
/// is mentioned.
pub fn chair_scores(records: &[CaptionRecord]) -> Result<ChairScores> {
    if records.is_empty() {
        return Err(PtiError::Empty("caption records"));
    }
    let mentions: usize = records.iter().map(|r| r.mentioned_objects.len()).sum();
    let hallucinated: usize = records.iter().map(CaptionRecord::hallucinated).sum();
    let bad_captions = records.iter().filter(|r| r.hallucinated() > 0).count();
    Ok(ChairScores {
        chair_s: bad_captions as f64 / records.len() as f64,
        chair_i: if mentions == 0 {
            0.0
        } else {
            hallucinated as f64 / mentions as f64
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
}

impl<'de> Deserialize<'de> for Answer {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        match canonical_label(&raw).as_str() {
            "yes" => Ok(Self::Yes),
            "no" => Ok(Self::No),
            other => Err(serde::de::Error::custom(format!("expected yes or no, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryQARecord {
    pub prediction: Answer,
    pub label: Answer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PopeScores {
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

/// Accuracy and F1 with "yes" as the positive class. Precision or recall
/// with a zero denominator counts as 0, and so does F1 when both are 0.
pub fn pope_scores(records: &[BinaryQARecord]) -> Result<PopeScores> {
    if records.is_empty() {
        return Err(PtiError::Empty("yes/no records"));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for r in records {
        match (r.prediction, r.label) {
            (Answer::Yes, Answer::Yes) => tp += 1,
            (Answer::Yes, Answer::No) => fp += 1,
            (Answer::No, Answer::Yes) => fn_ += 1,
            (Answer::No, Answer::No) => tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(PopeScores {
        accuracy: ratio(tp + tn, records.len()),
        f1,
        precision,
        recall,
        tp,
        fp,
        fn_,
        tn,
    })
}

/// One JSON object per non-blank line.
pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(input: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| PtiError::Format(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}
