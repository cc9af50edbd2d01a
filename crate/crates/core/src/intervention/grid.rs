// SPDX-License-Identifier: MIT OR Apache-2.0

//! Exhaustive search over intervention strengths.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{InterventionConfig, NormalizationMode, TextualPositionMode};
use crate::error::{PtiError, Result};

/// Score of one grid point plus named auxiliary metrics for the table.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub score: f64,
    pub metrics: Vec<(String, f64)>,
}

impl From<f64> for Evaluation {
    fn from(score: f64) -> Self {
        Self {
            score,
            metrics: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridEntry {
    pub config: InterventionConfig,
    pub evaluation: Evaluation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub best_index: usize,
    /// One entry per grid point, in grid order.
    pub table: Vec<GridEntry>,
}

impl GridResult {
    pub fn best(&self) -> &GridEntry {
        &self.table[self.best_index]
    }
}

/// Tied `(λ_k, λ_v)` axes for building a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lambda_k: Vec<f64>,
    pub lambda_v: Vec<f64>,
    #[serde(default)]
    pub textual_position_mode: TextualPositionMode,
    #[serde(default)]
    pub normalization_mode: NormalizationMode,
}

impl Default for GridSpec {
    fn default() -> Self {
        let axis: Vec<f64> = (0..=10).map(|i| f64::from(i) / 10.0).collect();
        Self {
            lambda_k: axis.clone(),
            lambda_v: axis,
            textual_position_mode: TextualPositionMode::default(),
            normalization_mode: NormalizationMode::default(),
        }
    }
}

impl GridSpec {
    /// Row-major over `λ_k`, then `λ_v`.
    pub fn expand(&self) -> Result<Vec<InterventionConfig>> {
        let mut out = Vec::with_capacity(self.lambda_k.len() * self.lambda_v.len());
        for &k in &self.lambda_k {
            for &v in &self.lambda_v {
                let cfg = InterventionConfig::tied(k, v)
                    .with_textual_mode(self.textual_position_mode)
                    .with_normalization(self.normalization_mode);
                cfg.validate()?;
                out.push(cfg);
            }
        }
        if out.is_empty() {
            return Err(PtiError::Empty("lambda grid"));
        }
        Ok(out)
    }
}

/// `{0, 0.1, …, 1.0}²` with tied image/text coefficients.
pub fn default_grid() -> Vec<InterventionConfig> {
    GridSpec::default().expand().expect("default grid is valid")
}

/// Evaluates every configuration in order and returns the best. Ties go to
/// the earliest grid entry.
pub fn grid_search_lambdas<F, S>(grid: &[InterventionConfig], mut evaluate: F) -> Result<GridResult>
where
    F: FnMut(&InterventionConfig) -> Result<S>,
    S: Into<Evaluation>,
{
    if grid.is_empty() {
        return Err(PtiError::Empty("lambda grid"));
    }
    let mut table: Vec<GridEntry> = Vec::with_capacity(grid.len());
    let mut best_index = 0;
    for (i, cfg) in grid.iter().enumerate() {
        let evaluation: Evaluation = evaluate(cfg)?.into();
        if evaluation.score.is_nan() {
            return Err(PtiError::NonFinite(format!("grid score at entry {i}")));
        }
        log::debug!(
            "grid {i}: k={} v={} score={}",
            cfg.lambda_k_img,
            cfg.lambda_v_img,
            evaluation.score
        );
        if i > 0 && evaluation.score > table[best_index].evaluation.score {
            best_index = i;
        }
        table.push(GridEntry {
            config: *cfg,
            evaluation,
        });
    }
    Ok(GridResult { best_index, table })
}

/// CSV with `lambda_k,lambda_v,score` followed by the metric columns. Grids
/// with untied coefficients get all four lambda columns instead.
pub fn write_score_table<W: Write>(result: &GridResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let tied = result
        .table
        .iter()
        .all(|e| e.config.lambda_k_img == e.config.lambda_k_txt && e.config.lambda_v_img == e.config.lambda_v_txt);
    let names: Vec<&str> = result.table[0]
        .evaluation
        .metrics
        .iter()
        .map(|(n, _)| n.as_str())
        .collect();
    let mut header: Vec<&str> = if tied {
        vec!["lambda_k", "lambda_v"]
    } else {
        vec!["lambda_k_img", "lambda_v_img", "lambda_k_txt", "lambda_v_txt"]
    };
    header.push("score");
    header.extend(&names);
    w.write_record(&header)?;
    for e in &result.table {
        let c = &e.config;
        let mut row: Vec<String> = if tied {
            vec![c.lambda_k_img.to_string(), c.lambda_v_img.to_string()]
        } else {
            [c.lambda_k_img, c.lambda_v_img, c.lambda_k_txt, c.lambda_v_txt]
                .iter()
                .map(f64::to_string)
                .collect()
        };
        row.push(e.evaluation.score.to_string());
        if e.evaluation.metrics.len() != names.len()
            || e.evaluation.metrics.iter().zip(&names).any(|((n, _), m)| n != m)
        {
            return Err(PtiError::Format("grid entries report different metrics".into()));
        }
        row.extend(e.evaluation.metrics.iter().map(|(_, v)| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
