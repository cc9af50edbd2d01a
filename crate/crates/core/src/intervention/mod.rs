// SPDX-License-Identifier: MIT OR Apache-2.0

//! One-shot steering of the prefill cache.
//!
//! Directions are added to the cached key/value rows of the matching
//! modality right after prefill; decoding then runs unchanged, so the cost
//! is paid once per prompt rather than once per generated token.

mod apply;
mod grid;

use serde::{Deserialize, Serialize};

use crate::error::{PtiError, Result};

pub use apply::{apply_pti, apply_textual_intervention, apply_visual_intervention};
pub use grid::{default_grid, grid_search_lambdas, write_score_table, Evaluation, GridEntry, GridResult, GridSpec};

/// Which textual cache rows receive the textual directions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextualPositionMode {
    /// Every textual prompt position.
    #[default]
    AllTextual,
    /// Only the last prompt position.
    LastTokenOnly,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    /// Each modified per-head row is rescaled to its pre-intervention L2 norm.
    #[default]
    PerTokenNormPreserving,
    Off,
}

/// Intervention strengths. With `tie_k`/`tie_v` set, the image and text
/// coefficients of keys/values must agree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawConfig")]
pub struct InterventionConfig {
    pub lambda_k_img: f64,
    pub lambda_v_img: f64,
    pub lambda_k_txt: f64,
    pub lambda_v_txt: f64,
    pub tie_k: bool,
    pub tie_v: bool,
    #[serde(default)]
    pub textual_position_mode: TextualPositionMode,
    #[serde(default)]
    pub normalization_mode: NormalizationMode,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        Self::tied(0.0, 0.0)
    }
}

impl InterventionConfig {
    /// Same key strength for both modalities, same value strength for both.
    pub fn tied(lambda_k: f64, lambda_v: f64) -> Self {
        Self {
            lambda_k_img: lambda_k,
            lambda_v_img: lambda_v,
            lambda_k_txt: lambda_k,
            lambda_v_txt: lambda_v,
            tie_k: true,
            tie_v: true,
            textual_position_mode: TextualPositionMode::default(),
            normalization_mode: NormalizationMode::default(),
        }
    }

    pub fn with_textual_mode(mut self, mode: TextualPositionMode) -> Self {
        self.textual_position_mode = mode;
        self
    }

    pub fn with_normalization(mut self, mode: NormalizationMode) -> Self {
        self.normalization_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_k_img, self.lambda_v_img, self.lambda_k_txt, self.lambda_v_txt];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(PtiError::InvalidConfig("lambda values must be finite".into()));
        }
        if self.tie_k && self.lambda_k_img != self.lambda_k_txt {
            return Err(PtiError::InvalidConfig(format!(
                "tie_k set but lambda_k_img {} != lambda_k_txt {}",
                self.lambda_k_img, self.lambda_k_txt
            )));
        }
        if self.tie_v && self.lambda_v_img != self.lambda_v_txt {
            return Err(PtiError::InvalidConfig(format!(
                "tie_v set but lambda_v_img {} != lambda_v_txt {}",
                self.lambda_v_img, self.lambda_v_txt
            )));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        [self.lambda_k_img, self.lambda_v_img, self.lambda_k_txt, self.lambda_v_txt]
            .iter()
            .all(|v| *v == 0.0)
    }

    pub fn normalize(&self) -> bool {
        self.normalization_mode == NormalizationMode::PerTokenNormPreserving
    }
}

#[derive(Deserialize)]
struct RawConfig {
    lambda_k_img: f64,
    lambda_v_img: f64,
    lambda_k_txt: f64,
    lambda_v_txt: f64,
    #[serde(default = "yes")]
    tie_k: bool,
    #[serde(default = "yes")]
    tie_v: bool,
    #[serde(default)]
    textual_position_mode: TextualPositionMode,
    #[serde(default)]
    normalization_mode: NormalizationMode,
}

fn yes() -> bool {
    true
}

impl TryFrom<RawConfig> for InterventionConfig {
    type Error = PtiError;

    fn try_from(r: RawConfig) -> Result<Self> {
        let cfg = Self {
            lambda_k_img: r.lambda_k_img,
            lambda_v_img: r.lambda_v_img,
            lambda_k_txt: r.lambda_k_txt,
            lambda_v_txt: r.lambda_v_txt,
            tie_k: r.tie_k,
            tie_v: r.tie_v,
            textual_position_mode: r.textual_position_mode,
            normalization_mode: r.normalization_mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_defaults() {
        let cfg = InterventionConfig::tied(0.3, 0.7).with_textual_mode(TextualPositionMode::LastTokenOnly);
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"last_token_only\""));
        assert!(text.contains("\"per_token_norm_preserving\""));
        assert_eq!(serde_json::from_str::<InterventionConfig>(&text).unwrap(), cfg);

        let minimal = r#"{"lambda_k_img":0.1,"lambda_v_img":0.2,"lambda_k_txt":0.1,"lambda_v_txt":0.2}"#;
        let cfg: InterventionConfig = serde_json::from_str(minimal).unwrap();
        assert!(cfg.tie_k && cfg.tie_v && cfg.normalize());
        assert_eq!(cfg.textual_position_mode, TextualPositionMode::AllTextual);
    }

    #[test]
    fn tie_violations_rejected() {
        let bad = r#"{"lambda_k_img":0.1,"lambda_v_img":0.2,"lambda_k_txt":0.5,"lambda_v_txt":0.2}"#;
        assert!(serde_json::from_str::<InterventionConfig>(bad).is_err());
        let untied = r#"{"lambda_k_img":0.1,"lambda_v_img":0.2,"lambda_k_txt":0.5,"lambda_v_txt":0.2,"tie_k":false}"#;
        assert!(serde_json::from_str::<InterventionConfig>(untied).is_ok());
        let mut cfg = InterventionConfig::tied(0.0, 0.0);
        cfg.lambda_v_txt = f64::INFINITY;
        cfg.tie_v = false;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_detection() {
        assert!(InterventionConfig::default().is_zero());
        assert!(!InterventionConfig::tied(0.0, 0.1).is_zero());
    }
}
