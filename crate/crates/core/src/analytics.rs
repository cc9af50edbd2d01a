// SPDX-License-Identifier: MIT OR Apache-2.0

//! Visual-attention statistics over recorded decode traces.
//!
//! All functions are pure: the same trace always yields bit-identical
//! numbers.

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::directions::ObjectMask;
use crate::error::{PtiError, Result};
use crate::trace::AttentionTrace;

/// A ΔR stage is flagged when `ε` makes up more than this share of its
/// denominator.
pub const EPSILON_GUARD_SHARE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticsConfig {
    pub epsilon: f64,
    pub num_stages: usize,
}

impl Default for AnalyticsConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-9,
            num_stages: 4,
        }
    }
}

impl AnalyticsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(PtiError::InvalidConfig(format!("epsilon {} must be positive", self.epsilon)));
        }
        if self.num_stages == 0 {
            return Err(PtiError::InvalidConfig("num_stages must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-stage values sampled at steps `t_0..t_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSeries {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
    /// Per-stage flag; set on ΔR stages whose denominator is dominated by `ε`.
    pub flags: Vec<bool>,
}

impl StageSeries {
    pub fn num_stages(&self) -> usize {
        self.values.len().saturating_sub(1)
    }

    /// Writes `stage,k,t_k,value,flag`; `stage` is the progress percentage.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["stage", "k", "t_k", "value", "flag"])?;
        let k_max = self.num_stages().max(1) as f64;
        for (k, ((t, v), f)) in self.indices.iter().zip(&self.values).zip(&self.flags).enumerate() {
            w.write_record([
                (100.0 * k as f64 / k_max).to_string(),
                k.to_string(),
                t.to_string(),
                v.to_string(),
                u8::from(*f).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `P^t_img`: visual share of each attention row, averaged over layers and heads.
pub fn visual_attention_proportion(
    trace: &AttentionTrace,
    t: usize,
    visual_indices: &[usize],
    cfg: &AnalyticsConfig,
) -> Result<f64> {
    cfg.validate()?;
    let step = trace.step(t)?;
    if let Some(bad) = visual_indices.iter().find(|v| **v >= step.len()) {
        return Err(PtiError::InvalidIndices(format!(
            "visual index {bad} outside attention row of length {}",
            step.len()
        )));
    }
    if visual_indices.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for l in 0..trace.num_layers() {
        for h in 0..trace.num_heads() {
            let row = trace.row(t, l, h)?;
            let visual: f64 = visual_indices.iter().map(|&v| row[v]).sum();
            let all: f64 = row.iter().sum();
            total += visual / (all + cfg.epsilon);
        }
    }
    Ok(total / (trace.num_layers() * trace.num_heads()) as f64)
}

/// `t_k = ⌊k·N/K⌋` for `k = 0..=K`, with `N` itself clamped to the last step.
pub fn stage_indices(total_steps: usize, num_stages: usize) -> Result<Vec<usize>> {
    if total_steps == 0 {
        return Err(PtiError::Empty("generation steps"));
    }
    if num_stages == 0 {
        return Err(PtiError::InvalidConfig("num_stages must be at least 1".into()));
    }
    Ok((0..=num_stages)
        .map(|k| (k * total_steps / num_stages).min(total_steps - 1))
        .collect())
}

/// `P_img` sampled at the stage steps of a trace.
pub fn proportion_series(
    trace: &AttentionTrace,
    visual_indices: &[usize],
    cfg: &AnalyticsConfig,
) -> Result<StageSeries> {
    let indices = stage_indices(trace.num_steps(), cfg.num_stages)?;
    let values = indices
        .iter()
        .map(|&t| visual_attention_proportion(trace, t, visual_indices, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(StageSeries {
        flags: vec![false; indices.len()],
        indices,
        values,
    })
}

/// `ΔR^k = 100·(P̂ − P)/(|P| + ε)`. Stage indices are taken from `before`.
pub fn relative_change_rate(before: &StageSeries, after: &StageSeries, cfg: &AnalyticsConfig) -> Result<StageSeries> {
    cfg.validate()?;
    if before.values.len() != after.values.len() {
        return Err(PtiError::LengthMismatch {
            what: "stage series",
            expected: before.values.len(),
            found: after.values.len(),
        });
    }
    let mut values = Vec::with_capacity(before.values.len());
    let mut flags = Vec::with_capacity(before.values.len());
    for (p, q) in before.values.iter().zip(&after.values) {
        let denom = p.abs() + cfg.epsilon;
        values.push(100.0 * (q - p) / denom);
        flags.push(cfg.epsilon / denom > EPSILON_GUARD_SHARE);
    }
    Ok(StageSeries {
        indices: before.indices.clone(),
        values,
        flags,
    })
}

/// `Ã[v] = A[v] / Σ_{j∈I_img} A[j]` over the visual positions, in index order.
pub fn renormalized_visual_attention(row: &[f64], visual_indices: &[usize]) -> Result<Vec<f64>> {
    if let Some(bad) = visual_indices.iter().find(|v| **v >= row.len()) {
        return Err(PtiError::InvalidIndices(format!(
            "visual index {bad} outside attention row of length {}",
            row.len()
        )));
    }
    if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(PtiError::NonFinite("attention row must be finite and non-negative".into()));
    }
    let mass: f64 = visual_indices.iter().map(|&v| row[v]).sum();
    if mass <= 0.0 {
        return Err(PtiError::ZeroVisualMass);
    }
    Ok(visual_indices.iter().map(|&v| row[v] / mass).collect())
}

/// `S_obj = Σ_v Ã[v]·M[v]`.
pub fn object_attention_score(distribution: &[f64], mask: &ObjectMask) -> Result<f64> {
    if distribution.len() != mask.len() {
        return Err(PtiError::LengthMismatch {
            what: "object mask",
            expected: distribution.len(),
            found: mask.len(),
        });
    }
    Ok(distribution
        .iter()
        .zip(mask.values())
        .filter(|(_, m)| **m == 1)
        .map(|(a, _)| a)
        .sum())
}

/// `S^t_obj(l, h)` for every layer and head at step `t`.
pub fn object_score_grid(
    trace: &AttentionTrace,
    t: usize,
    visual_indices: &[usize],
    mask: &ObjectMask,
) -> Result<Array2<f64>> {
    let mut grid = Array2::zeros((trace.num_layers(), trace.num_heads()));
    for l in 0..trace.num_layers() {
        for h in 0..trace.num_heads() {
            let dist = renormalized_visual_attention(trace.row(t, l, h)?, visual_indices)?;
            grid[[l, h]] = object_attention_score(&dist, mask)?;
        }
    }
    Ok(grid)
}

/// `S_obj(l, h)` averaged over every recorded step.
pub fn mean_object_score_grid(
    trace: &AttentionTrace,
    visual_indices: &[usize],
    mask: &ObjectMask,
) -> Result<Array2<f64>> {
    if trace.num_steps() == 0 {
        return Err(PtiError::Empty("attention trace"));
    }
    let mut total = Array2::zeros((trace.num_layers(), trace.num_heads()));
    for t in 0..trace.num_steps() {
        total += &object_score_grid(trace, t, visual_indices, mask)?;
    }
    Ok(total / trace.num_steps() as f64)
}

/// `S_obj` averaged over every recorded step, layer and head.
pub fn mean_object_score(trace: &AttentionTrace, visual_indices: &[usize], mask: &ObjectMask) -> Result<f64> {
    Ok(mean_object_score_grid(trace, visual_indices, mask)?.mean().expect("non-empty grid"))
}

/// Vanilla and intervened `P_img` series with the `ΔR` between them.
#[derive(Debug, Clone, PartialEq)]
pub struct StageComparison {
    pub before: StageSeries,
    pub after: StageSeries,
    pub delta_r: StageSeries,
}

impl StageComparison {
    pub fn new(
        before: &AttentionTrace,
        after: &AttentionTrace,
        visual_indices: &[usize],
        cfg: &AnalyticsConfig,
    ) -> Result<Self> {
        let before = proportion_series(before, visual_indices, cfg)?;
        let after = proportion_series(after, visual_indices, cfg)?;
        let delta_r = relative_change_rate(&before, &after, cfg)?;
        Ok(Self { before, after, delta_r })
    }

    /// Writes `stage,k,t_before,t_after,p_img_before,p_img_after,delta_r,flag`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["stage", "k", "t_before", "t_after", "p_img_before", "p_img_after", "delta_r", "flag"])?;
        let k_max = self.delta_r.num_stages().max(1) as f64;
        for k in 0..self.delta_r.values.len() {
            w.write_record([
                (100.0 * k as f64 / k_max).to_string(),
                k.to_string(),
                self.before.indices[k].to_string(),
                self.after.indices[k].to_string(),
                self.before.values[k].to_string(),
                self.after.values[k].to_string(),
                self.delta_r.values[k].to_string(),
                u8::from(self.delta_r.flags[k]).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `ΔS(l, h) = Ŝ(l, h) − S(l, h)`.
pub fn object_attention_shift(before: &Array2<f64>, after: &Array2<f64>) -> Result<Array2<f64>> {
    if before.dim() != after.dim() {
        return Err(PtiError::Shape(format!(
            "score grids {:?} and {:?} differ",
            before.dim(),
            after.dim()
        )));
    }
    Ok(after - before)
}

/// Writes a `layer,head,delta` heatmap table.
pub fn write_heatmap_csv<W: Write>(delta: &Array2<f64>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "head", "delta"])?;
    for ((l, h), v) in delta.indexed_iter() {
        w.write_record([l.to_string(), h.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::TraceStep;

    fn uniform_trace(layers: usize, heads: usize, origin: usize, steps: usize) -> AttentionTrace {
        let mut t = AttentionTrace::new(layers, heads, origin);
        for s in 0..steps {
            let n = origin + s + 1;
            t.push(TraceStep::new(n, vec![1.0 / n as f64; layers * heads * n]));
        }
        t
    }

    #[test]
    fn uniform_rows_give_visual_share() {
        let t = uniform_trace(2, 3, 9, 1);
        let p = visual_attention_proportion(&t, 0, &[0, 1, 2, 3], &AnalyticsConfig::default()).unwrap();
        assert!((p - 0.4).abs() < 1e-8);
        assert_eq!(visual_attention_proportion(&t, 0, &[], &AnalyticsConfig::default()).unwrap(), 0.0);
        assert!(visual_attention_proportion(&t, 1, &[0], &AnalyticsConfig::default()).is_err());
    }

    #[test]
    fn concentrated_visual_mass() {
        let mut t = AttentionTrace::new(1, 1, 2);
        t.push(TraceStep::new(3, vec![0.5, 0.5, 0.0]));
        let p = visual_attention_proportion(&t, 0, &[0, 1], &AnalyticsConfig::default()).unwrap();
        assert!((p - 1.0).abs() < 1e-8 && p < 1.0);
    }

    #[test]
    fn hand_built_trace_matches_flat_sum() {
        let rows = [
            [0.1, 0.2, 0.7],
            [0.3, 0.3, 0.4],
            [0.05, 0.9, 0.05],
            [0.6, 0.1, 0.3],
        ];
        let mut t = AttentionTrace::new(2, 2, 2);
        t.push(TraceStep::new(3, rows.iter().flatten().copied().collect()));
        let eps = 1e-9;
        let mut oracle = 0.0;
        for r in &rows {
            oracle += (r[0] + r[2]) / (r[0] + r[1] + r[2] + eps);
        }
        oracle /= 4.0;
        let p = visual_attention_proportion(&t, 0, &[0, 2], &AnalyticsConfig::default()).unwrap();
        assert!((p - oracle).abs() < 1e-12);
    }

    #[test]
    fn stage_index_examples() {
        assert_eq!(stage_indices(100, 4).unwrap(), vec![0, 25, 50, 75, 99]);
        assert_eq!(stage_indices(17, 1).unwrap(), vec![0, 16]);
        assert_eq!(stage_indices(3, 5).unwrap(), vec![0, 0, 1, 1, 2, 2]);
        assert!(stage_indices(0, 4).is_err());
        assert!(stage_indices(4, 0).is_err());
    }

    fn series(values: &[f64]) -> StageSeries {
        StageSeries {
            indices: (0..values.len()).collect(),
            values: values.to_vec(),
            flags: vec![false; values.len()],
        }
    }

    #[test]
    fn relative_change_examples() {
        let cfg = AnalyticsConfig::default();
        let r = relative_change_rate(&series(&[0.4]), &series(&[0.5]), &cfg).unwrap();
        assert!((r.values[0] - 25.0).abs() < 1e-6);
        assert!(!r.flags[0]);
        let r = relative_change_rate(&series(&[0.3, 0.2]), &series(&[0.3, 0.2]), &cfg).unwrap();
        assert_eq!(r.values, vec![0.0, 0.0]);
        let r = relative_change_rate(&series(&[0.0]), &series(&[0.1]), &cfg).unwrap();
        assert!((r.values[0] - 1e10).abs() < 1.0);
        assert!(r.flags[0]);
        assert!(relative_change_rate(&series(&[0.1]), &series(&[0.1, 0.2]), &cfg).is_err());
    }

    #[test]
    fn renormalization_examples() {
        let d = renormalized_visual_attention(&[0.1, 0.2, 0.3, 0.4], &[1, 3]).unwrap();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-15 && (d[1] - 2.0 / 3.0).abs() < 1e-15);
        let d = renormalized_visual_attention(&[0.25; 4], &[0, 1, 2]).unwrap();
        assert!(d.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let d = renormalized_visual_attention(&[0.2, 0.8, 0.0], &[0, 1]).unwrap();
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(matches!(
            renormalized_visual_attention(&[0.0, 1.0], &[0]),
            Err(PtiError::ZeroVisualMass)
        ));
    }

    #[test]
    fn object_score_examples() {
        let m = |v: &[u8]| ObjectMask::new(v.to_vec()).unwrap();
        assert_eq!(object_attention_score(&[0.5, 0.3, 0.2], &m(&[1, 0, 1])).unwrap(), 0.7);
        assert_eq!(object_attention_score(&[0.5, 0.5], &m(&[1, 1])).unwrap(), 1.0);
        assert_eq!(object_attention_score(&[0.5, 0.5], &m(&[0, 0])).unwrap(), 0.0);
        assert!(object_attention_score(&[1.0], &m(&[1, 0])).is_err());
    }

    #[test]
    fn shift_grids() {
        let a = Array2::from_shape_fn((2, 3), |(l, h)| (l * 3 + h) as f64 / 10.0);
        assert!(object_attention_shift(&a, &a).unwrap().iter().all(|v| *v == 0.0));
        let b = &a + 0.1;
        assert!(object_attention_shift(&a, &b).unwrap().iter().all(|v| (v - 0.1).abs() < 1e-15));
        assert!(object_attention_shift(&a, &Array2::zeros((3, 2))).is_err());
        let mut buf = Vec::new();
        write_heatmap_csv(&object_attention_shift(&a, &b).unwrap(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.starts_with("layer,head,delta\n0,0,0.1\n"));
    }

    #[test]
    fn stage_csv_layout() {
        let t = uniform_trace(1, 1, 3, 10);
        let s = proportion_series(&t, &[0, 1], &AnalyticsConfig::default()).unwrap();
        assert_eq!(s.indices, vec![0, 2, 5, 7, 9]);
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "stage,k,t_k,value,flag");
        assert_eq!(lines.len(), 6);
        assert!(lines[5].starts_with("100,4,9,"));
        assert!(lines[2].starts_with("25,1,2,"));
    }

    #[test]
    fn object_grid_and_mean() {
        let mut t = AttentionTrace::new(1, 2, 3);
        t.push(TraceStep::new(4, vec![0.1, 0.3, 0.2, 0.4, 0.25, 0.25, 0.25, 0.25]));
        let mask = ObjectMask::new(vec![1, 0, 0]).unwrap();
        let g = object_score_grid(&t, 0, &[0, 1, 2], &mask).unwrap();
        assert!((g[[0, 0]] - 1.0 / 6.0).abs() < 1e-15);
        assert!((g[[0, 1]] - 1.0 / 3.0).abs() < 1e-15);
        let mean = mean_object_score(&t, &[0, 1, 2], &mask).unwrap();
        assert!((mean - 0.25).abs() < 1e-15);
    }

    #[test]
    fn step_averaged_grid() {
        let mut t = AttentionTrace::new(1, 1, 2);
        t.push(TraceStep::new(3, vec![0.6, 0.2, 0.2]));
        t.push(TraceStep::new(4, vec![0.1, 0.3, 0.3, 0.3]));
        let mask = ObjectMask::new(vec![1, 0]).unwrap();
        let g = mean_object_score_grid(&t, &[0, 1], &mask).unwrap();
        // step 0: 0.6 / 0.8, step 1: 0.1 / 0.4
        assert!((g[[0, 0]] - 0.5 * (0.75 + 0.25)).abs() < 1e-15);
        assert!(mean_object_score_grid(&AttentionTrace::new(1, 1, 2), &[0], &mask).is_err());
    }

    #[test]
    fn comparison_csv_matches_series() {
        let before = uniform_trace(1, 1, 3, 10);
        let after = uniform_trace(1, 1, 3, 6);
        let cfg = AnalyticsConfig::default();
        let c = StageComparison::new(&before, &after, &[0, 1], &cfg).unwrap();
        assert_eq!(c.before.indices, vec![0, 2, 5, 7, 9]);
        assert_eq!(c.after.indices, vec![0, 1, 3, 4, 5]);
        let expect = relative_change_rate(&c.before, &c.after, &cfg).unwrap();
        assert_eq!(c.delta_r, expect);
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0], "stage,k,t_before,t_after,p_img_before,p_img_after,delta_r,flag");
        assert!(lines[3].starts_with("50,2,5,3,"));
    }
}
