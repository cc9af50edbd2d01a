// SPDX-License-Identifier: MIT OR Apache-2.0

//! Low-rank denoising of per-sample direction vectors.
//!
//! The mean sample vector is projected onto the span of the top right
//! singular vectors of the raw (uncentered) sample matrix. The raw matrix is
//! used because its row space always contains the mean, so a full-rank
//! projection is exactly the mean and a rank-1 projection keeps the dominant
//! shared direction even when every sample agrees.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};

use crate::error::{PtiError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaOutcome {
    pub direction: Array1<f64>,
    /// Top right singular vectors actually used, each sign-aligned with the mean.
    pub components: Vec<Array1<f64>>,
    pub singular_values: Vec<f64>,
    pub effective_rank: usize,
    /// The numerical rank of the samples was below the requested rank.
    pub clamped: bool,
    /// The sample matrix was all zeros.
    pub degenerate: bool,
}

pub fn pca_denoise(samples: &Array2<f64>, rank: usize) -> Result<PcaOutcome> {
    let (n, d) = samples.dim();
    if n == 0 || d == 0 {
        return Err(PtiError::Empty("sample matrix"));
    }
    if rank == 0 || rank > n.min(d) {
        return Err(PtiError::InvalidConfig(format!(
            "pca rank {rank} outside [1, {}]",
            n.min(d)
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(PtiError::NonFinite("pca samples".into()));
    }
    let mean = samples.mean_axis(ndarray::Axis(0)).expect("n >= 1");
    if samples.iter().all(|v| *v == 0.0) {
        return Ok(PcaOutcome {
            direction: Array1::zeros(d),
            components: Vec::new(),
            singular_values: vec![0.0; n.min(d)],
            effective_rank: 0,
            clamped: true,
            degenerate: true,
        });
    }

    let m = DMatrix::from_fn(n, d, |r, c| samples[[r, c]]);
    let svd = m.svd(false, true);
    let v_t = svd.v_t.as_ref().expect("requested right singular vectors");
    let sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    let tol = sv[0] * (n.max(d) as f64) * f64::EPSILON;
    let numerical_rank = sv.iter().filter(|s| **s > tol).count();
    let effective_rank = rank.min(numerical_rank);

    let mut direction = Array1::<f64>::zeros(d);
    let mut components = Vec::with_capacity(effective_rank);
    for j in 0..effective_rank {
        let mut v = Array1::from_iter(v_t.row(j).iter().copied());
        let along = v.dot(&mean);
        if along < 0.0 {
            v.mapv_inplace(|x| -x);
        }
        direction.scaled_add(along.abs(), &v);
        components.push(v);
    }
    if direction.dot(&mean) < 0.0 {
        direction.mapv_inplace(|x| -x);
    }
    Ok(PcaOutcome {
        direction,
        components,
        singular_values: sv,
        effective_rank,
        clamped: effective_rank < rank,
        degenerate: false,
    })
}
