// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pre-norm transformer decoder with explicit prefill and cached decode.
//!
//! Block: `x += Attn(LN(x))`, then `x += MLP(LN(x))` with a GELU MLP.
//! Learned absolute positions are added to the input before layer 0, so a
//! cached key is a complete function of its position's input and the
//! steering additions on the cache stay purely additive.
//!
//! In test mode layer-norm, MLP, positional addition and the attention
//! output projection are skipped: each layer reduces to
//! `x += softmax(q Kᵀ/√d_h) V` and logits are `x · head`.
//!
//! Three independent paths compute the same function: [`prefill`] works a
//! whole prompt with matrix products, [`decode_step`] works one row against
//! the cache, and [`attention_oracle`] uses plain loops with an explicit
//! causal mask and no cache.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use crate::cache::KVCache;
use crate::error::{PtiError, Result};
use crate::model::{LayerWeights, Weights};
use crate::sequence::ModalitySegmentedSequence;
use crate::trace::TraceStep;

const LN_EPS: f64 = 1e-5;

/// Parameter-free layer normalisation.
pub fn layer_norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.iter().map(|v| (v - mean) * inv).collect()
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Max-subtracted softmax in place.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

fn layer_norm_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let normed = layer_norm(row.as_slice().expect("standard layout"));
        row.assign(&ArrayView1::from(&normed));
    }
    out
}

fn check_sequence(weights: &Weights, seq: &ModalitySegmentedSequence) -> Result<()> {
    let cfg = weights.config();
    if seq.is_empty() {
        return Err(PtiError::Empty("input sequence"));
    }
    if seq.len() > cfg.max_seq_len {
        return Err(PtiError::SequenceTooLong {
            len: seq.len(),
            max: cfg.max_seq_len,
        });
    }
    if seq.width() != cfg.hidden_dim {
        return Err(PtiError::Shape(format!(
            "sequence width {} != hidden_dim {}",
            seq.width(),
            cfg.hidden_dim
        )));
    }
    if seq.embeddings().iter().any(|v| !v.is_finite()) {
        return Err(PtiError::NonFinite("input embeddings".into()));
    }
    Ok(())
}

/// Result of the prefill pass.
#[derive(Debug, Clone)]
pub struct Prefill {
    pub cache: KVCache,
    /// Final-layer hidden state of position `N_x - 1` (before the final norm).
    pub last_hidden: Vec<f64>,
    /// Final-layer hidden states of every prompt position.
    pub hidden_states: Array2<f64>,
}

/// Runs the prompt through every layer, filling the cache with
/// `K^l = X^l W_K^l` and `V^l = X^l W_V^l` per head.
pub fn prefill(weights: &Weights, seq: &ModalitySegmentedSequence) -> Result<Prefill> {
    check_sequence(weights, seq)?;
    let cfg = weights.config();
    let tensors = weights.tensors();
    let n = seq.len();
    let d = cfg.hidden_dim;
    let dh = cfg.head_dim;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x = seq.embeddings().to_owned();
    if !cfg.test_mode {
        x += &tensors.position_embedding.slice(s![..n, ..]);
    }
    let mut cache = KVCache::new(
        cfg.num_layers,
        cfg.num_heads,
        dh,
        cfg.max_seq_len,
        weights.fingerprint().to_owned(),
    );

    for (l, lw) in tensors.layers.iter().enumerate() {
        let h = if cfg.test_mode { x.clone() } else { layer_norm_rows(&x) };
        let q = h.dot(&lw.w_q);
        let k = h.dot(&lw.w_k);
        let v = h.dot(&lw.w_v);
        let layer = cache.layer_mut(l);
        for pos in 0..n {
            layer.push(
                k.row(pos).as_slice().expect("standard layout"),
                v.row(pos).as_slice().expect("standard layout"),
            );
        }

        let mut attn = Array2::<f64>::zeros((n, d));
        for head in 0..cfg.num_heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut probs = qh.dot(&kh.t()) * scale;
            for (i, mut row) in probs.axis_iter_mut(Axis(0)).enumerate() {
                let row = row.as_slice_mut().expect("standard layout");
                softmax_in_place(&mut row[..=i]);
                row[i + 1..].fill(0.0);
            }
            attn.slice_mut(cols).assign(&probs.dot(&vh));
        }
        let attn_out = if cfg.test_mode { attn } else { attn.dot(&lw.w_o) };
        x += &attn_out;
        if !cfg.test_mode {
            let hidden = layer_norm_rows(&x).dot(&lw.mlp_in).mapv(gelu);
            x += &hidden.dot(&lw.mlp_out);
        }
    }

    cache.seal_origin();
    Ok(Prefill {
        cache,
        last_hidden: x.row(n - 1).to_vec(),
        hidden_states: x,
    })
}

/// Output of one cached decode step.
#[derive(Debug, Clone)]
pub struct DecodeStep {
    pub logits: Vec<f64>,
    /// Final-layer hidden state of the new position (before the final norm).
    pub hidden: Vec<f64>,
    /// Per-layer attention output added to the residual stream.
    pub attention_outputs: Vec<Vec<f64>>,
    /// Attention rows used at this step, present when recording.
    pub trace_rows: Option<TraceStep>,
}

/// Appends one token to the cache and returns next-token logits.
pub fn decode_step(weights: &Weights, cache: &mut KVCache, x_t: &[f64], record: bool) -> Result<DecodeStep> {
    let cfg = weights.config();
    if cache.model_fingerprint() != weights.fingerprint() {
        return Err(PtiError::FingerprintMismatch {
            expected: weights.fingerprint().to_owned(),
            found: cache.model_fingerprint().to_owned(),
        });
    }
    if cache.num_layers() != cfg.num_layers {
        return Err(PtiError::Shape(format!(
            "cache has {} layers, model has {}",
            cache.num_layers(),
            cfg.num_layers
        )));
    }
    if x_t.len() != cfg.hidden_dim {
        return Err(PtiError::Shape(format!(
            "input width {} != hidden_dim {}",
            x_t.len(),
            cfg.hidden_dim
        )));
    }
    if x_t.iter().any(|v| !v.is_finite()) {
        return Err(PtiError::NonFinite("decode input".into()));
    }
    cache.ensure_capacity()?;

    let tensors = weights.tensors();
    let pos = cache.len();
    let n = pos + 1;
    let mut x = Array1::from(x_t.to_vec());
    if !cfg.test_mode {
        x += &tensors.position_embedding.row(pos);
    }

    let mut rows = record.then(|| Vec::with_capacity(cfg.num_layers * cfg.num_heads * n));
    let mut attention_outputs = Vec::with_capacity(cfg.num_layers);
    for (l, lw) in tensors.layers.iter().enumerate() {
        let attn_out = attend_one(cfg.test_mode, cfg.head_dim, lw, &x, cache, l, rows.as_mut());
        x += &attn_out;
        attention_outputs.push(attn_out.to_vec());
        if !cfg.test_mode {
            let normed = layer_norm(x.as_slice().expect("contiguous"));
            let hidden = vec_mat(&normed, &lw.mlp_in).mapv(gelu);
            x += &vec_mat(hidden.as_slice().expect("contiguous"), &lw.mlp_out);
        }
    }

    let logits = if cfg.test_mode {
        vec_mat(x.as_slice().expect("contiguous"), &tensors.output_head)
    } else {
        vec_mat(&layer_norm(x.as_slice().expect("contiguous")), &tensors.output_head)
    };
    Ok(DecodeStep {
        logits: logits.to_vec(),
        hidden: x.to_vec(),
        attention_outputs,
        trace_rows: rows.map(|w| TraceStep::new(n, w)),
    })
}

fn attend_one(
    test_mode: bool,
    dh: usize,
    lw: &LayerWeights,
    x: &Array1<f64>,
    cache: &mut KVCache,
    layer: usize,
    rows: Option<&mut Vec<f64>>,
) -> Array1<f64> {
    let normed;
    let h = if test_mode {
        x.as_slice().expect("contiguous")
    } else {
        normed = layer_norm(x.as_slice().expect("contiguous"));
        &normed
    };
    let q = vec_mat(h, &lw.w_q);
    let k = vec_mat(h, &lw.w_k);
    let v = vec_mat(h, &lw.w_v);
    let lc = cache.layer_mut(layer);
    lc.push(k.as_slice().expect("contiguous"), v.as_slice().expect("contiguous"));

    let n = lc.len();
    let scale = 1.0 / (dh as f64).sqrt();
    let q = q.as_slice().expect("contiguous");
    let mut out = vec![0.0; q.len()];
    let mut probs = vec![0.0; n];
    let mut rows = rows;
    for head in 0..lc.num_heads() {
        let qh = &q[head * dh..(head + 1) * dh];
        for (j, p) in probs.iter_mut().enumerate() {
            *p = dot(qh, lc.key(head, j)) * scale;
        }
        softmax_in_place(&mut probs);
        let oh = &mut out[head * dh..(head + 1) * dh];
        for (j, p) in probs.iter().enumerate() {
            for (o, v) in oh.iter_mut().zip(lc.value(head, j)) {
                *o += p * v;
            }
        }
        if let Some(r) = rows.as_deref_mut() {
            r.extend_from_slice(&probs);
        }
    }
    if test_mode {
        Array1::from(out)
    } else {
        vec_mat(&out, &lw.w_o)
    }
}

/// Row vector times matrix. A plain row-major sweep is much faster than
/// ndarray's generic path for the single-row products of a decode step.
fn vec_mat(x: &[f64], w: &Array2<f64>) -> Array1<f64> {
    let Some(ws) = w.as_slice() else {
        return ArrayView1::from(x).dot(w);
    };
    let cols = w.ncols();
    let mut out = vec![0.0; cols];
    for (xi, row) in x.iter().zip(ws.chunks_exact(cols)) {
        for (o, wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
    Array1::from(out)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cache-free reference: full causal self-attention over the whole
/// sequence, computed with explicit loops. Returns final-layer hidden
/// states (`N_x × D`, before the final norm).
pub fn attention_oracle(weights: &Weights, seq: &ModalitySegmentedSequence) -> Result<Array2<f64>> {
    check_sequence(weights, seq)?;
    let cfg = weights.config();
    let tensors = weights.tensors();
    let n = seq.len();
    let d = cfg.hidden_dim;
    let dh = cfg.head_dim;

    let mut xs: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..d)
                .map(|c| {
                    let e = seq.embeddings()[[i, c]];
                    if cfg.test_mode {
                        e
                    } else {
                        e + tensors.position_embedding[[i, c]]
                    }
                })
                .collect()
        })
        .collect();

    for lw in &tensors.layers {
        let hs: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| if cfg.test_mode { x.clone() } else { layer_norm(x) })
            .collect();
        let qs: Vec<Vec<f64>> = hs.iter().map(|h| naive_vecmat(h, &lw.w_q)).collect();
        let ks: Vec<Vec<f64>> = hs.iter().map(|h| naive_vecmat(h, &lw.w_k)).collect();
        let vs: Vec<Vec<f64>> = hs.iter().map(|h| naive_vecmat(h, &lw.w_v)).collect();

        let mut next = xs.clone();
        for i in 0..n {
            let mut concat = vec![0.0; d];
            for head in 0..cfg.num_heads {
                let r = head * dh..(head + 1) * dh;
                let mut scores: Vec<f64> = (0..n)
                    .map(|j| {
                        if j > i {
                            f64::NEG_INFINITY
                        } else {
                            let mut acc = 0.0;
                            for c in r.clone() {
                                acc += qs[i][c] * ks[j][c];
                            }
                            acc / (dh as f64).sqrt()
                        }
                    })
                    .collect();
                softmax_in_place(&mut scores);
                for (j, p) in scores.iter().enumerate() {
                    for c in r.clone() {
                        concat[c] += p * vs[j][c];
                    }
                }
            }
            let attn = if cfg.test_mode { concat } else { naive_vecmat(&concat, &lw.w_o) };
            for c in 0..d {
                next[i][c] += attn[c];
            }
            if !cfg.test_mode {
                let hidden: Vec<f64> = naive_vecmat(&layer_norm(&next[i]), &lw.mlp_in)
                    .into_iter()
                    .map(gelu)
                    .collect();
                let mlp = naive_vecmat(&hidden, &lw.mlp_out);
                for c in 0..d {
                    next[i][c] += mlp[c];
                }
            }
        }
        xs = next;
    }

    let flat: Vec<f64> = xs.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((n, d), flat).expect("n x d"))
}

fn naive_vecmat(x: &[f64], w: &Array2<f64>) -> Vec<f64> {
    let (rows, cols) = w.dim();
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (c, o) in out.iter_mut().enumerate() {
            *o += x[r] * w[[r, c]];
        }
    }
    out
}
