// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary weights format.
//!
//! Little-endian throughout:
//!
//! ```text
//! "PTIW" | version: u32 | L | N_h | d_h | D | vocab_size | max_seq_len   (u32 each)
//! body: f32 row-major tensors in the order
//!       token_embedding, position_embedding,
//!       per layer: w_q, w_k, w_v, w_o, mlp_in, mlp_out,
//!       output_head
//! ```
//!
//! A companion text manifest lists each tensor's shape and byte offset.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{PtiError, Result};
use crate::model::{ModelConfig, WeightTensors, Weights};

pub const MAGIC: &[u8; 4] = b"PTIW";
pub const FORMAT_VERSION: u32 = 1;
/// Magic plus seven `u32` fields.
pub const HEADER_LEN: usize = 4 + 7 * 4;

/// Decoded header fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightsHeader {
    pub version: u32,
    pub num_layers: u32,
    pub num_heads: u32,
    pub head_dim: u32,
    pub hidden_dim: u32,
    pub vocab_size: u32,
    pub max_seq_len: u32,
}

impl WeightsHeader {
    fn from_config(cfg: &ModelConfig) -> Result<Self> {
        let to_u32 = |v: usize| {
            u32::try_from(v).map_err(|_| PtiError::InvalidConfig(format!("{v} does not fit in u32")))
        };
        Ok(Self {
            version: FORMAT_VERSION,
            num_layers: to_u32(cfg.num_layers)?,
            num_heads: to_u32(cfg.num_heads)?,
            head_dim: to_u32(cfg.head_dim)?,
            hidden_dim: to_u32(cfg.hidden_dim)?,
            vocab_size: to_u32(cfg.vocab_size)?,
            max_seq_len: to_u32(cfg.max_seq_len)?,
        })
    }

    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..4].copy_from_slice(MAGIC);
        let fields = [
            self.version,
            self.num_layers,
            self.num_heads,
            self.head_dim,
            self.hidden_dim,
            self.vocab_size,
            self.max_seq_len,
        ];
        for (i, f) in fields.iter().enumerate() {
            out[4 + 4 * i..8 + 4 * i].copy_from_slice(&f.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(PtiError::Format("weights header truncated".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(PtiError::Format("bad magic, expected PTIW".into()));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let header = Self {
            version: field(0),
            num_layers: field(1),
            num_heads: field(2),
            head_dim: field(3),
            hidden_dim: field(4),
            vocab_size: field(5),
            max_seq_len: field(6),
        };
        if header.version != FORMAT_VERSION {
            return Err(PtiError::Format(format!(
                "unsupported weights format version {}",
                header.version
            )));
        }
        Ok(header)
    }

    /// Config implied by the header. The seed is not stored in the file.
    pub fn to_config(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            num_layers: self.num_layers as usize,
            num_heads: self.num_heads as usize,
            head_dim: self.head_dim as usize,
            hidden_dim: self.hidden_dim as usize,
            vocab_size: self.vocab_size as usize,
            max_seq_len: self.max_seq_len as usize,
            rng_seed: 0,
            test_mode: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Serializes weights to bytes. Test-mode models are not representable.
pub fn encode_weights(weights: &Weights) -> Result<Vec<u8>> {
    let cfg = weights.config();
    if cfg.test_mode {
        return Err(PtiError::InvalidConfig(
            "test-mode models cannot be written to a weights file".into(),
        ));
    }
    let header = WeightsHeader::from_config(cfg)?;
    let mut out = header.encode().to_vec();
    for (_, tensor) in weights.tensors().in_file_order() {
        out.reserve(tensor.len() * 4);
        for v in tensor.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_weights(bytes: &[u8]) -> Result<Weights> {
    let header = WeightsHeader::decode(bytes)?;
    let cfg = header.to_config()?;
    let mut tensors = WeightTensors::zeros(&cfg);
    let mut offset = HEADER_LEN;
    {
        let mut slots: Vec<&mut Array2<f64>> = vec![&mut tensors.token_embedding, &mut tensors.position_embedding];
        for layer in tensors.layers.iter_mut() {
            slots.push(&mut layer.w_q);
            slots.push(&mut layer.w_k);
            slots.push(&mut layer.w_v);
            slots.push(&mut layer.w_o);
            slots.push(&mut layer.mlp_in);
            slots.push(&mut layer.mlp_out);
        }
        slots.push(&mut tensors.output_head);
        for slot in slots {
            let n = slot.len() * 4;
            let chunk = bytes
                .get(offset..offset + n)
                .ok_or_else(|| PtiError::Format("weights body truncated".into()))?;
            for (dst, src) in slot.iter_mut().zip(chunk.chunks_exact(4)) {
                *dst = f32::from_le_bytes(src.try_into().unwrap()) as f64;
            }
            offset += n;
        }
    }
    if offset != bytes.len() {
        return Err(PtiError::Format(format!(
            "{} trailing bytes after weights body",
            bytes.len() - offset
        )));
    }
    Weights::new(cfg, tensors)
}

/// Human-readable tensor table: `name rows cols offset bytes`.
pub fn tensor_manifest(weights: &Weights) -> String {
    let cfg = weights.config();
    let mut out = format!(
        "# PTIW v{FORMAT_VERSION} L={} N_h={} d_h={} D={} vocab={} max_seq_len={} fingerprint={}\n",
        cfg.num_layers,
        cfg.num_heads,
        cfg.head_dim,
        cfg.hidden_dim,
        cfg.vocab_size,
        cfg.max_seq_len,
        weights.fingerprint()
    );
    out.push_str("# name rows cols offset bytes\n");
    let mut offset = HEADER_LEN;
    for (name, tensor) in weights.tensors().in_file_order() {
        let (rows, cols) = tensor.dim();
        let bytes = rows * cols * 4;
        out.push_str(&format!("{name} {rows} {cols} {offset} {bytes}\n"));
        offset += bytes;
    }
    out
}

pub fn save_weights(weights: &Weights, path: &Path) -> Result<()> {
    let bytes = encode_weights(weights)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<Weights> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_weights(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Weights {
        Weights::random(ModelConfig::new(2, 2, 4, 32, 16, 42).unwrap()).unwrap()
    }

    #[test]
    fn header_round_trip() {
        let bytes = encode_weights(&small()).unwrap();
        let h = WeightsHeader::decode(&bytes).unwrap();
        assert_eq!(
            (h.num_layers, h.num_heads, h.head_dim, h.hidden_dim, h.vocab_size, h.max_seq_len),
            (2, 2, 4, 8, 32, 16)
        );
        assert_eq!(&bytes[..4], b"PTIW");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn body_round_trip_is_lossless() {
        let w = small();
        let back = decode_weights(&encode_weights(&w).unwrap()).unwrap();
        assert_eq!(back.tensors(), w.tensors());
        assert_eq!(back.fingerprint(), w.fingerprint());
    }

    #[test]
    fn body_layout_matches_manifest_offsets() {
        let w = small();
        let bytes = encode_weights(&w).unwrap();
        let manifest = tensor_manifest(&w);
        let line = manifest.lines().find(|l| l.starts_with("layers.1.w_k ")).unwrap();
        let offset: usize = line.split_whitespace().nth(3).unwrap().parse().unwrap();
        let first = f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
        assert_eq!(first as f64, w.tensors().layers[1].w_k[[0, 0]]);
        let last = manifest.lines().last().unwrap();
        let fields: Vec<usize> = last.split_whitespace().skip(3).map(|s| s.parse().unwrap()).collect();
        assert_eq!(fields[0] + fields[1], bytes.len());
    }

    #[test]
    fn rejects_corrupt_input() {
        let mut bytes = encode_weights(&small()).unwrap();
        assert!(decode_weights(&bytes[..bytes.len() - 1]).is_err());
        bytes.push(0);
        assert!(decode_weights(&bytes).is_err());
        bytes[0] = b'X';
        assert!(matches!(decode_weights(&bytes), Err(PtiError::Format(_))));
    }

    #[test]
    fn test_mode_is_not_serializable() {
        let cfg = ModelConfig::new(1, 1, 2, 4, 4, 0).unwrap().with_test_mode(true);
        let w = Weights::random(cfg).unwrap();
        assert!(encode_weights(&w).is_err());
    }
}
