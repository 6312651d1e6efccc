//! Checkpoint format: one JSON header line, then a little-endian f64 body
//! holding W, b and, when present, the adapter's A and B.

use serde::{Deserialize, Serialize};

use crate::digest::{CanonicalEncoder, Hash32};

use super::params::{DenseParams, LoraAdapter};
use super::ModelError;

const FORMAT: &str = "fedchain-ckpt-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterHeader {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub classes: usize,
    pub features: usize,
    pub version: u64,
    pub adapter: Option<AdapterHeader>,
}

pub fn write_checkpoint(params: &DenseParams, adapter: Option<&LoraAdapter>) -> Vec<u8> {
    let header = CheckpointHeader {
        format: FORMAT.into(),
        classes: params.classes,
        features: params.features,
        version: params.version,
        adapter: adapter.map(|a| AdapterHeader { rank: a.rank, alpha: a.alpha, dropout: a.dropout }),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    let mut body: Vec<&f64> = params.weights.iter().chain(&params.bias).collect();
    if let Some(a) = adapter {
        body.extend(a.a.iter().chain(&a.b));
    }
    out.reserve(body.len() * 8);
    for v in body {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(DenseParams, Option<LoraAdapter>), ModelError> {
    let bad = |m: &str| ModelError::Checkpoint(m.to_string());
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header line"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| ModelError::Checkpoint(format!("header: {e}")))?;
    if header.format != FORMAT {
        return Err(ModelError::Checkpoint(format!("unknown format {:?}", header.format)));
    }
    let body = &bytes[nl + 1..];
    if body.len() % 8 != 0 {
        return Err(bad("body is not a whole number of f64 values"));
    }
    let values: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let (c, f) = (header.classes, header.features);
    let mut expected = c * f + c;
    if let Some(a) = &header.adapter {
        expected += a.rank * f + c * a.rank;
    }
    if values.len() != expected {
        return Err(ModelError::Checkpoint(format!("expected {expected} values, found {}", values.len())));
    }
    let mut rest = values.into_iter();
    let mut take = |n: usize| rest.by_ref().take(n).collect::<Vec<f64>>();
    let params = DenseParams { classes: c, features: f, weights: take(c * f), bias: take(c), version: header.version };
    let adapter = match header.adapter {
        Some(h) => {
            LoraAdapter::validate(h.rank, h.alpha, h.dropout)?;
            Some(LoraAdapter {
                classes: c,
                features: f,
                rank: h.rank,
                alpha: h.alpha,
                dropout: h.dropout,
                a: take(h.rank * f),
                b: take(c * h.rank),
            })
        }
        None => None,
    };
    Ok((params, adapter))
}

/// Digest of the shape and the exact parameter bits. The version is not
/// included.
pub fn params_digest(params: &DenseParams) -> Hash32 {
    let mut raw = Vec::with_capacity((params.weights.len() + params.bias.len()) * 8);
    for v in params.weights.iter().chain(&params.bias) {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    CanonicalEncoder::new().str("params").u64(params.classes as u64).u64(params.features as u64).bytes(&raw).digest()
}
