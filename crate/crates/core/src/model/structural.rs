//! Weight-free decoding ops. They run in real arithmetic on dequantized
//! values and re-enter the ring through `quantize`, so their outputs are
//! deterministic functions of their ring inputs.

use crate::error::{Error, Result};
use crate::ring::{QuantParams, RingMatrix};

pub const RMS_EPS: f64 = 1e-6;

pub fn embed(tokens: &[u32], table: &RingMatrix) -> Result<RingMatrix> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput);
    }
    let vocab = table.rows();
    let mut data = Vec::with_capacity(tokens.len() * table.cols());
    for &t in tokens {
        if t as usize >= vocab {
            return Err(Error::TokenOutOfRange { id: t, vocab });
        }
        data.extend_from_slice(table.row(t as usize));
    }
    RingMatrix::new(tokens.len(), table.cols(), data, table.params())
}

pub fn rms_norm(x: &RingMatrix, gain: &[f64]) -> Result<RingMatrix> {
    if gain.len() != x.cols() {
        return Err(Error::shape(format!("gain of width {} for {} columns", gain.len(), x.cols())));
    }
    let rows: Vec<Vec<f64>> = x
        .dequantize()
        .into_iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            row.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
        })
        .collect();
    RingMatrix::quantize(&rows, x.params())
}

pub fn silu(x: &RingMatrix) -> Result<RingMatrix> {
    let rows: Vec<Vec<f64>> = x
        .dequantize()
        .into_iter()
        .map(|row| row.into_iter().map(|v| v / (1.0 + (-v).exp())).collect())
        .collect();
    RingMatrix::quantize(&rows, x.params())
}

/// Greedy sampler: index of the largest logit, lowest index on ties.
pub fn argmax_token(logits: &RingMatrix) -> u32 {
    let p = logits.params();
    let row = logits.row(logits.rows() - 1);
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if p.to_signed(v) > p.to_signed(row[best]) {
            best = i;
        }
    }
    best as u32
}

/// Cached key and value rows of one layer, all heads side by side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCache {
    width: usize,
    keys: Vec<u64>,
    values: Vec<u64>,
}

impl LayerCache {
    pub fn new(width: usize) -> Self {
        LayerCache { width, keys: Vec::new(), values: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.keys.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn append(&mut self, k: &RingMatrix, v: &RingMatrix) -> Result<()> {
        if k.cols() != self.width || v.shape() != k.shape() {
            return Err(Error::shape(format!(
                "cache append of {:?} / {:?} into width {}",
                k.shape(),
                v.shape(),
                self.width
            )));
        }
        self.keys.extend_from_slice(k.data());
        self.values.extend_from_slice(v.data());
        Ok(())
    }

    /// Drop everything from position `len` on.
    pub fn truncate(&mut self, len: usize) {
        self.keys.truncate(len * self.width);
        self.values.truncate(len * self.width);
    }

    fn key(&self, pos: usize) -> &[u64] {
        &self.keys[pos * self.width..(pos + 1) * self.width]
    }

    fn value(&self, pos: usize) -> &[u64] {
        &self.values[pos * self.width..(pos + 1) * self.width]
    }
}

/// Per-layer key/value cache. Enclave-only state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvCache {
    layers: Vec<LayerCache>,
}

impl KvCache {
    pub fn new(layers: usize, width: usize) -> Self {
        KvCache { layers: (0..layers).map(|_| LayerCache::new(width)).collect() }
    }

    pub fn layer(&self, l: usize) -> &LayerCache {
        &self.layers[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut LayerCache {
        &mut self.layers[l]
    }

    /// Sequence length held (identical across layers between steps).
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, LayerCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Causal multi-head attention for query rows at positions
/// `position..position + q.rows()`. Their keys and values must already be in
/// `cache`.
pub fn attention_structural(
    q: &RingMatrix,
    cache: &LayerCache,
    position: usize,
    heads: usize,
) -> Result<RingMatrix> {
    let n = q.rows();
    if cache.len() != position + n {
        return Err(Error::CacheInconsistent { cached: cache.len(), position: position + n });
    }
    if q.cols() != cache.width || heads == 0 || !q.cols().is_multiple_of(heads) {
        return Err(Error::shape(format!("query width {} with {heads} heads", q.cols())));
    }
    let p: QuantParams = q.params();
    let dh = q.cols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let decode = |s: &[u64]| -> Vec<f64> { s.iter().map(|&v| p.decode(v)).collect() };
    let keys: Vec<Vec<f64>> = (0..cache.len()).map(|t| decode(cache.key(t))).collect();
    let values: Vec<Vec<f64>> = (0..cache.len()).map(|t| decode(cache.value(t))).collect();

    let mut out = vec![vec![0.0; q.cols()]; n];
    for (i, out_row) in out.iter_mut().enumerate() {
        let qrow = q.dequantize_row(i);
        let visible = position + i + 1;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let scores: Vec<f64> = keys[..visible]
                .iter()
                .map(|k| qrow[cols.clone()].iter().zip(&k[cols.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            for (w, v) in weights.iter().zip(&values[..visible]) {
                for c in cols.clone() {
                    out_row[c] += w / total * v[c];
                }
            }
        }
    }
    RingMatrix::quantize(&out, p)
}
