//! A small decoder-only transformer split into weighted projections (run by
//! whoever holds the weights) and weight-free structural ops (run by the
//! enclave).

mod forward;
mod structural;
mod weights;

pub use forward::{
    generate_observed, generate_with, reference_generate, DecoderState, GenerateOptions, LocalProjector, Projector,
};
pub use structural::{argmax_token, attention_structural, embed, rms_norm, silu, KvCache, LayerCache, RMS_EPS};
pub use weights::{ModelWeights, ProjectionWeights, StructuralParams, WEIGHTS_MAGIC};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{OpId, ProjKind};
use crate::ring::QuantParams;

/// Token ids of a prompt or response.
pub type TokenSeq = Vec<u32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub eos: u32,
    pub params: QuantParams,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 64,
            d: 32,
            layers: 2,
            heads: 4,
            d_ff: 64,
            max_seq: 128,
            eos: 0,
            params: QuantParams::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.d, self.layers, self.heads, self.d_ff, self.max_seq];
        if dims.contains(&0) {
            return Err(Error::BadConfig("all dimensions must be at least 1".into()));
        }
        if self.vocab < 2 {
            return Err(Error::BadConfig("vocab must be at least 2".into()));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::BadConfig(format!("d={} not divisible by heads={}", self.d, self.heads)));
        }
        if self.eos as usize >= self.vocab {
            return Err(Error::BadConfig(format!("eos {} outside vocab {}", self.eos, self.vocab)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Every outsourced weight matrix, in protocol setup order.
    pub fn op_ids(&self) -> Vec<OpId> {
        let mut ops: Vec<OpId> = (0..self.layers as u32)
            .flat_map(|l| ProjKind::LAYER.iter().map(move |&k| OpId::new(l, k)))
            .collect();
        ops.push(OpId::head());
        ops
    }

    /// `(input width, output width)` of the matrix behind `op`.
    pub fn op_shape(&self, op: OpId) -> Result<(usize, usize)> {
        let kind = op.kind().ok_or(Error::UnknownOp(op))?;
        if kind == ProjKind::Head {
            if op.layer() != 0 {
                return Err(Error::UnknownOp(op));
            }
            return Ok((self.d, self.vocab));
        }
        if op.layer() as usize >= self.layers {
            return Err(Error::UnknownOp(op));
        }
        Ok(match kind {
            ProjKind::Q | ProjKind::K | ProjKind::V | ProjKind::O => (self.d, self.d),
            ProjKind::Up => (self.d, self.d_ff),
            ProjKind::Down => (self.d_ff, self.d),
            ProjKind::Head => unreachable!(),
        })
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.vocab) {
            return Err(Error::TokenOutOfRange { id, vocab: self.vocab });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_lists_all_ops() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        let ops = cfg.op_ids();
        assert_eq!(ops.len(), 6 * 2 + 1);
        assert_eq!(cfg.op_shape(OpId::new(1, ProjKind::Down)).unwrap(), (64, 32));
        assert_eq!(cfg.op_shape(OpId::head()).unwrap(), (32, 64));
        assert!(cfg.op_shape(OpId::new(2, ProjKind::Q)).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = ModelConfig::default();
        assert!(ModelConfig { heads: 5, ..base }.validate().is_err());
        assert!(ModelConfig { vocab: 1, eos: 0, ..base }.validate().is_err());
        assert!(ModelConfig { layers: 0, ..base }.validate().is_err());
        assert!(ModelConfig { eos: 64, ..base }.validate().is_err());
    }
}
