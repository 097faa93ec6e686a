//! The per-token decoding loop, shared by the partitioned and the
//! single-party pipelines. Only the `Projector` differs between them.

use super::structural::{argmax_token, attention_structural, embed, rms_norm, silu, KvCache};
use super::weights::{ModelWeights, ProjectionWeights, StructuralParams};
use super::{ModelConfig, TokenSeq};
use crate::error::{Error, Result};
use crate::masking::{OpId, ProjKind};
use crate::ring::RingMatrix;

/// Computes `x W_op` at fraction scale `f` for one weight matrix.
pub trait Projector {
    fn project(&mut self, op: OpId, step: u32, x: &RingMatrix) -> Result<RingMatrix>;
}

/// Unmasked local projections with the weights in hand.
#[derive(Debug, Clone, Copy)]
pub struct LocalProjector<'w> {
    weights: &'w ProjectionWeights,
}

impl<'w> LocalProjector<'w> {
    pub fn new(weights: &'w ProjectionWeights) -> Self {
        LocalProjector { weights }
    }
}

impl Projector for LocalProjector<'_> {
    fn project(&mut self, op: OpId, _step: u32, x: &RingMatrix) -> Result<RingMatrix> {
        Ok(x.matmul(self.weights.get(op)?)?.rescale())
    }
}

/// Position, step counter and KV cache of one generation.
#[derive(Debug, Clone)]
pub struct DecoderState {
    config: ModelConfig,
    cache: KvCache,
    position: usize,
    step: u32,
}

impl DecoderState {
    pub fn new(config: ModelConfig) -> Self {
        DecoderState { config, cache: KvCache::new(config.layers, config.d), position: 0, step: 0 }
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn step(&self) -> u32 {
        self.step
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    /// Feed `tokens` at the current position and return the greedy next token.
    pub fn decode_step(
        &mut self,
        params: &StructuralParams,
        proj: &mut dyn Projector,
        tokens: &[u32],
    ) -> Result<u32> {
        let cfg = self.config;
        cfg.check_tokens(tokens)?;
        let n = tokens.len();
        if self.position + n >= cfg.max_seq {
            return Err(Error::SessionExhausted { needed: self.position + n + 1, max_seq: cfg.max_seq });
        }
        if self.cache.len() != self.position {
            return Err(Error::CacheInconsistent { cached: self.cache.len(), position: self.position });
        }
        let step = self.step;
        let start = self.position;
        let result = self.forward(params, proj, tokens, step, start);
        if result.is_err() {
            for l in 0..cfg.layers {
                self.cache.layer_mut(l).truncate(start);
            }
            return result;
        }
        self.position += n;
        self.step += 1;
        result
    }

    fn forward(
        &mut self,
        params: &StructuralParams,
        proj: &mut dyn Projector,
        tokens: &[u32],
        step: u32,
        start: usize,
    ) -> Result<u32> {
        let cfg = self.config;
        let n = tokens.len();
        let mut x = embed(tokens, params.embedding())?;
        for layer in 0..cfg.layers {
            let l = layer as u32;
            let h = rms_norm(&x, &params.attn_gain(layer))?;
            let q = proj.project(OpId::new(l, ProjKind::Q), step, &h)?;
            let k = proj.project(OpId::new(l, ProjKind::K), step, &h)?;
            let v = proj.project(OpId::new(l, ProjKind::V), step, &h)?;
            self.cache.layer_mut(layer).append(&k, &v)?;
            let attn = attention_structural(&q, self.cache.layer(layer), start, cfg.heads)?;
            let o = proj.project(OpId::new(l, ProjKind::O), step, &attn)?;
            x = x.add(&o)?;
            let h = rms_norm(&x, &params.mlp_gain(layer))?;
            let up = proj.project(OpId::new(l, ProjKind::Up), step, &h)?;
            let down = proj.project(OpId::new(l, ProjKind::Down), step, &silu(&up)?)?;
            x = x.add(&down)?;
        }
        let last = rms_norm(&x.row_slice(n - 1, n)?, &params.final_gain())?;
        let logits = proj.project(OpId::head(), step, &last)?;
        Ok(argmax_token(&logits))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateOptions {
    pub max_new: usize,
    /// Keep decoding past EOS (fixed-length benchmarking).
    pub ignore_eos: bool,
}

impl GenerateOptions {
    pub fn new(max_new: usize) -> Self {
        GenerateOptions { max_new, ignore_eos: false }
    }
}

/// Greedy generation: prefill the prompt, then feed back each new token until
/// EOS or `max_new` tokens. Returns the response only; an EOS that ends
/// generation is included.
pub fn generate_with(
    params: &StructuralParams,
    proj: &mut dyn Projector,
    prompt: &[u32],
    opts: GenerateOptions,
) -> Result<TokenSeq> {
    generate_observed(params, proj, prompt, opts, &mut |_| {})
}

/// `generate_with`, calling `on_token` as soon as each token is sampled.
pub fn generate_observed(
    params: &StructuralParams,
    proj: &mut dyn Projector,
    prompt: &[u32],
    opts: GenerateOptions,
    on_token: &mut dyn FnMut(u32),
) -> Result<TokenSeq> {
    let cfg = *params.config();
    cfg.check_tokens(prompt)?;
    let mut state = DecoderState::new(cfg);
    let mut response = Vec::new();
    let mut feed: Vec<u32> = prompt.to_vec();
    while response.len() < opts.max_new {
        let next = state.decode_step(params, proj, &feed)?;
        on_token(next);
        response.push(next);
        if next == cfg.eos && !opts.ignore_eos {
            break;
        }
        feed = vec![next];
    }
    Ok(response)
}

/// The unprotected single-party pipeline: same structural code, same ring
/// arithmetic, same sampler, no masking and no protocol.
pub fn reference_generate(weights: &ModelWeights, prompt: &[u32], max_new: usize) -> Result<TokenSeq> {
    let mut proj = LocalProjector::new(&weights.projections);
    generate_with(&weights.structural, &mut proj, prompt, GenerateOptions::new(max_new))
}
