//! The trusted party: holds prompts, masks, KV cache and structural
//! parameters, never the projection weights.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::message::Message;
use super::transport::Transport;
use crate::error::{Error, Result};
use crate::masking::{default_sketch_rows, derive_step_mask, mask_embedding, recover, MaskBase, OpId, PendingBase, SketchIssuer};
use crate::model::{generate_observed, GenerateOptions, ModelConfig, Projector, StructuralParams, TokenSeq};
use crate::prg::PrgKey;
use crate::ring::RingMatrix;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EnclaveOptions {
    /// Sketch height `m` for every op; `None` picks `max(d_in / 2, 1)`.
    pub sketch_rows: Option<usize>,
    /// Send raw inputs instead of masked ones. Negative controls only.
    #[doc(hidden)]
    pub disable_masking: bool,
}

/// One provider-bound projection input, as captured by a tap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapRecord {
    pub op: OpId,
    pub step: u32,
    /// Enclave-side input `E`.
    pub plain: RingMatrix,
    /// The `Ê` actually put on the wire.
    pub masked: RingMatrix,
}

#[derive(Debug)]
pub struct Enclave {
    config: ModelConfig,
    structural: StructuralParams,
    key: PrgKey,
    issuer: SketchIssuer,
    bases: BTreeMap<OpId, MaskBase>,
    options: EnclaveOptions,
    next_session: AtomicU64,
}

impl Enclave {
    pub fn new(structural: StructuralParams, key: PrgKey, options: EnclaveOptions) -> Result<Self> {
        let config = *structural.config();
        config.validate()?;
        let issuer = SketchIssuer::new(key.clone(), config.params);
        Ok(Enclave {
            config,
            structural,
            key,
            issuer,
            bases: BTreeMap::new(),
            options,
            next_session: AtomicU64::new(1),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn is_setup(&self) -> bool {
        self.config.op_ids().iter().all(|op| self.bases.contains_key(op))
    }

    pub fn bases(&self) -> &BTreeMap<OpId, MaskBase> {
        &self.bases
    }

    pub fn base(&self, op: OpId) -> Result<&MaskBase> {
        self.bases.get(&op).ok_or(Error::MissingPool(op))
    }

    pub fn issuer(&self) -> &SketchIssuer {
        &self.issuer
    }

    /// One-time setup: release a public base per weight matrix and install
    /// the returned restoration pools. Ops already set up are skipped.
    pub fn setup(&mut self, transport: &mut dyn Transport) -> Result<()> {
        for op in self.config.op_ids() {
            if self.bases.contains_key(&op) {
                continue;
            }
            let (d_in, d_out) = self.config.op_shape(op)?;
            let m = self.options.sketch_rows.unwrap_or_else(|| default_sketch_rows(d_in));
            let m_pub = self.issuer.gen_public_base(op, m, d_in)?;
            let pending = PendingBase::new(op, m_pub.clone(), d_out);
            let base = match transport.call(&Message::SetupBase { op, m_pub })? {
                Message::PoolReply { op: got, r_pub } if got == op => pending.install_pool(r_pub)?,
                other => return Err(unexpected(other, "PoolReply")),
            };
            self.bases.insert(op, base);
        }
        Ok(())
    }

    fn fresh_session(&self) -> u64 {
        self.next_session.fetch_add(1, Ordering::Relaxed)
    }

    /// Run one generation over `transport`. Setup must be complete.
    pub fn run_session(&self, transport: &mut dyn Transport, prompt: &[u32], opts: GenerateOptions) -> Result<TokenSeq> {
        self.run(transport, prompt, opts, None, &mut |_| {}).map(|(tokens, _)| tokens)
    }

    /// Like `run_session`, calling `on_token` as each token is produced.
    pub fn run_session_observed(
        &self,
        transport: &mut dyn Transport,
        prompt: &[u32],
        opts: GenerateOptions,
        on_token: &mut dyn FnMut(u32),
    ) -> Result<TokenSeq> {
        self.run(transport, prompt, opts, None, on_token).map(|(tokens, _)| tokens)
    }

    /// Like `run_session`, also recording every input sent for `tap`.
    pub fn run_session_tapped(
        &self,
        transport: &mut dyn Transport,
        prompt: &[u32],
        opts: GenerateOptions,
        tap: OpId,
    ) -> Result<(TokenSeq, Vec<TapRecord>)> {
        if !self.config.op_ids().contains(&tap) {
            return Err(Error::TapUnavailable);
        }
        self.run(transport, prompt, opts, Some(tap), &mut |_| {})
    }

    fn run(
        &self,
        transport: &mut dyn Transport,
        prompt: &[u32],
        opts: GenerateOptions,
        tap: Option<OpId>,
        on_token: &mut dyn FnMut(u32),
    ) -> Result<(TokenSeq, Vec<TapRecord>)> {
        if !self.is_setup() {
            let missing = self.config.op_ids().into_iter().find(|op| !self.bases.contains_key(op));
            return Err(Error::MissingPool(missing.expect("some op is missing")));
        }
        self.config.check_tokens(prompt)?;
        let session = self.fresh_session();
        match transport.call(&Message::OpenSession { session })? {
            Message::OpenSession { session: s } if s == session => {}
            other => return Err(unexpected(other, "OpenSession")),
        }
        let mut proj = MaskedProjector { enclave: self, transport: &mut *transport, session, tap, records: Vec::new() };
        let result = generate_observed(&self.structural, &mut proj, prompt, opts, on_token);
        let records = std::mem::take(&mut proj.records);
        let tokens = result?;
        match transport.call(&Message::CloseSession { session })? {
            Message::CloseSession { session: s } if s == session => {}
            other => return Err(unexpected(other, "CloseSession")),
        }
        Ok((tokens, records))
    }
}

fn unexpected(reply: Message, wanted: &str) -> Error {
    match reply {
        Message::Error { code, detail } => Error::Remote { code, detail },
        other => Error::Unexpected(format!("expected {wanted}, got {}", other.kind())),
    }
}

/// Set up if needed, then run one session.
pub fn enclave_run_session(
    transport: &mut dyn Transport,
    enclave: &mut Enclave,
    prompt: &[u32],
    opts: GenerateOptions,
) -> Result<TokenSeq> {
    enclave.setup(transport)?;
    enclave.run_session(transport, prompt, opts)
}

/// Outsources each projection: mask, send, restore, rescale.
struct MaskedProjector<'a> {
    enclave: &'a Enclave,
    transport: &'a mut dyn Transport,
    session: u64,
    tap: Option<OpId>,
    records: Vec<TapRecord>,
}

impl Projector for MaskedProjector<'_> {
    fn project(&mut self, op: OpId, step: u32, x: &RingMatrix) -> Result<RingMatrix> {
        let base = self.enclave.base(op)?;
        let params = x.params();
        let m_pvt = if self.enclave.options.disable_masking {
            None
        } else {
            Some(derive_step_mask(&self.enclave.key, self.session, step, op, x.rows(), base.sketch_rows(), params)?)
        };
        let e_hat = match &m_pvt {
            Some(m_pvt) => mask_embedding(x, m_pvt, base.m_pub())?,
            None => x.clone(),
        };
        if self.tap == Some(op) {
            self.records.push(TapRecord { op, step, plain: x.clone(), masked: e_hat.clone() });
        }
        let request = Message::MatMulRequest { session: self.session, step, op, e_hat };
        let o_hat = match self.transport.call(&request)? {
            Message::MatMulReply { session, step: s, op: o, o_hat } if session == self.session && s == step && o == op => {
                o_hat
            }
            Message::MatMulReply { .. } => {
                return Err(Error::Unexpected(format!("reply does not echo session {} step {step} {op}", self.session)))
            }
            other => return Err(unexpected(other, "MatMulReply")),
        };
        if o_hat.shape() != (x.rows(), base.output_dim()) {
            return Err(Error::shape(format!(
                "{op} reply is {}x{}, expected {}x{}",
                o_hat.rows(),
                o_hat.cols(),
                x.rows(),
                base.output_dim()
            )));
        }
        let o = match &m_pvt {
            Some(m_pvt) => recover(&o_hat, m_pvt, base.r_pub())?,
            None => o_hat,
        };
        Ok(o.rescale())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{reference_generate, ModelWeights};
    use crate::protocol::provider::Provider;
    use crate::protocol::transport::{Fault, FaultyTransport, InProcessTransport};

    fn setup(seed: u64) -> (ModelWeights, Enclave, InProcessTransport) {
        let w = ModelWeights::random(ModelConfig::default(), seed).unwrap();
        let mut t = InProcessTransport::new(Provider::new(w.projections.clone()));
        let mut e = Enclave::new(w.structural.clone(), PrgKey::from_u64(seed + 100), EnclaveOptions::default()).unwrap();
        e.setup(&mut t).unwrap();
        (w, e, t)
    }

    #[test]
    fn masked_generation_matches_reference() {
        let (w, e, mut t) = setup(5);
        for prompt in [vec![1u32], vec![9, 8, 7, 6], vec![63; 10]] {
            let got = e.run_session(&mut t, &prompt, GenerateOptions::new(12)).unwrap();
            assert_eq!(got, reference_generate(&w, &prompt, 12).unwrap());
        }
    }

    #[test]
    fn pools_match_weights() {
        let (w, e, _) = setup(6);
        assert_eq!(e.bases().len(), w.config().op_ids().len());
        for (op, base) in e.bases() {
            assert!(base.consistent_with(w.projections.get(*op).unwrap()));
        }
    }

    #[test]
    fn session_requires_setup() {
        let w = ModelWeights::random(ModelConfig::default(), 1).unwrap();
        let mut t = InProcessTransport::new(Provider::new(w.projections.clone()));
        let e = Enclave::new(w.structural.clone(), PrgKey::from_u64(1), EnclaveOptions::default()).unwrap();
        assert!(matches!(e.run_session(&mut t, &[1], GenerateOptions::new(1)), Err(Error::MissingPool(_))));
    }

    #[test]
    fn second_enclave_cannot_reissue() {
        let (w, _e, mut t) = setup(7);
        let mut other = Enclave::new(w.structural.clone(), PrgKey::from_u64(8), EnclaveOptions::default()).unwrap();
        let err = other.setup(&mut t).unwrap_err();
        assert!(matches!(err, Error::Remote { code: 3, .. }), "{err}");
    }

    #[test]
    fn wrong_shape_reply_aborts_session() {
        let (_w, e, t) = setup(9);
        let mut bad = FaultyTransport::new(t, Fault::DropColumn { reply: 3 });
        let err = e.run_session(&mut bad, &[1, 2], GenerateOptions::new(4)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)), "{err}");
    }

    #[test]
    fn tap_sees_plain_and_wire_rows() {
        let (_w, e, mut t) = setup(10);
        let tap = OpId::new(0, crate::masking::ProjKind::Q);
        let (tokens, recs) = e.run_session_tapped(&mut t, &[3, 4, 5], GenerateOptions::new(3), tap).unwrap();
        let rows: usize = recs.iter().map(|r| r.plain.rows()).sum();
        assert_eq!(rows, 3 + tokens.len() - 1);
        let sent: Vec<&RingMatrix> = t
            .transcript()
            .entries()
            .iter()
            .filter_map(|en| match &en.message {
                Message::MatMulRequest { op, e_hat, .. } if *op == tap => Some(e_hat),
                _ => None,
            })
            .collect();
        assert_eq!(sent, recs.iter().map(|r| &r.masked).collect::<Vec<_>>());
        assert!(recs.iter().all(|r| r.plain != r.masked));
        assert!(matches!(
            e.run_session_tapped(&mut t, &[1], GenerateOptions::new(1), OpId::new(9, crate::masking::ProjKind::Q)),
            Err(Error::TapUnavailable)
        ));
    }
}
