//! Hybrid masking: fixed public bases with their restoration pools, and
//! fresh per-step private mixing.
//!
//! For a weight matrix `W` the enclave releases one public base `M_pub`
//! (`m x d`, `m < d`) and keeps the provider's reply `R_pub = M_pub W`. Each
//! decoding step then draws a private `M_pvt` (`n x m`), sends
//! `E + M_pvt M_pub`, and restores `E W = Ô - M_pvt R_pub`.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::rank_mod_p;
use crate::prg::{Label, PrgKey};
use crate::ring::{QuantParams, RingMatrix};

/// Which projection inside a layer a weight matrix implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProjKind {
    Q = 0,
    K = 1,
    V = 2,
    O = 3,
    Up = 4,
    Down = 5,
    Head = 6,
}

impl ProjKind {
    pub const LAYER: [ProjKind; 6] =
        [ProjKind::Q, ProjKind::K, ProjKind::V, ProjKind::O, ProjKind::Up, ProjKind::Down];

    fn from_u32(v: u32) -> Option<Self> {
        Some(match v {
            0 => ProjKind::Q,
            1 => ProjKind::K,
            2 => ProjKind::V,
            3 => ProjKind::O,
            4 => ProjKind::Up,
            5 => ProjKind::Down,
            6 => ProjKind::Head,
            _ => return None,
        })
    }
}

/// Identifier of one weight matrix. Low 4 bits hold the projection kind,
/// the rest the layer index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OpId(pub u32);

impl OpId {
    pub fn new(layer: u32, kind: ProjKind) -> Self {
        OpId((layer << 4) | kind as u32)
    }

    /// The output head has no layer of its own.
    pub fn head() -> Self {
        OpId::new(0, ProjKind::Head)
    }

    pub fn layer(self) -> u32 {
        self.0 >> 4
    }

    pub fn kind(self) -> Option<ProjKind> {
        ProjKind::from_u32(self.0 & 0xf)
    }
}

impl fmt::Display for OpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind() {
            Some(ProjKind::Head) => write!(f, "HEAD"),
            Some(kind) => write!(f, "{kind:?}{}", self.layer()),
            None => write!(f, "op#{}", self.0),
        }
    }
}

/// Default sketch height for input width `d`: `max(d / 2, 1)`.
pub fn default_sketch_rows(d: usize) -> usize {
    (d / 2).max(1)
}

const MAX_BASE_ATTEMPTS: u32 = 16;

/// Issues public bases under the single-issue rule: one base per op id for
/// the lifetime of the issuer.
#[derive(Debug)]
pub struct SketchIssuer {
    key: PrgKey,
    params: QuantParams,
    issued: HashSet<OpId>,
}

impl SketchIssuer {
    pub fn new(key: PrgKey, params: QuantParams) -> Self {
        SketchIssuer { key, params, issued: HashSet::new() }
    }

    pub fn is_issued(&self, op: OpId) -> bool {
        self.issued.contains(&op)
    }

    /// Draw the `m x d` public base for `op`. Entries are uniform over the
    /// ring. A base is redrawn unless it has full row rank and every column
    /// holds an odd entry; the latter makes each coordinate of
    /// `M_pvt M_pub` uniform over the whole ring.
    pub fn gen_public_base(&mut self, op: OpId, m: usize, d: usize) -> Result<RingMatrix> {
        if m == 0 || m >= d {
            return Err(Error::BadDims { m, d });
        }
        if self.issued.contains(&op) {
            return Err(Error::SketchReissue(op));
        }
        for attempt in 0..MAX_BASE_ATTEMPTS {
            let base = self.key.uniform_matrix(Label::PublicBase { op, attempt }, m, d, self.params);
            if rank_mod_p(&base) == m && has_unit_in_every_column(&base) {
                self.issued.insert(op);
                return Ok(base);
            }
        }
        unreachable!("{MAX_BASE_ATTEMPTS} rank-deficient uniform bases in a row")
    }

    /// Extra sketch for an already issued op, breaking the single-issue rule.
    /// Exists only to demonstrate the stacking attack the rule prevents.
    #[doc(hidden)]
    pub fn bypass_single_issue(&self, op: OpId, m: usize, d: usize, nonce: u32) -> RingMatrix {
        self.key.uniform_matrix(Label::BypassBase { op, nonce }, m, d, self.params)
    }
}

fn has_unit_in_every_column(m: &RingMatrix) -> bool {
    (0..m.cols()).all(|c| (0..m.rows()).any(|r| m.get(r, c) & 1 == 1))
}

/// A public base waiting for the provider's restoration pool.
#[derive(Debug, Clone)]
pub struct PendingBase {
    pub op: OpId,
    pub m_pub: RingMatrix,
    pub d_out: usize,
}

impl PendingBase {
    pub fn new(op: OpId, m_pub: RingMatrix, d_out: usize) -> Self {
        PendingBase { op, m_pub, d_out }
    }

    /// Accept the provider's `R_pub` for this base.
    pub fn install_pool(self, r_pub: RingMatrix) -> Result<MaskBase> {
        if r_pub.shape() != (self.m_pub.rows(), self.d_out) {
            return Err(Error::shape(format!(
                "restoration pool for {} is {}x{}, expected {}x{}",
                self.op,
                r_pub.rows(),
                r_pub.cols(),
                self.m_pub.rows(),
                self.d_out
            )));
        }
        if r_pub.params() != self.m_pub.params() {
            return Err(Error::ParamsMismatch);
        }
        Ok(MaskBase { op: self.op, m_pub: self.m_pub, r_pub })
    }
}

/// Installed public base and restoration pool for one weight matrix.
/// `r_pub` sits at fraction scale `2f` (it is never rescaled).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskBase {
    op: OpId,
    m_pub: RingMatrix,
    r_pub: RingMatrix,
}

impl MaskBase {
    pub fn op(&self) -> OpId {
        self.op
    }

    pub fn m_pub(&self) -> &RingMatrix {
        &self.m_pub
    }

    pub fn r_pub(&self) -> &RingMatrix {
        &self.r_pub
    }

    pub fn sketch_rows(&self) -> usize {
        self.m_pub.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.m_pub.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.r_pub.cols()
    }

    /// Optional self-check against a local copy of `W` (tests and the
    /// provider side only; the enclave never holds `W`).
    pub fn consistent_with(&self, w: &RingMatrix) -> bool {
        self.m_pub.matmul(w).map(|r| r == self.r_pub).unwrap_or(false)
    }
}

/// The private mixing matrix for `(session, step, op)`.
pub fn derive_step_mask(
    key: &PrgKey,
    session: u64,
    step: u32,
    op: OpId,
    n: usize,
    m: usize,
    params: QuantParams,
) -> Result<RingMatrix> {
    if n == 0 || m == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(key.uniform_matrix(Label::StepMask { session, step, op }, n, m, params))
}

/// Private masks of one decoding step, derived on demand and dropped with
/// the step.
#[derive(Debug)]
pub struct StepMasks<'k> {
    key: &'k PrgKey,
    session: u64,
    step: u32,
    masks: HashMap<OpId, RingMatrix>,
}

impl<'k> StepMasks<'k> {
    pub fn new(key: &'k PrgKey, session: u64, step: u32) -> Self {
        StepMasks { key, session, step, masks: HashMap::new() }
    }

    pub fn step(&self) -> u32 {
        self.step
    }

    pub fn label(&self, op: OpId) -> Label {
        Label::StepMask { session: self.session, step: self.step, op }
    }

    pub fn mask_for(&mut self, op: OpId, n: usize, m: usize, params: QuantParams) -> Result<&RingMatrix> {
        use std::collections::hash_map::Entry;
        match self.masks.entry(op) {
            Entry::Occupied(e) => {
                let mask = e.into_mut();
                if mask.shape() != (n, m) {
                    return Err(Error::shape(format!("step mask for {op} requested with two shapes")));
                }
                Ok(mask)
            }
            Entry::Vacant(e) => {
                let mask = derive_step_mask(self.key, self.session, self.step, op, n, m, params)?;
                Ok(e.insert(mask))
            }
        }
    }
}

/// `Ê = E + M_pvt M_pub`.
pub fn mask_embedding(e: &RingMatrix, m_pvt: &RingMatrix, m_pub: &RingMatrix) -> Result<RingMatrix> {
    if m_pvt.rows() != e.rows() || m_pub.cols() != e.cols() || m_pvt.cols() != m_pub.rows() {
        return Err(Error::shape(format!(
            "mask {}x{} * {}x{} for input {}x{}",
            m_pvt.rows(),
            m_pvt.cols(),
            m_pub.rows(),
            m_pub.cols(),
            e.rows(),
            e.cols()
        )));
    }
    let mask = m_pvt.matmul(m_pub)?;
    e.add(&mask)
}

/// `O = Ô - M_pvt R_pub`.
pub fn recover(o_hat: &RingMatrix, m_pvt: &RingMatrix, r_pub: &RingMatrix) -> Result<RingMatrix> {
    if m_pvt.rows() != o_hat.rows() || r_pub.cols() != o_hat.cols() || m_pvt.cols() != r_pub.rows() {
        return Err(Error::shape(format!(
            "restoration {}x{} * {}x{} for output {}x{}",
            m_pvt.rows(),
            m_pvt.cols(),
            r_pub.rows(),
            r_pub.cols(),
            o_hat.rows(),
            o_hat.cols()
        )));
    }
    o_hat.sub(&m_pvt.matmul(r_pub)?)
}
