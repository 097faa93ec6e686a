//! Checks on a provider-side transcript.

use std::collections::HashMap;

use serde::Serialize;

use super::message::Message;
use super::transcript::{Direction, Transcript};
use crate::error::{AuditClause, Error, Result};
use crate::stats::{chi_square_uniform, ChiSquareTest};

pub const AUDIT_ALPHA: f64 = 0.01;
/// Fewest masked elements for which the uniformity test is run (5 per bin).
pub const MIN_UNIFORMITY_SAMPLES: u64 = 5 * 256;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub entries: usize,
    pub requests: usize,
    pub masked_elements: u64,
    /// Residues modulo 256 of every masked element.
    pub low_byte: ChiSquareTest,
    /// Top eight bits of every masked element. Unmasked fixed-point data
    /// sits near zero and piles into two bins here.
    pub high_byte: ChiSquareTest,
}

fn fail(clause: AuditClause, detail: impl Into<String>) -> Error {
    Error::AuditFail { clause, detail: detail.into() }
}

/// Run every clause in order; the first violation is returned as an error.
pub fn audit_transcript(t: &Transcript) -> Result<AuditReport> {
    // Schema and direction.
    let mut pending: Option<&Message> = None;
    let mut requests = 0;
    for (i, e) in t.entries().iter().enumerate() {
        let m = &e.message;
        match e.direction {
            Direction::ToProvider => {
                if !matches!(
                    m,
                    Message::SetupBase { .. }
                        | Message::MatMulRequest { .. }
                        | Message::OpenSession { .. }
                        | Message::CloseSession { .. }
                ) {
                    return Err(fail(AuditClause::Direction, format!("entry {i}: {} sent to provider", m.kind())));
                }
                if pending.is_some() {
                    return Err(fail(AuditClause::Schema, format!("entry {i}: request before previous reply")));
                }
                pending = Some(m);
                requests += 1;
            }
            Direction::FromProvider => {
                let ok = match (pending.take(), m) {
                    (_, Message::Error { .. }) => true,
                    (Some(Message::SetupBase { op, .. }), Message::PoolReply { op: o, .. }) => op == o,
                    (
                        Some(Message::MatMulRequest { session, step, op, .. }),
                        Message::MatMulReply { session: s, step: st, op: o, .. },
                    ) => (session, step, op) == (s, st, o),
                    (Some(Message::OpenSession { session }), Message::OpenSession { session: s })
                    | (Some(Message::CloseSession { session }), Message::CloseSession { session: s }) => session == s,
                    _ => false,
                };
                if !ok {
                    return Err(fail(AuditClause::Schema, format!("entry {i}: {} is not a reply to the request", m.kind())));
                }
            }
        }
    }

    // Uniformity of the masked payloads.
    let k = t
        .entries()
        .iter()
        .find_map(|e| match &e.message {
            Message::MatMulRequest { e_hat, .. } => Some(e_hat.params().k()),
            _ => None,
        })
        .unwrap_or(64);
    let shift = k.saturating_sub(8);
    let mut low = vec![0u64; 256];
    let mut high = vec![0u64; 1usize << (k - shift)];
    let mut seen: HashMap<&[u64], (u64, u32)> = HashMap::new();
    let mut freshness = None;
    for e in t.entries() {
        if let Message::MatMulRequest { session, step, e_hat, .. } = &e.message {
            for &v in e_hat.data() {
                low[(v & 0xff) as usize] += 1;
                high[(v >> shift) as usize] += 1;
            }
            let key = (*session, *step);
            match seen.get(e_hat.data()) {
                Some(&prev) if prev != key && freshness.is_none() => {
                    freshness = Some(format!(
                        "identical payload in session {} step {} and session {} step {}",
                        prev.0, prev.1, session, step
                    ));
                }
                Some(_) => {}
                None => {
                    seen.insert(e_hat.data(), key);
                }
            }
        }
    }
    let masked_elements: u64 = low.iter().sum();
    if masked_elements < MIN_UNIFORMITY_SAMPLES {
        return Err(fail(
            AuditClause::Uniformity,
            format!("{masked_elements} masked elements, at least {MIN_UNIFORMITY_SAMPLES} needed"),
        ));
    }
    let low_byte = chi_square_uniform(&low, AUDIT_ALPHA);
    let high_byte = chi_square_uniform(&high, AUDIT_ALPHA);
    for (name, test) in [("low byte", &low_byte), ("high byte", &high_byte)] {
        if !test.pass() {
            return Err(fail(
                AuditClause::Uniformity,
                format!("{name} chi-square {:.1} exceeds {:.1}", test.statistic, test.critical),
            ));
        }
    }

    if let Some(detail) = freshness {
        return Err(fail(AuditClause::Freshness, detail));
    }

    Ok(AuditReport { entries: t.len(), requests, masked_elements, low_byte, high_byte })
}
