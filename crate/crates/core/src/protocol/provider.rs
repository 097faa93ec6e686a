//! The weight-holding party. It sees public bases and masked inputs only.

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use super::message::Message;
use super::transcript::{Direction, Transcript};
use crate::error::{Error, Result};
use crate::masking::OpId;
use crate::model::ProjectionWeights;
use crate::ring::RingMatrix;

/// Provider state shared by all connections: the weights and the record of
/// which ops already received their single public base.
#[derive(Debug)]
pub struct Provider {
    weights: ProjectionWeights,
    issued: Mutex<HashSet<OpId>>,
}

impl Provider {
    pub fn new(weights: ProjectionWeights) -> Arc<Self> {
        Arc::new(Provider { weights, issued: Mutex::new(HashSet::new()) })
    }

    pub fn weights(&self) -> &ProjectionWeights {
        &self.weights
    }

    pub fn issued_count(&self) -> usize {
        self.issued.lock().expect("issued lock").len()
    }

    fn weight_for(&self, op: OpId, input: &RingMatrix) -> Result<&RingMatrix> {
        let w = self.weights.get(op)?;
        if input.params() != w.params() {
            return Err(Error::ParamsMismatch);
        }
        if input.cols() != w.rows() {
            return Err(Error::shape(format!(
                "{op} expects input width {}, got {}",
                w.rows(),
                input.cols()
            )));
        }
        Ok(w)
    }

    /// `R_pub = M_pub W`, once per op for the provider's lifetime.
    pub fn setup_base(&self, op: OpId, m_pub: &RingMatrix) -> Result<RingMatrix> {
        let w = self.weight_for(op, m_pub)?;
        let mut issued = self.issued.lock().expect("issued lock");
        if issued.contains(&op) {
            return Err(Error::SketchReissue(op));
        }
        let r_pub = m_pub.matmul(w)?;
        issued.insert(op);
        Ok(r_pub)
    }

    /// `Ô = Ê W`, left at scale `2f` so the enclave can subtract the
    /// restoration term before rescaling.
    pub fn masked_matmul(&self, op: OpId, e_hat: &RingMatrix) -> Result<RingMatrix> {
        let w = self.weight_for(op, e_hat)?;
        e_hat.matmul(w)
    }
}

/// Per-connection view of the provider: session bookkeeping and the
/// transcript of everything received and sent.
#[derive(Debug)]
pub struct ProviderConnection {
    provider: Arc<Provider>,
    session: Option<u64>,
    last_step: HashMap<u64, u32>,
    transcript: Transcript,
    started: Instant,
}

impl ProviderConnection {
    pub fn new(provider: Arc<Provider>) -> Self {
        ProviderConnection {
            provider,
            session: None,
            last_step: HashMap::new(),
            transcript: Transcript::new(),
            started: Instant::now(),
        }
    }

    pub fn provider(&self) -> &Arc<Provider> {
        &self.provider
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn take_transcript(&mut self) -> Transcript {
        std::mem::take(&mut self.transcript)
    }

    fn now(&self) -> u64 {
        self.started.elapsed().as_nanos() as u64
    }

    /// Handle one request and log both directions.
    pub fn handle(&mut self, msg: Message) -> Message {
        let t = self.now();
        self.transcript.push(Direction::ToProvider, t, msg.clone());
        let reply = self.dispatch(msg).unwrap_or_else(|e| Message::error(&e));
        let t = self.now();
        self.transcript.push(Direction::FromProvider, t, reply.clone());
        reply
    }

    /// Log a frame that could not be decoded, as an error reply.
    pub fn reject(&mut self, err: &Error) -> Message {
        let reply = Message::error(err);
        let t = self.now();
        self.transcript.push(Direction::FromProvider, t, reply.clone());
        reply
    }

    fn dispatch(&mut self, msg: Message) -> Result<Message> {
        match msg {
            Message::SetupBase { op, m_pub } => {
                let r_pub = self.provider.setup_base(op, &m_pub)?;
                Ok(Message::PoolReply { op, r_pub })
            }
            Message::OpenSession { session } => {
                if let Some(open) = self.session {
                    return Err(Error::Unexpected(format!("session {open} already open on this connection")));
                }
                self.session = Some(session);
                Ok(Message::OpenSession { session })
            }
            Message::CloseSession { session } => {
                if self.session != Some(session) {
                    return Err(Error::Unexpected(format!("session {session} is not open")));
                }
                self.session = None;
                self.last_step.remove(&session);
                Ok(Message::CloseSession { session })
            }
            Message::MatMulRequest { session, step, op, e_hat } => {
                if self.session != Some(session) {
                    return Err(Error::Unexpected(format!("request for unopened session {session}")));
                }
                let last = self.last_step.entry(session).or_insert(step);
                if step < *last {
                    return Err(Error::Unexpected(format!("step {step} after step {last}")));
                }
                *last = step;
                let o_hat = self.provider.masked_matmul(op, &e_hat)?;
                Ok(Message::MatMulReply { session, step, op, o_hat })
            }
            other => Err(Error::Unexpected(format!("{} is not a request", other.kind()))),
        }
    }
}
