//! Enclave/provider wire protocol, transports and transcript audit.

pub mod audit;
pub mod enclave;
pub mod message;
pub mod provider;
pub mod server;
pub mod transcript;
pub mod transport;

pub use audit::{audit_transcript, AuditReport};
pub use enclave::{enclave_run_session, Enclave, EnclaveOptions, TapRecord};
pub use message::Message;
pub use provider::{Provider, ProviderConnection};
pub use server::{serve, ServerHandle};
pub use transcript::{Direction, Transcript, TranscriptEntry};
pub use transport::{Fault, FaultyTransport, InProcessTransport, TcpTransport, Transport, DEFAULT_PORT, DEFAULT_TIMEOUT};
