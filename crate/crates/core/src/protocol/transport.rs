use std::io::{BufReader, BufWriter, ErrorKind, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::time::Duration;

use super::message::Message;
use super::provider::{Provider, ProviderConnection};
use super::transcript::Transcript;
use crate::error::{Error, Result};

pub const DEFAULT_PORT: u16 = 7431;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// Request/reply channel from the enclave to the provider.
pub trait Transport {
    fn call(&mut self, msg: &Message) -> Result<Message>;
}

/// Provider connection living in the same process.
#[derive(Debug)]
pub struct InProcessTransport {
    conn: ProviderConnection,
}

impl InProcessTransport {
    pub fn new(provider: Arc<Provider>) -> Self {
        InProcessTransport { conn: ProviderConnection::new(provider) }
    }

    pub fn transcript(&self) -> &Transcript {
        self.conn.transcript()
    }

    pub fn take_transcript(&mut self) -> Transcript {
        self.conn.take_transcript()
    }
}

impl Transport for InProcessTransport {
    fn call(&mut self, msg: &Message) -> Result<Message> {
        // Through the codec, so both transports see the same bytes.
        let msg = Message::decode(&msg.encode())?;
        Ok(self.conn.handle(msg))
    }
}

#[derive(Debug)]
pub struct TcpTransport {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl TcpTransport {
    pub fn connect<A: ToSocketAddrs + std::fmt::Debug>(addr: A, timeout: Duration) -> Result<Self> {
        let closed = |e: std::io::Error| Error::TransportClosed(format!("connect to {addr:?}: {e}"));
        let target = addr
            .to_socket_addrs()
            .map_err(closed)?
            .next()
            .ok_or_else(|| Error::TransportClosed(format!("{addr:?} resolves to nothing")))?;
        let stream = TcpStream::connect_timeout(&target, timeout).map_err(closed)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        Ok(TcpTransport { reader: BufReader::new(stream.try_clone()?), writer: BufWriter::new(stream) })
    }
}

fn io_closed(e: std::io::Error) -> Error {
    match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => Error::TransportClosed("request timed out".into()),
        _ => Error::TransportClosed(e.to_string()),
    }
}

impl Transport for TcpTransport {
    fn call(&mut self, msg: &Message) -> Result<Message> {
        self.writer.write_all(&msg.encode()).map_err(io_closed)?;
        self.writer.flush().map_err(io_closed)?;
        match Message::read_from(&mut self.reader) {
            Ok(Some(reply)) => Ok(reply),
            Ok(None) => Err(Error::TransportClosed("provider closed the connection".into())),
            Err(Error::Io(e)) => Err(io_closed(e)),
            Err(e) => Err(e),
        }
    }
}

impl<T: Transport + ?Sized> Transport for &mut T {
    fn call(&mut self, msg: &Message) -> Result<Message> {
        (**self).call(msg)
    }
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn call(&mut self, msg: &Message) -> Result<Message> {
        (**self).call(msg)
    }
}

/// Tampering a reply, for negative controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// XOR every element of the n-th `MatMulReply` with a fixed pattern.
    Garble { reply: usize },
    /// Drop the last column of the n-th `MatMulReply`.
    DropColumn { reply: usize },
}

/// Wraps a transport and tampers with one provider reply.
#[doc(hidden)]
#[derive(Debug)]
pub struct FaultyTransport<T> {
    inner: T,
    fault: Fault,
    replies: usize,
}

impl<T: Transport> FaultyTransport<T> {
    pub fn new(inner: T, fault: Fault) -> Self {
        FaultyTransport { inner, fault, replies: 0 }
    }

    pub fn into_inner(self) -> T {
        self.inner
    }
}

impl<T: Transport> Transport for FaultyTransport<T> {
    fn call(&mut self, msg: &Message) -> Result<Message> {
        let reply = self.inner.call(msg)?;
        let Message::MatMulReply { session, step, op, o_hat } = reply else {
            return Ok(reply);
        };
        let idx = self.replies;
        self.replies += 1;
        let o_hat = match self.fault {
            Fault::Garble { reply } if reply == idx => {
                let (r, c, p) = (o_hat.rows(), o_hat.cols(), o_hat.params());
                let data = o_hat.into_data().into_iter().map(|v| p.reduce(v ^ 0xa5a5_a5a5_a5a5_a5a5)).collect();
                crate::ring::RingMatrix::new(r, c, data, p)?
            }
            Fault::DropColumn { reply } if reply == idx => {
                let c = o_hat.cols();
                o_hat.col_slice(0, c.saturating_sub(1))?
            }
            _ => o_hat,
        };
        Ok(Message::MatMulReply { session, step, op, o_hat })
    }
}
