//! Wire messages and their framing.
//!
//! Frame: `len: u32 LE` (bytes that follow), `tag: u8`, payload. Matrices use
//! the `RMX1` encoding. Integers are little-endian.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::masking::OpId;
use crate::ring::RingMatrix;

/// Largest frame body accepted from the wire.
pub const MAX_FRAME: usize = 64 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    SetupBase { op: OpId, m_pub: RingMatrix },
    PoolReply { op: OpId, r_pub: RingMatrix },
    MatMulRequest { session: u64, step: u32, op: OpId, e_hat: RingMatrix },
    MatMulReply { session: u64, step: u32, op: OpId, o_hat: RingMatrix },
    OpenSession { session: u64 },
    CloseSession { session: u64 },
    Error { code: u16, detail: String },
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::SetupBase { .. } => 1,
            Message::PoolReply { .. } => 2,
            Message::MatMulRequest { .. } => 3,
            Message::MatMulReply { .. } => 4,
            Message::OpenSession { .. } => 5,
            Message::CloseSession { .. } => 6,
            Message::Error { .. } => 7,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Message::SetupBase { .. } => "SetupBase",
            Message::PoolReply { .. } => "PoolReply",
            Message::MatMulRequest { .. } => "MatMulRequest",
            Message::MatMulReply { .. } => "MatMulReply",
            Message::OpenSession { .. } => "OpenSession",
            Message::CloseSession { .. } => "CloseSession",
            Message::Error { .. } => "Error",
        }
    }

    pub fn error(err: &Error) -> Self {
        Message::Error { code: err.code(), detail: err.to_string() }
    }

    /// Full frame including the length prefix.
    pub fn encode(&self) -> Vec<u8> {
        let mut body = vec![self.tag()];
        match self {
            Message::SetupBase { op, m_pub: m } | Message::PoolReply { op, r_pub: m } => {
                body.extend_from_slice(&op.0.to_le_bytes());
                m.write_to(&mut body).expect("vec write");
            }
            Message::MatMulRequest { session, step, op, e_hat: m }
            | Message::MatMulReply { session, step, op, o_hat: m } => {
                body.extend_from_slice(&session.to_le_bytes());
                body.extend_from_slice(&step.to_le_bytes());
                body.extend_from_slice(&op.0.to_le_bytes());
                m.write_to(&mut body).expect("vec write");
            }
            Message::OpenSession { session } | Message::CloseSession { session } => {
                body.extend_from_slice(&session.to_le_bytes());
            }
            Message::Error { code, detail } => {
                body.extend_from_slice(&code.to_le_bytes());
                body.extend_from_slice(&(detail.len() as u32).to_le_bytes());
                body.extend_from_slice(detail.as_bytes());
            }
        }
        let mut frame = Vec::with_capacity(body.len() + 4);
        frame.extend_from_slice(&(body.len() as u32).to_le_bytes());
        frame.extend_from_slice(&body);
        frame
    }

    /// Decode exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::LengthMismatch { expected: 4, found: bytes.len() });
        }
        let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        if bytes.len() - 4 != len {
            return Err(Error::LengthMismatch { expected: len + 4, found: bytes.len() });
        }
        Self::decode_body(&bytes[4..])
    }

    /// Decode a frame body (tag and payload, without the length prefix).
    pub fn decode_body(body: &[u8]) -> Result<Self> {
        let (&tag, rest) = body.split_first().ok_or(Error::LengthMismatch { expected: 1, found: 0 })?;
        let mut cur = Cursor { buf: rest };
        let msg = match tag {
            1 | 2 => {
                let op = OpId(cur.u32()?);
                let m = cur.matrix()?;
                if tag == 1 {
                    Message::SetupBase { op, m_pub: m }
                } else {
                    Message::PoolReply { op, r_pub: m }
                }
            }
            3 | 4 => {
                let session = cur.u64()?;
                let step = cur.u32()?;
                let op = OpId(cur.u32()?);
                let m = cur.matrix()?;
                if tag == 3 {
                    Message::MatMulRequest { session, step, op, e_hat: m }
                } else {
                    Message::MatMulReply { session, step, op, o_hat: m }
                }
            }
            5 => Message::OpenSession { session: cur.u64()? },
            6 => Message::CloseSession { session: cur.u64()? },
            7 => {
                let code = cur.u16()?;
                let n = cur.u32()? as usize;
                let raw = cur.take(n)?;
                let detail = String::from_utf8(raw.to_vec()).map_err(|_| Error::Decode("error detail is not UTF-8".into()))?;
                Message::Error { code, detail }
            }
            t => return Err(Error::Decode(format!("unknown tag {t}"))),
        };
        if !cur.buf.is_empty() {
            return Err(Error::LengthMismatch { expected: body.len() - cur.buf.len(), found: body.len() });
        }
        Ok(msg)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&self.encode())?;
        w.flush()
    }

    /// Read one frame. `Ok(None)` on a clean end of stream before any byte.
    pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>> {
        let mut len = [0u8; 4];
        let mut got = 0;
        while got < 4 {
            match r.read(&mut len[got..]) {
                Ok(0) if got == 0 => return Ok(None),
                Ok(0) => return Err(Error::LengthMismatch { expected: 4, found: got }),
                Ok(n) => got += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        let n = u32::from_le_bytes(len) as usize;
        if n > MAX_FRAME {
            return Err(Error::Decode(format!("frame of {n} bytes exceeds limit")));
        }
        let mut frame = vec![0u8; n + 4];
        frame[..4].copy_from_slice(&len);
        r.read_exact(&mut frame[4..]).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::LengthMismatch { expected: n + 4, found: 4 },
            _ => e.into(),
        })?;
        Ok(Some(frame))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Option<Self>> {
        match Self::read_frame(r)? {
            Some(frame) => Self::decode(&frame).map(Some),
            None => Ok(None),
        }
    }

    /// Every matrix payload carried by the message.
    pub fn matrix(&self) -> Option<&RingMatrix> {
        match self {
            Message::SetupBase { m_pub: m, .. }
            | Message::PoolReply { r_pub: m, .. }
            | Message::MatMulRequest { e_hat: m, .. }
            | Message::MatMulReply { o_hat: m, .. } => Some(m),
            _ => None,
        }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::LengthMismatch { expected: n, found: self.buf.len() });
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn matrix(&mut self) -> Result<RingMatrix> {
        let (m, used) = RingMatrix::from_bytes(self.buf)?;
        self.buf = &self.buf[used..];
        Ok(m)
    }
}
