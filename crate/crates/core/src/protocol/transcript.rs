use std::io::{Read, Write};
use std::path::Path;

use super::message::Message;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    ToProvider = 0,
    FromProvider = 1,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub direction: Direction,
    /// Monotonic nanoseconds since the transcript was started.
    pub timestamp_ns: u64,
    pub message: Message,
}

/// Everything the provider saw, in order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, direction: Direction, timestamp_ns: u64, message: Message) {
        self.entries.push(TranscriptEntry { direction, timestamp_ns, message });
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn extend(&mut self, other: Transcript) {
        self.entries.extend(other.entries);
    }

    /// The transcript with timestamps dropped, for transport comparisons.
    pub fn without_timestamps(&self) -> Vec<(Direction, &Message)> {
        self.entries.iter().map(|e| (e.direction, &e.message)).collect()
    }

    /// Mutable access for negative-control experiments (injected violations).
    #[doc(hidden)]
    pub fn entries_mut(&mut self) -> &mut Vec<TranscriptEntry> {
        &mut self.entries
    }

    /// Dump: per entry a direction byte, a u64 LE timestamp, then the frame.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        for e in &self.entries {
            w.write_all(&[e.direction as u8])?;
            w.write_all(&e.timestamp_ns.to_le_bytes())?;
            w.write_all(&e.message.encode())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut out = Transcript::new();
        loop {
            let mut dir = [0u8; 1];
            if r.read(&mut dir)? == 0 {
                return Ok(out);
            }
            let direction = match dir[0] {
                0 => Direction::ToProvider,
                1 => Direction::FromProvider,
                d => return Err(Error::Decode(format!("bad direction byte {d}"))),
            };
            let mut ts = [0u8; 8];
            r.read_exact(&mut ts)?;
            let frame = Message::read_frame(r)?.ok_or_else(|| Error::Decode("missing frame after header".into()))?;
            out.push(direction, u64::from_le_bytes(ts), Message::decode(&frame)?);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
