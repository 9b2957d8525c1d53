//! Binary frames shared by both transports.
//!
//! A connection starts with the 5-byte magic `DEMX1` in each direction.
//! Each frame is then a little-endian `u32` byte length followed by
//!
//! ```text
//! u8 kind | u32 subset_id | u64 iteration | f64 × len payload
//! ```

use std::io::{self, Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"DEMX1";
const HEADER: usize = 1 + 4 + 8;
/// Frames larger than this are rejected as corrupt (1 GiB).
const MAX_FRAME: u32 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    Broadcast = 1,
    Stats = 2,
    LoglikRequest = 3,
    LoglikReply = 4,
    Shutdown = 5,
    Failure = 6,
    PeerStats = 7,
}

impl TryFrom<u8> for Kind {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        Ok(match v {
            1 => Kind::Broadcast,
            2 => Kind::Stats,
            3 => Kind::LoglikRequest,
            4 => Kind::LoglikReply,
            5 => Kind::Shutdown,
            6 => Kind::Failure,
            7 => Kind::PeerStats,
            other => return Err(Error::Protocol(format!("unknown frame kind {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub kind: Kind,
    pub subset_id: u32,
    pub iteration: u64,
    pub payload: Vec<f64>,
}

impl Frame {
    pub fn new(kind: Kind, subset_id: usize, iteration: u64, payload: Vec<f64>) -> Self {
        Frame {
            kind,
            subset_id: subset_id as u32,
            iteration,
            payload,
        }
    }

    /// A failure report; the UTF-8 bytes of `reason` travel one per `f64`.
    pub fn failure(subset_id: usize, iteration: u64, reason: &str) -> Self {
        let payload = reason.bytes().map(f64::from).collect();
        Frame::new(Kind::Failure, subset_id, iteration, payload)
    }

    pub fn failure_reason(&self) -> String {
        let bytes: Vec<u8> = self.payload.iter().map(|&v| v as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn subset(&self) -> usize {
        self.subset_id as usize
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let body = HEADER + 8 * self.payload.len();
        let mut out = Vec::with_capacity(4 + body);
        out.extend_from_slice(&(body as u32).to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.subset_id.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.to_bytes())?;
        w.flush()
    }

    /// Read one frame; `Ok(None)` on a clean end of stream before the
    /// length prefix.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Option<Frame>> {
        let mut len = [0u8; 4];
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        let len = u32::from_le_bytes(len);
        if len > MAX_FRAME || (len as usize) < HEADER || !(len as usize - HEADER).is_multiple_of(8) {
            return Err(Error::Protocol(format!("bad frame length {len}")));
        }
        let mut body = vec![0u8; len as usize];
        r.read_exact(&mut body)?;
        Self::from_body(&body).map(Some)
    }

    fn from_body(body: &[u8]) -> Result<Frame> {
        let kind = Kind::try_from(body[0])?;
        let subset_id = u32::from_le_bytes(body[1..5].try_into().expect("4 bytes"));
        let iteration = u64::from_le_bytes(body[5..13].try_into().expect("8 bytes"));
        let payload = body[HEADER..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Frame {
            kind,
            subset_id,
            iteration,
            payload,
        })
    }
}

pub fn write_magic<W: Write>(w: &mut W) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.flush()
}

pub fn read_magic<R: Read>(r: &mut R) -> Result<()> {
    let mut buf = [0u8; 5];
    r.read_exact(&mut buf)?;
    if &buf != MAGIC {
        return Err(Error::Protocol(format!(
            "bad handshake {:?}, expected {:?}",
            String::from_utf8_lossy(&buf),
            "DEMX1"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let f = Frame::new(Kind::Stats, 7, u64::MAX - 1, vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300]);
        let bytes = f.to_bytes();
        assert_eq!(&bytes[..4], &((13 + 32) as u32).to_le_bytes());
        assert_eq!(bytes[4], 2);
        let back = Frame::read_from(&mut bytes.as_slice()).unwrap().unwrap();
        assert_eq!(back.kind, f.kind);
        assert_eq!(back.subset_id, 7);
        assert_eq!(back.iteration, f.iteration);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.payload), bits(&f.payload));
    }

    #[test]
    fn failure_text_roundtrip() {
        let f = Frame::failure(3, 9, "E step failed: ß");
        let back = Frame::read_from(&mut f.to_bytes().as_slice()).unwrap().unwrap();
        assert_eq!(back.failure_reason(), "E step failed: ß");
    }

    #[test]
    fn rejects_garbage() {
        let mut bytes = Frame::new(Kind::Shutdown, 0, 0, vec![]).to_bytes();
        bytes[4] = 42;
        assert!(Frame::read_from(&mut bytes.as_slice()).is_err());
        let short = 5u32.to_le_bytes();
        assert!(Frame::read_from(&mut short.as_slice()).is_err());
        assert!(Frame::read_from(&mut [].as_slice()).unwrap().is_none());
        assert!(read_magic(&mut b"DEMX2".as_slice()).is_err());
    }
}
