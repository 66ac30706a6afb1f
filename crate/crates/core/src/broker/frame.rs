//! Wire framing. Layout, all integers big-endian:
//!
//! ```text
//! u32 N | u16 topic_len | topic (UTF-8) | u64 seq | payload
//!       '------------------ N bytes ------------------'
//! ```

use std::io::{self, Read};

use thiserror::Error;

use super::{validate_topic, Envelope};

pub const DEFAULT_MAX_FRAME: usize = 16 * 1024 * 1024;

/// Length prefix size.
pub const HEADER_LEN: usize = 4;

/// topic_len + seq
const FIXED_LEN: usize = 2 + 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("frame of {len} bytes exceeds cap of {cap}")]
    FrameTooLarge { len: usize, cap: usize },
    #[error("topic length {topic_len} does not fit envelope of {envelope_len} bytes")]
    BadTopicLength { topic_len: usize, envelope_len: usize },
    #[error("invalid topic: {0}")]
    BadTopic(String),
    #[error("truncated frame: have {have} of {need} bytes")]
    TruncatedFrame { have: usize, need: usize },
}

pub fn encode_frame(e: &Envelope) -> Vec<u8> {
    let topic = e.topic.as_bytes();
    assert!(topic.len() <= u16::MAX as usize, "topic longer than 65535 bytes");
    let n = FIXED_LEN + topic.len() + e.payload.len();
    let mut out = Vec::with_capacity(HEADER_LEN + n);
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(topic.len() as u16).to_be_bytes());
    out.extend_from_slice(topic);
    out.extend_from_slice(&e.seq.to_be_bytes());
    out.extend_from_slice(&e.payload);
    out
}

/// Decodes one frame from the front of `buf`.
///
/// `Ok(None)` means more bytes are needed and nothing was consumed; otherwise
/// returns the envelope and the number of bytes it occupied.
pub fn decode_frame(buf: &[u8], max_frame: usize) -> Result<Option<(Envelope, usize)>, FrameError> {
    let Some(len_bytes) = buf.get(..HEADER_LEN) else {
        return Ok(None);
    };
    let n = u32::from_be_bytes(len_bytes.try_into().unwrap()) as usize;
    if n > max_frame {
        return Err(FrameError::FrameTooLarge { len: n, cap: max_frame });
    }
    if n < FIXED_LEN {
        return Err(FrameError::TruncatedFrame { have: n, need: FIXED_LEN });
    }
    let Some(body) = buf.get(HEADER_LEN..HEADER_LEN + n) else {
        return Ok(None);
    };
    let topic_len = u16::from_be_bytes([body[0], body[1]]) as usize;
    if topic_len > n - FIXED_LEN {
        return Err(FrameError::BadTopicLength { topic_len, envelope_len: n });
    }
    let topic = std::str::from_utf8(&body[2..2 + topic_len]).map_err(|e| FrameError::BadTopic(e.to_string()))?;
    validate_topic(topic).map_err(|e| FrameError::BadTopic(e.to_string()))?;
    let seq_at = 2 + topic_len;
    let seq = u64::from_be_bytes(body[seq_at..seq_at + 8].try_into().unwrap());
    let payload = body[seq_at + 8..].to_vec();
    Ok(Some((Envelope::new(topic, seq, payload), HEADER_LEN + n)))
}

/// Reads whole frames from a byte stream.
pub struct FrameReader<R> {
    inner: R,
    buf: Vec<u8>,
    max_frame: usize,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        Self::with_cap(inner, DEFAULT_MAX_FRAME)
    }

    pub fn with_cap(inner: R, max_frame: usize) -> Self {
        Self { inner, buf: Vec::new(), max_frame }
    }

    /// `Ok(None)` on clean end of stream. A stream ending inside a frame is
    /// [`FrameError::TruncatedFrame`].
    pub fn read_frame(&mut self) -> io::Result<Option<Envelope>> {
        let mut chunk = [0u8; 64 * 1024];
        loop {
            match decode_frame(&self.buf, self.max_frame) {
                Ok(Some((env, used))) => {
                    self.buf.drain(..used);
                    return Ok(Some(env));
                }
                Ok(None) => {}
                Err(e) => return Err(io::Error::new(io::ErrorKind::InvalidData, e)),
            }
            let n = self.inner.read(&mut chunk)?;
            if n == 0 {
                if self.buf.is_empty() {
                    return Ok(None);
                }
                let need = if self.buf.len() < HEADER_LEN {
                    HEADER_LEN
                } else {
                    HEADER_LEN + u32::from_be_bytes(self.buf[..4].try_into().unwrap()) as usize
                };
                let err = FrameError::TruncatedFrame { have: self.buf.len(), need };
                return Err(io::Error::new(io::ErrorKind::UnexpectedEof, err));
            }
            self.buf.extend_from_slice(&chunk[..n]);
        }
    }

    pub fn get_mut(&mut self) -> &mut R {
        &mut self.inner
    }
}
