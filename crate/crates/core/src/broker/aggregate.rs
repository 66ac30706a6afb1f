//! Packing several envelopes of one topic into fewer, larger envelopes.
//!
//! An aggregate's payload is `MAGIC | u32 count | count * frame`. Its seq is
//! the seq of the first inner envelope.

use super::frame::{decode_frame, encode_frame, FrameError, HEADER_LEN};
use super::{BrokerError, Envelope};

const MAGIC: &[u8; 4] = b"\0AGG";
const AGG_HEADER: usize = MAGIC.len() + 4;

pub fn is_aggregate(e: &Envelope) -> bool {
    e.payload.starts_with(MAGIC)
}

fn outer_overhead(topic: &str) -> usize {
    HEADER_LEN + 2 + topic.len() + 8 + AGG_HEADER
}

fn wrap(topic: &str, frames: &[Vec<u8>], first_seq: u64) -> Envelope {
    let mut payload = Vec::with_capacity(AGG_HEADER + frames.iter().map(Vec::len).sum::<usize>());
    payload.extend_from_slice(MAGIC);
    payload.extend_from_slice(&(frames.len() as u32).to_be_bytes());
    for f in frames {
        payload.extend_from_slice(f);
    }
    Envelope::new(topic, first_seq, payload)
}

/// Greedily packs `messages` (all on one topic) so each output frame is at
/// most `max_bytes`. A message too large to fit even alone is passed through
/// unwrapped, unless its payload could be mistaken for an aggregate.
pub fn aggregate(messages: &[Envelope], max_bytes: usize) -> Result<Vec<Envelope>, BrokerError> {
    let Some(first) = messages.first() else {
        return Ok(Vec::new());
    };
    let topic = first.topic.as_str();
    if messages.iter().any(|m| m.topic != topic) {
        return Err(BrokerError::MixedTopics);
    }
    let overhead = outer_overhead(topic);
    let mut out = Vec::new();
    let mut batch: Vec<Vec<u8>> = Vec::new();
    let mut batch_seq = 0;
    let mut batch_len = overhead;

    for m in messages {
        let frame = encode_frame(m);
        if overhead + frame.len() > max_bytes && !is_aggregate(m) {
            if !batch.is_empty() {
                out.push(wrap(topic, &batch, batch_seq));
                batch.clear();
                batch_len = overhead;
            }
            out.push(m.clone());
            continue;
        }
        if !batch.is_empty() && batch_len + frame.len() > max_bytes {
            out.push(wrap(topic, &batch, batch_seq));
            batch.clear();
            batch_len = overhead;
        }
        if batch.is_empty() {
            batch_seq = m.seq;
        }
        batch_len += frame.len();
        batch.push(frame);
    }
    if !batch.is_empty() {
        out.push(wrap(topic, &batch, batch_seq));
    }
    Ok(out)
}

/// Inverse of [`aggregate`]; a plain envelope decomposes to itself.
pub fn decompose(e: &Envelope) -> Result<Vec<Envelope>, BrokerError> {
    if !is_aggregate(e) {
        return Ok(vec![e.clone()]);
    }
    let body = &e.payload[MAGIC.len()..];
    let Some(count_bytes) = body.get(..4) else {
        return Err(FrameError::TruncatedFrame { have: body.len(), need: 4 }.into());
    };
    let count = u32::from_be_bytes(count_bytes.try_into().unwrap()) as usize;
    let mut rest = &body[4..];
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        match decode_frame(rest, usize::MAX)? {
            Some((inner, used)) => {
                out.push(inner);
                rest = &rest[used..];
            }
            None => return Err(FrameError::TruncatedFrame { have: rest.len(), need: rest.len() + 1 }.into()),
        }
    }
    Ok(out)
}
