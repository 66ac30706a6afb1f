//! Topic-based publish/subscribe decoupling the tiers.
//!
//! Producers assign a per-topic sequence number to every envelope; the broker
//! keeps per-producer FIFO order on each subscriber queue and makes no promise
//! about ordering across producers. Delivery is at-least-once: consumers drop
//! replays with [`Deduper`].
//!
//! Topic conventions: `packages/<edge_id>`, `control/<node_id>`,
//! `cloud/upload`, `alarms`. Topics starting with `$` are reserved for the
//! TCP session protocol.

mod aggregate;
mod dedup;
mod frame;
mod inproc;
mod tcp;

use std::collections::HashMap;
use std::time::Duration;

use thiserror::Error;

pub use aggregate::{aggregate, decompose, is_aggregate};
pub use dedup::{DedupInbox, Deduper};
pub use frame::{decode_frame, encode_frame, FrameError, FrameReader, DEFAULT_MAX_FRAME, HEADER_LEN};
pub use inproc::{Broker, BrokerConfig, InProcLink, Subscription};
pub use tcp::{BrokerServer, TcpLink, TcpSubscriber};

pub const MAX_TOPIC_LEN: usize = u16::MAX as usize;

pub const TOPIC_UPLOAD: &str = "cloud/upload";
pub const TOPIC_ALARMS: &str = "alarms";

pub fn packages_topic(edge_id: &str) -> String {
    format!("packages/{edge_id}")
}

pub fn control_topic(node_id: &str) -> String {
    format!("control/{node_id}")
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Envelope {
    pub topic: String,
    pub seq: u64,
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn new(topic: impl Into<String>, seq: u64, payload: impl Into<Vec<u8>>) -> Self {
        Self { topic: topic.into(), seq, payload: payload.into() }
    }
}

/// An envelope as seen by a subscriber, tagged with its producer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub producer: String,
    pub envelope: Envelope,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BrokerError {
    #[error("invalid topic: {0}")]
    TopicInvalid(String),
    #[error("connection lost: {0}")]
    ConnectionLost(String),
    #[error("broker unavailable: {0}")]
    Unavailable(String),
    #[error("broker closed")]
    Closed,
    #[error("aggregate inputs span several topics")]
    MixedTopics,
    #[error(transparent)]
    Frame(#[from] FrameError),
}

impl BrokerError {
    /// Whether retrying the same operation later may succeed.
    pub fn is_transient(&self) -> bool {
        matches!(self, BrokerError::ConnectionLost(_) | BrokerError::Unavailable(_))
    }
}

pub fn validate_topic(topic: &str) -> Result<(), BrokerError> {
    if topic.is_empty() {
        return Err(BrokerError::TopicInvalid("empty topic".into()));
    }
    if topic.len() > MAX_TOPIC_LEN {
        return Err(BrokerError::TopicInvalid(format!("{} bytes exceeds {MAX_TOPIC_LEN}", topic.len())));
    }
    Ok(())
}

fn validate_user_topic(topic: &str) -> Result<(), BrokerError> {
    validate_topic(topic)?;
    if topic.starts_with('$') {
        return Err(BrokerError::TopicInvalid(format!("{topic:?} is reserved")));
    }
    Ok(())
}

/// Exact topic, or `prefix/*` matching any topic below `prefix/`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TopicPattern {
    Exact(String),
    Prefix(String),
}

impl TopicPattern {
    pub fn parse(pattern: &str) -> Result<Self, BrokerError> {
        validate_topic(pattern)?;
        match pattern.strip_suffix('*') {
            Some(prefix) if prefix.ends_with('/') => Ok(TopicPattern::Prefix(prefix.to_string())),
            Some(_) => Err(BrokerError::TopicInvalid(format!("wildcard must follow '/': {pattern}"))),
            None => Ok(TopicPattern::Exact(pattern.to_string())),
        }
    }

    pub fn matches(&self, topic: &str) -> bool {
        match self {
            TopicPattern::Exact(t) => t == topic,
            TopicPattern::Prefix(p) => topic.len() > p.len() && topic.starts_with(p.as_str()),
        }
    }
}

/// One hop towards the broker. `send` must be idempotent per envelope:
/// retrying the same envelope after a failure may deliver it twice, never
/// with a different sequence number.
pub trait Link: Send {
    fn producer_id(&self) -> &str;
    fn send(&mut self, envelope: &Envelope) -> Result<u64, BrokerError>;
}

/// Receiving side of a subscription.
pub trait Inbox: Send {
    /// `Ok(None)` on timeout; `Err(Closed)` once the broker is gone.
    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Delivery>, BrokerError>;
}

impl<I: Inbox + ?Sized> Inbox for &mut I {
    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Delivery>, BrokerError> {
        (**self).recv_timeout(timeout)
    }
}

/// Assigns per-topic sequence numbers (starting at 1) and sends over a [`Link`].
pub struct Producer<L> {
    link: L,
    seqs: HashMap<String, u64>,
}

impl<L: Link> Producer<L> {
    pub fn new(link: L) -> Self {
        Self { link, seqs: HashMap::new() }
    }

    pub fn id(&self) -> &str {
        self.link.producer_id()
    }

    /// Stamps the next sequence number for `topic`.
    pub fn prepare(&mut self, topic: &str, payload: Vec<u8>) -> Result<Envelope, BrokerError> {
        validate_user_topic(topic)?;
        let seq = self.seqs.entry(topic.to_string()).or_insert(0);
        *seq += 1;
        Ok(Envelope::new(topic, *seq, payload))
    }

    pub fn send(&mut self, envelope: &Envelope) -> Result<u64, BrokerError> {
        self.link.send(envelope)
    }

    /// Sends, retrying transient failures with `backoff` until `max_attempts`.
    pub fn send_with_retry(
        &mut self,
        envelope: &Envelope,
        backoff: &mut Backoff,
        max_attempts: u32,
    ) -> Result<u64, BrokerError> {
        let mut attempt = 0;
        loop {
            match self.link.send(envelope) {
                Ok(seq) => {
                    backoff.reset();
                    return Ok(seq);
                }
                Err(e) if e.is_transient() && attempt + 1 < max_attempts => {
                    attempt += 1;
                    tracing::debug!(producer = self.id(), error = %e, attempt, "retrying send");
                    std::thread::sleep(backoff.next_delay());
                }
                Err(e) => return Err(e),
            }
        }
    }

    pub fn publish(&mut self, topic: &str, payload: Vec<u8>) -> Result<u64, BrokerError> {
        let envelope = self.prepare(topic, payload)?;
        self.send(&envelope)
    }

    pub fn link_mut(&mut self) -> &mut L {
        &mut self.link
    }
}

/// Exponential backoff: `base * 2^attempt`, capped.
#[derive(Debug, Clone)]
pub struct Backoff {
    base: Duration,
    cap: Duration,
    attempt: u32,
}

impl Backoff {
    pub const DEFAULT_CAP: Duration = Duration::from_secs(30);

    pub fn new(base: Duration, cap: Duration) -> Self {
        Self { base, cap, attempt: 0 }
    }

    pub fn next_delay(&mut self) -> Duration {
        let factor = 1u32.checked_shl(self.attempt.min(31)).unwrap_or(u32::MAX);
        self.attempt = self.attempt.saturating_add(1);
        self.base.saturating_mul(factor).min(self.cap)
    }

    pub fn reset(&mut self) {
        self.attempt = 0;
    }
}

impl Default for Backoff {
    fn default() -> Self {
        Self::new(Duration::from_millis(50), Self::DEFAULT_CAP)
    }
}
