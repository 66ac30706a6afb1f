use std::collections::HashMap;
use std::time::Duration;

use super::{BrokerError, Delivery, Inbox};

/// Consumer-side filter for at-least-once delivery. Relies on per-producer
/// FIFO: anything at or below the highest seq seen for (producer, topic) is a replay.
#[derive(Debug, Default)]
pub struct Deduper {
    last: HashMap<(String, String), u64>,
    replays: u64,
}

impl Deduper {
    pub fn new() -> Self {
        Self::default()
    }

    /// True when the delivery is new.
    pub fn accept(&mut self, d: &Delivery) -> bool {
        let key = (d.producer.clone(), d.envelope.topic.clone());
        let last = self.last.entry(key).or_insert(0);
        if d.envelope.seq <= *last {
            self.replays += 1;
            false
        } else {
            *last = d.envelope.seq;
            true
        }
    }

    pub fn replays(&self) -> u64 {
        self.replays
    }
}

/// An [`Inbox`] that silently drops replays.
pub struct DedupInbox<I> {
    inner: I,
    dedup: Deduper,
}

impl<I: Inbox> DedupInbox<I> {
    pub fn new(inner: I) -> Self {
        Self { inner, dedup: Deduper::new() }
    }

    pub fn replays(&self) -> u64 {
        self.dedup.replays()
    }
}

impl<I: Inbox> Inbox for DedupInbox<I> {
    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Delivery>, BrokerError> {
        loop {
            match self.inner.recv_timeout(timeout)? {
                Some(d) if !self.dedup.accept(&d) => continue,
                other => return Ok(other),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::broker::Envelope;

    fn d(producer: &str, topic: &str, seq: u64) -> Delivery {
        Delivery { producer: producer.into(), envelope: Envelope::new(topic, seq, vec![]) }
    }

    #[test]
    fn replays_are_dropped_per_producer_and_topic() {
        let mut dd = Deduper::new();
        assert!(dd.accept(&d("a", "t", 1)));
        assert!(dd.accept(&d("a", "t", 2)));
        assert!(!dd.accept(&d("a", "t", 2)));
        assert!(!dd.accept(&d("a", "t", 1)));
        assert!(dd.accept(&d("b", "t", 1)));
        assert!(dd.accept(&d("a", "u", 1)));
        assert!(dd.accept(&d("a", "t", 3)));
        assert_eq!(dd.replays(), 2);
    }
}
