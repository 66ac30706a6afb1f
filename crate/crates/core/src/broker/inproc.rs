use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use super::{validate_topic, BrokerError, Delivery, Envelope, Inbox, Link, Producer, TopicPattern};
use crate::model::Timestamp;

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    /// Publishers block while any matching subscriber queue holds this many messages.
    pub high_water_mark: usize,
    /// Messages published with no matching subscriber are kept this long (simulated seconds).
    pub retained_ttl_seconds: i64,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self { high_water_mark: 1024, retained_ttl_seconds: 3600 }
    }
}

struct SubState {
    patterns: Vec<TopicPattern>,
    queue: VecDeque<Delivery>,
}

struct Retained {
    delivery: Delivery,
    at: Timestamp,
}

#[derive(Default)]
struct State {
    subs: BTreeMap<u64, SubState>,
    next_sub: u64,
    retained: BTreeMap<String, VecDeque<Retained>>,
    now: Timestamp,
    closed: bool,
}

struct Inner {
    config: BrokerConfig,
    state: Mutex<State>,
    changed: Condvar,
}

/// In-process broker. Cheap to clone; all clones share one core.
#[derive(Clone)]
pub struct Broker {
    inner: Arc<Inner>,
}

impl Broker {
    pub fn new(config: BrokerConfig) -> Self {
        Self { inner: Arc::new(Inner { config, state: Mutex::new(State::default()), changed: Condvar::new() }) }
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.inner.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn producer(&self, name: impl Into<String>) -> Producer<InProcLink> {
        Producer::new(InProcLink { broker: self.clone(), name: name.into() })
    }

    /// Enqueues `envelope` for every matching subscriber, blocking while any of
    /// them is at the high-water mark. With no subscriber it is retained.
    pub fn publish_envelope(&self, producer: &str, envelope: &Envelope) -> Result<u64, BrokerError> {
        validate_topic(&envelope.topic)?;
        let hwm = self.inner.config.high_water_mark.max(1);
        let mut state = self.lock();
        loop {
            if state.closed {
                return Err(BrokerError::Closed);
            }
            let blocked = state
                .subs
                .values()
                .any(|s| s.queue.len() >= hwm && s.patterns.iter().any(|p| p.matches(&envelope.topic)));
            if !blocked {
                break;
            }
            state = self.inner.changed.wait(state).unwrap_or_else(|p| p.into_inner());
        }
        let delivery = Delivery { producer: producer.to_string(), envelope: envelope.clone() };
        let mut matched = false;
        for sub in state.subs.values_mut() {
            if sub.patterns.iter().any(|p| p.matches(&envelope.topic)) {
                sub.queue.push_back(delivery.clone());
                matched = true;
            }
        }
        if !matched {
            let at = state.now;
            state.retained.entry(envelope.topic.clone()).or_default().push_back(Retained { delivery, at });
        }
        drop(state);
        self.inner.changed.notify_all();
        Ok(envelope.seq)
    }

    pub fn subscribe(&self, consumer: &str, pattern: &str) -> Result<Subscription, BrokerError> {
        self.subscribe_many(consumer, &[pattern])
    }

    /// One queue fed by several patterns; per-producer order holds across them.
    pub fn subscribe_many(&self, consumer: &str, patterns: &[&str]) -> Result<Subscription, BrokerError> {
        let patterns = patterns.iter().map(|p| TopicPattern::parse(p)).collect::<Result<Vec<_>, _>>()?;
        let mut state = self.lock();
        if state.closed {
            return Err(BrokerError::Closed);
        }
        let mut queue = VecDeque::new();
        let topics: Vec<String> =
            state.retained.keys().filter(|t| patterns.iter().any(|p| p.matches(t))).cloned().collect();
        for t in topics {
            if let Some(msgs) = state.retained.remove(&t) {
                queue.extend(msgs.into_iter().map(|r| r.delivery));
            }
        }
        let id = state.next_sub;
        state.next_sub += 1;
        state.subs.insert(id, SubState { patterns, queue });
        tracing::trace!(consumer, id, "subscribed");
        Ok(Subscription { broker: self.clone(), id })
    }

    /// Advances simulated time and drops retained messages past their TTL.
    pub fn advance_clock(&self, now: Timestamp) {
        let ttl = self.inner.config.retained_ttl_seconds;
        let mut state = self.lock();
        state.now = state.now.max(now);
        let now = state.now;
        for queue in state.retained.values_mut() {
            queue.retain(|r| now - r.at < ttl);
        }
        state.retained.retain(|_, q| !q.is_empty());
    }

    pub fn retained_count(&self) -> usize {
        self.lock().retained.values().map(VecDeque::len).sum()
    }

    pub fn close(&self) {
        self.lock().closed = true;
        self.inner.changed.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.lock().closed
    }
}

impl Default for Broker {
    fn default() -> Self {
        Self::new(BrokerConfig::default())
    }
}

/// Receiving end of [`Broker::subscribe`]. Dropping it unsubscribes.
pub struct Subscription {
    broker: Broker,
    id: u64,
}

impl Subscription {
    pub fn try_recv(&mut self) -> Result<Option<Delivery>, BrokerError> {
        let mut state = self.broker.lock();
        let item = state.subs.get_mut(&self.id).and_then(|s| s.queue.pop_front());
        let closed = state.closed;
        drop(state);
        match item {
            Some(d) => {
                self.broker.inner.changed.notify_all();
                Ok(Some(d))
            }
            None if closed => Err(BrokerError::Closed),
            None => Ok(None),
        }
    }

    /// Blocks until a delivery arrives or the broker closes.
    pub fn recv(&mut self) -> Result<Delivery, BrokerError> {
        loop {
            if let Some(d) = self.recv_timeout(Duration::from_secs(3600))? {
                return Ok(d);
            }
        }
    }

    pub fn queued(&self) -> usize {
        self.broker.lock().subs.get(&self.id).map_or(0, |s| s.queue.len())
    }
}

impl Inbox for Subscription {
    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Delivery>, BrokerError> {
        let deadline = Instant::now() + timeout;
        let mut state = self.broker.lock();
        loop {
            if let Some(d) = state.subs.get_mut(&self.id).and_then(|s| s.queue.pop_front()) {
                drop(state);
                self.broker.inner.changed.notify_all();
                return Ok(Some(d));
            }
            if state.closed {
                return Err(BrokerError::Closed);
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(None);
            }
            state = self.broker.inner.changed.wait_timeout(state, deadline - now).unwrap_or_else(|p| p.into_inner()).0;
        }
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        self.broker.lock().subs.remove(&self.id);
        self.broker.inner.changed.notify_all();
    }
}

/// [`Link`] straight into an in-process [`Broker`].
pub struct InProcLink {
    broker: Broker,
    name: String,
}

impl Link for InProcLink {
    fn producer_id(&self) -> &str {
        &self.name
    }

    fn send(&mut self, envelope: &Envelope) -> Result<u64, BrokerError> {
        self.broker.publish_envelope(&self.name, envelope)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    #[test]
    fn publish_without_subscribers_is_retained() {
        let b = Broker::default();
        let mut p = b.producer("edge1");
        assert_eq!(p.publish("packages/edge1", b"a".to_vec()).unwrap(), 1);
        assert_eq!(b.retained_count(), 1);
        let mut s = b.subscribe("fog", "packages/*").unwrap();
        let d = s.try_recv().unwrap().unwrap();
        assert_eq!((d.producer.as_str(), d.envelope.seq), ("edge1", 1));
        assert_eq!(b.retained_count(), 0);
    }

    #[test]
    fn retained_messages_expire() {
        let b = Broker::default();
        let mut p = b.producer("e");
        p.publish("alarms", vec![]).unwrap();
        b.advance_clock(3599);
        assert_eq!(b.retained_count(), 1);
        b.advance_clock(3600);
        assert_eq!(b.retained_count(), 0);
        let mut s = b.subscribe("late", "alarms").unwrap();
        assert!(s.try_recv().unwrap().is_none());
    }

    #[test]
    fn consecutive_publishes_get_consecutive_seqs() {
        let b = Broker::default();
        let _s = b.subscribe("c", "t").unwrap();
        let mut p = b.producer("p");
        assert_eq!(p.publish("t", vec![]).unwrap(), 1);
        assert_eq!(p.publish("t", vec![]).unwrap(), 2);
        assert_eq!(p.publish("u", vec![]).unwrap(), 1);
    }

    #[test]
    fn fifo_for_one_producer() {
        let b = Broker::default();
        let mut s = b.subscribe("c", "t").unwrap();
        let mut p = b.producer("p");
        for _ in 0..5 {
            p.publish("t", vec![]).unwrap();
        }
        let seqs: Vec<u64> = (0..5).map(|_| s.try_recv().unwrap().unwrap().envelope.seq).collect();
        assert_eq!(seqs, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn pattern_filtering() {
        let b = Broker::default();
        let mut s = b.subscribe("c", "packages/*").unwrap();
        let mut p = b.producer("edge1");
        p.publish("control/edge1", vec![]).unwrap();
        p.publish("packages/edge1", vec![]).unwrap();
        assert_eq!(s.try_recv().unwrap().unwrap().envelope.topic, "packages/edge1");
        assert!(s.try_recv().unwrap().is_none());
    }

    #[test]
    fn empty_topic_rejected() {
        let b = Broker::default();
        assert!(matches!(b.publish_envelope("p", &Envelope::new("", 1, vec![])), Err(BrokerError::TopicInvalid(_))));
    }

    #[test]
    fn publisher_blocks_at_high_water_mark() {
        let b = Broker::new(BrokerConfig { high_water_mark: 2, ..Default::default() });
        let mut s = b.subscribe("slow", "t").unwrap();
        let b2 = b.clone();
        let handle = thread::spawn(move || {
            let mut p = b2.producer("fast");
            for _ in 0..5 {
                p.publish("t", vec![]).unwrap();
            }
        });
        thread::sleep(Duration::from_millis(100));
        assert_eq!(s.queued(), 2);
        let mut got = Vec::new();
        while got.len() < 5 {
            if let Some(d) = s.recv_timeout(Duration::from_secs(5)).unwrap() {
                got.push(d.envelope.seq);
            }
        }
        handle.join().unwrap();
        assert_eq!(got, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn close_wakes_receivers() {
        let b = Broker::default();
        let mut s = b.subscribe("c", "t").unwrap();
        let b2 = b.clone();
        let h = thread::spawn(move || {
            thread::sleep(Duration::from_millis(50));
            b2.close();
        });
        assert_eq!(s.recv(), Err(BrokerError::Closed));
        h.join().unwrap();
        assert!(matches!(b.producer("p").publish("t", vec![]), Err(BrokerError::Closed)));
    }

    #[test]
    fn dropped_subscription_stops_backpressure() {
        let b = Broker::new(BrokerConfig { high_water_mark: 1, ..Default::default() });
        let s = b.subscribe("c", "t").unwrap();
        let mut p = b.producer("p");
        p.publish("t", vec![]).unwrap();
        drop(s);
        // no subscriber left: retained, does not block
        p.publish("t", vec![]).unwrap();
        assert_eq!(b.retained_count(), 1);
    }
}
