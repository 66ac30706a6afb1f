//! TCP transport. Every message on the socket is one frame; topics starting
//! with `$` carry the session protocol:
//!
//! | direction | topic     | seq          | payload                                   |
//! |-----------|-----------|--------------|-------------------------------------------|
//! | c -> s    | `$hello`  | 0            | client name (producer / durable session)  |
//! | s -> c    | `$hello`  | 0            | empty                                     |
//! | c -> s    | `$sub`    | 0            | newline-separated topic patterns          |
//! | s -> c    | `$suback` | 0            | empty                                     |
//! | s -> c    | `$msg`    | delivery id  | u16 producer len, producer, inner frame   |
//! | c -> s    | `$ack`    | delivery id  | empty (cumulative)                        |
//! | c -> s    | any other | envelope seq | payload: a publish                        |
//! | s -> c    | `$puback` | envelope seq | topic                                     |
//!
//! Subscriber sessions are durable by name: deliveries not yet acknowledged
//! when a connection drops are sent again, in order, on the next `$sub`.

use std::collections::{HashMap, VecDeque};
use std::io::{self, ErrorKind, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::frame::{decode_frame, encode_frame, FrameReader, DEFAULT_MAX_FRAME};
use super::{Backoff, Broker, BrokerError, Delivery, Envelope, Inbox, Link, Subscription};

const HELLO: &str = "$hello";
const SUB: &str = "$sub";
const SUBACK: &str = "$suback";
const MSG: &str = "$msg";
const ACK: &str = "$ack";
const PUBACK: &str = "$puback";

/// Deliveries a session may have outstanding before it stops pulling from the broker.
const MAX_IN_FLIGHT: usize = 256;
const POLL: Duration = Duration::from_millis(20);

fn lost(e: impl std::fmt::Display) -> BrokerError {
    BrokerError::ConnectionLost(e.to_string())
}

fn write_frame(stream: &Mutex<TcpStream>, e: &Envelope) -> io::Result<()> {
    let bytes = encode_frame(e);
    let mut s = stream.lock().unwrap_or_else(|p| p.into_inner());
    s.write_all(&bytes)
}

fn encode_delivery(id: u64, d: &Delivery) -> Envelope {
    let producer = d.producer.as_bytes();
    let mut payload = Vec::with_capacity(2 + producer.len() + d.envelope.payload.len() + 32);
    payload.extend_from_slice(&(producer.len() as u16).to_be_bytes());
    payload.extend_from_slice(producer);
    payload.extend_from_slice(&encode_frame(&d.envelope));
    Envelope::new(MSG, id, payload)
}

fn decode_delivery(e: &Envelope) -> Result<Delivery, BrokerError> {
    let p = &e.payload;
    let bad = || lost("malformed delivery");
    let len = u16::from_be_bytes(p.get(..2).ok_or_else(bad)?.try_into().unwrap()) as usize;
    let producer = std::str::from_utf8(p.get(2..2 + len).ok_or_else(bad)?).map_err(|_| bad())?;
    let (envelope, _) = decode_frame(&p[2 + len..], usize::MAX)?.ok_or_else(bad)?;
    Ok(Delivery { producer: producer.to_string(), envelope })
}

struct SessionState {
    unacked: VecDeque<(u64, Delivery)>,
    next_id: u64,
    generation: u64,
}

struct Session {
    sub: Mutex<Subscription>,
    state: Mutex<SessionState>,
}

struct Shared {
    broker: Broker,
    conns: Mutex<HashMap<u64, TcpStream>>,
    next_conn: AtomicU64,
    sessions: Mutex<HashMap<String, Arc<Session>>>,
    shutdown: AtomicBool,
    max_frame: usize,
    published: AtomicU64,
    /// 0 when disabled.
    disconnect_at: AtomicU64,
}

impl Shared {
    fn cut_connections(&self) {
        let conns = self.conns.lock().unwrap();
        tracing::debug!(count = conns.len(), "dropping all broker connections");
        for s in conns.values() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

/// TCP front end of an in-process [`Broker`].
pub struct BrokerServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

impl BrokerServer {
    pub fn bind(addr: impl ToSocketAddrs, broker: Broker) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            broker,
            conns: Mutex::new(HashMap::new()),
            next_conn: AtomicU64::new(1),
            sessions: Mutex::new(HashMap::new()),
            shutdown: AtomicBool::new(false),
            max_frame: DEFAULT_MAX_FRAME,
            published: AtomicU64::new(0),
            disconnect_at: AtomicU64::new(0),
        });
        let accept_shared = Arc::clone(&shared);
        let accept =
            thread::Builder::new().name("broker-accept".into()).spawn(move || accept_loop(listener, accept_shared))?;
        tracing::info!(%addr, "broker listening");
        Ok(Self { addr, shared, accept: Some(accept) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn broker(&self) -> &Broker {
        &self.shared.broker
    }

    pub fn connection_count(&self) -> usize {
        self.shared.conns.lock().unwrap().len()
    }

    /// Cuts every live connection. Sessions and queued messages survive.
    pub fn drop_connections(&self) {
        self.shared.cut_connections();
    }

    /// Cuts every connection once, when the `n`th publish arrives and before
    /// it is acknowledged, so the publisher has to retry it.
    pub fn disconnect_after_publishes(&self, n: u64) {
        self.shared.disconnect_at.store(n, Ordering::SeqCst);
    }

    pub fn published(&self) -> u64 {
        self.shared.published.load(Ordering::SeqCst)
    }

    pub fn shutdown(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        self.shared.broker.close();
        self.drop_connections();
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for BrokerServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    while !shared.shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_nodelay(true);
                let id = shared.next_conn.fetch_add(1, Ordering::SeqCst);
                if let Ok(clone) = stream.try_clone() {
                    shared.conns.lock().unwrap().insert(id, clone);
                }
                let conn_shared = Arc::clone(&shared);
                let spawned = thread::Builder::new().name(format!("broker-conn-{id}")).spawn(move || {
                    if let Err(e) = serve_connection(stream, &conn_shared) {
                        tracing::debug!(%peer, error = %e, "connection closed");
                    }
                    conn_shared.conns.lock().unwrap().remove(&id);
                });
                if spawned.is_err() {
                    shared.conns.lock().unwrap().remove(&id);
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                tracing::error!(error = %e, "accept failed");
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn serve_connection(stream: TcpStream, shared: &Arc<Shared>) -> io::Result<()> {
    let writer = Arc::new(Mutex::new(stream.try_clone()?));
    let mut reader = FrameReader::with_cap(stream, shared.max_frame);
    let mut name = String::new();
    let mut session: Option<Arc<Session>> = None;

    while let Some(frame) = reader.read_frame()? {
        match frame.topic.as_str() {
            HELLO => {
                name = String::from_utf8_lossy(&frame.payload).into_owned();
                write_frame(&writer, &Envelope::new(HELLO, 0, Vec::new()))?;
            }
            SUB => {
                let text = String::from_utf8_lossy(&frame.payload).into_owned();
                let patterns: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
                let s =
                    attach_session(shared, &name, &patterns).map_err(|e| io::Error::new(ErrorKind::InvalidInput, e))?;
                let generation = s.state.lock().unwrap().generation;
                write_frame(&writer, &Envelope::new(SUBACK, 0, Vec::new()))?;
                let (w, sess, sh) = (Arc::clone(&writer), Arc::clone(&s), Arc::clone(shared));
                thread::Builder::new()
                    .name(format!("broker-deliver-{name}"))
                    .spawn(move || deliver_loop(&w, &sess, generation, &sh))?;
                session = Some(s);
            }
            ACK => {
                if let Some(s) = &session {
                    s.state.lock().unwrap().unacked.retain(|(id, _)| *id > frame.seq);
                }
            }
            topic if topic.starts_with('$') => {
                return Err(io::Error::new(ErrorKind::InvalidData, format!("unknown control topic {topic}")));
            }
            _ => match shared.broker.publish_envelope(&name, &frame) {
                Ok(_)
                    if shared.published.fetch_add(1, Ordering::SeqCst) + 1
                        == shared.disconnect_at.load(Ordering::SeqCst) =>
                {
                    tracing::warn!(publishes = shared.disconnect_at.load(Ordering::SeqCst), "forced disconnect");
                    shared.cut_connections();
                    return Ok(());
                }
                Ok(seq) => write_frame(&writer, &Envelope::new(PUBACK, seq, frame.topic.into_bytes()))?,
                Err(e) => return Err(io::Error::other(e)),
            },
        }
    }
    Ok(())
}

fn attach_session(shared: &Shared, name: &str, patterns: &[&str]) -> Result<Arc<Session>, BrokerError> {
    let mut sessions = shared.sessions.lock().unwrap();
    if let Some(s) = sessions.get(name) {
        s.state.lock().unwrap().generation += 1;
        return Ok(Arc::clone(s));
    }
    let sub = shared.broker.subscribe_many(name, patterns)?;
    let s = Arc::new(Session {
        sub: Mutex::new(sub),
        state: Mutex::new(SessionState { unacked: VecDeque::new(), next_id: 1, generation: 0 }),
    });
    sessions.insert(name.to_string(), Arc::clone(&s));
    Ok(s)
}

fn deliver_loop(writer: &Mutex<TcpStream>, session: &Session, generation: u64, shared: &Shared) {
    let mut cursor = 0u64;
    loop {
        if shared.shutdown.load(Ordering::SeqCst) {
            return;
        }
        let (next, in_flight) = {
            let st = session.state.lock().unwrap();
            if st.generation != generation {
                return;
            }
            let next = st.unacked.iter().find(|(id, _)| *id > cursor).cloned();
            (next, st.unacked.len())
        };
        if let Some((id, d)) = next {
            if write_frame(writer, &encode_delivery(id, &d)).is_err() {
                return;
            }
            cursor = id;
            continue;
        }
        if in_flight >= MAX_IN_FLIGHT {
            thread::sleep(Duration::from_millis(1));
            continue;
        }
        let mut sub = session.sub.lock().unwrap();
        match sub.recv_timeout(POLL) {
            Ok(Some(d)) => {
                let mut st = session.state.lock().unwrap();
                let id = st.next_id;
                st.next_id += 1;
                st.unacked.push_back((id, d));
            }
            Ok(None) => {}
            Err(_) => return,
        }
    }
}

struct Conn {
    writer: TcpStream,
    reader: FrameReader<TcpStream>,
}

impl Conn {
    fn open(addr: SocketAddr, name: &str) -> Result<Self, BrokerError> {
        let stream = TcpStream::connect(addr).map_err(|e| BrokerError::Unavailable(e.to_string()))?;
        let _ = stream.set_nodelay(true);
        let writer = stream.try_clone().map_err(lost)?;
        let mut conn = Conn { writer, reader: FrameReader::new(stream) };
        conn.write(&Envelope::new(HELLO, 0, name.as_bytes().to_vec()))?;
        conn.expect(HELLO)?;
        Ok(conn)
    }

    fn write(&mut self, e: &Envelope) -> Result<(), BrokerError> {
        self.writer.write_all(&encode_frame(e)).map_err(lost)
    }

    fn read(&mut self) -> Result<Envelope, BrokerError> {
        match self.reader.read_frame() {
            Ok(Some(e)) => Ok(e),
            Ok(None) => Err(lost("closed by broker")),
            Err(e) => Err(lost(e)),
        }
    }

    fn expect(&mut self, topic: &str) -> Result<Envelope, BrokerError> {
        let e = self.read()?;
        if e.topic != topic {
            return Err(lost(format!("expected {topic}, got {}", e.topic)));
        }
        Ok(e)
    }
}

/// Producer side of a TCP connection: one synchronous publish at a time,
/// acknowledged by the broker before `send` returns.
pub struct TcpLink {
    addr: SocketAddr,
    name: String,
    conn: Option<Conn>,
}

impl TcpLink {
    pub fn new(addr: SocketAddr, name: impl Into<String>) -> Self {
        Self { addr, name: name.into(), conn: None }
    }
}

impl Link for TcpLink {
    fn producer_id(&self) -> &str {
        &self.name
    }

    fn send(&mut self, envelope: &Envelope) -> Result<u64, BrokerError> {
        if self.conn.is_none() {
            self.conn = Some(Conn::open(self.addr, &self.name)?);
        }
        let conn = self.conn.as_mut().expect("connected");
        let result = conn.write(envelope).and_then(|_| loop {
            let ack = conn.expect(PUBACK)?;
            if ack.seq == envelope.seq && ack.payload == envelope.topic.as_bytes() {
                break Ok(ack.seq);
            }
        });
        if result.is_err() {
            self.conn = None;
        }
        result
    }
}

/// Durable subscriber over TCP. Reconnects with backoff and resumes its
/// session; replays after a reconnect are possible, so wrap in
/// [`super::DedupInbox`].
pub struct TcpSubscriber {
    addr: SocketAddr,
    name: String,
    patterns: Vec<String>,
    conn: Option<Conn>,
    backoff: Backoff,
    max_attempts: u32,
}

impl TcpSubscriber {
    pub fn connect(addr: SocketAddr, name: impl Into<String>, patterns: &[&str]) -> Result<Self, BrokerError> {
        let mut s = Self {
            addr,
            name: name.into(),
            patterns: patterns.iter().map(|p| p.to_string()).collect(),
            conn: None,
            backoff: Backoff::new(Duration::from_millis(20), Duration::from_secs(2)),
            max_attempts: 40,
        };
        s.ensure_connected()?;
        Ok(s)
    }

    pub fn with_retry(mut self, backoff: Backoff, max_attempts: u32) -> Self {
        self.backoff = backoff;
        self.max_attempts = max_attempts.max(1);
        self
    }

    fn open(&self) -> Result<Conn, BrokerError> {
        let mut conn = Conn::open(self.addr, &self.name)?;
        conn.write(&Envelope::new(SUB, 0, self.patterns.join("\n").into_bytes()))?;
        conn.expect(SUBACK)?;
        Ok(conn)
    }

    fn ensure_connected(&mut self) -> Result<(), BrokerError> {
        let mut attempt = 0;
        while self.conn.is_none() {
            match self.open() {
                Ok(c) => {
                    self.conn = Some(c);
                    self.backoff.reset();
                }
                Err(e) if attempt + 1 < self.max_attempts => {
                    attempt += 1;
                    tracing::debug!(name = %self.name, error = %e, attempt, "resubscribing");
                    thread::sleep(self.backoff.next_delay());
                }
                Err(_) => return Err(BrokerError::Closed),
            }
        }
        Ok(())
    }
}

impl Inbox for TcpSubscriber {
    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Delivery>, BrokerError> {
        self.ensure_connected()?;
        let conn = self.conn.as_mut().expect("connected");
        let _ = conn.reader.get_mut().set_read_timeout(Some(timeout.max(Duration::from_millis(1))));
        match conn.reader.read_frame() {
            Ok(Some(frame)) if frame.topic == MSG => {
                let delivery = decode_delivery(&frame)?;
                if conn.write(&Envelope::new(ACK, frame.seq, Vec::new())).is_err() {
                    // unacked: the session resends it after reconnecting
                    self.conn = None;
                }
                Ok(Some(delivery))
            }
            Ok(Some(_)) => Ok(None),
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => Ok(None),
            Ok(None) | Err(_) => {
                self.conn = None;
                Ok(None)
            }
        }
    }
}
