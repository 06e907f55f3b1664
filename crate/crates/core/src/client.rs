//! Client session runtime shared by the publisher and subscriber.
//!
//! A session runs three threads: a reader that handles acknowledgements and
//! reconnects after connection loss, a delivery thread that verifies inbound
//! envelopes and calls handlers one at a time, and a timer that sends
//! PINGREQ when idle and retransmits unacknowledged publishes.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use parking_lot::Mutex;
use thiserror::Error;

use crate::broker::{ConnectCredential, InboundQos};
use crate::clock::Clock;
use crate::codec::{
    encode_packet, CodecLimits, Connect, ConnectReturnCode, Packet, Publish, QoS, SubAckCode,
    Subscribe, Unsubscribe,
};
use crate::envelope::{self, deserialize_envelope, EnvelopeError, ReplayState};
use crate::net::{PacketReader, ReadError, POLL_INTERVAL};
use crate::pki::{import_secret_key, read_certificate, Certificate, KeyPair, PkiError};
use crate::topic::{matches, parse_filter, TopicError, TopicFilter, TopicName};

pub const DEFAULT_KEEP_ALIVE: u16 = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReconnectPolicy {
    pub initial: Duration,
    pub cap: Duration,
}

impl Default for ReconnectPolicy {
    fn default() -> Self {
        ReconnectPolicy {
            initial: Duration::from_secs(1),
            cap: Duration::from_secs(60),
        }
    }
}

/// Doubling delay sequence starting at `initial`, capped at `cap`.
#[derive(Clone, Debug)]
pub struct Backoff {
    policy: ReconnectPolicy,
    next: Duration,
}

impl Backoff {
    pub fn new(policy: ReconnectPolicy) -> Self {
        Backoff {
            policy,
            next: policy.initial,
        }
    }

    pub fn next_delay(&mut self) -> Duration {
        let d = self.next;
        self.next = (self.next * 2).min(self.policy.cap);
        d
    }

    pub fn reset(&mut self) {
        self.next = self.policy.initial;
    }
}

#[derive(Clone, Debug)]
pub struct ClientConfig {
    pub host: String,
    pub port: u16,
    pub client_id: String,
    pub cert_path: PathBuf,
    pub key_path: PathBuf,
    pub trust_root_path: PathBuf,
    /// Holds `<subject>.cert` for every sender this client accepts.
    pub peer_cert_dir: PathBuf,
    pub keep_alive: u16,
    pub reconnect: ReconnectPolicy,
    pub retry_interval: Duration,
    pub max_attempts: u32,
    pub freshness_window_ms: u64,
    pub connect_timeout: Duration,
}

impl ClientConfig {
    /// Uses the `<dir>/<subject>.cert`, `<dir>/<subject>.key`, `<dir>/ca.cert`
    /// layout, with `dir` also serving as the peer certificate directory.
    pub fn from_cert_dir(host: &str, port: u16, client_id: &str, dir: &Path, subject: &str) -> Self {
        ClientConfig {
            host: host.to_owned(),
            port,
            client_id: client_id.to_owned(),
            cert_path: dir.join(format!("{subject}.cert")),
            key_path: dir.join(format!("{subject}.key")),
            trust_root_path: dir.join("ca.cert"),
            peer_cert_dir: dir.to_owned(),
            keep_alive: DEFAULT_KEEP_ALIVE,
            reconnect: ReconnectPolicy::default(),
            retry_interval: Duration::from_secs(5),
            max_attempts: 5,
            freshness_window_ms: envelope::DEFAULT_FRESHNESS_WINDOW_MS,
            connect_timeout: Duration::from_secs(10),
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if self.client_id.is_empty() {
            return Err(ClientError::Config("client id is empty".into()));
        }
        if self.keep_alive == 0 {
            return Err(ClientError::Config("keepalive must be at least 1 s".into()));
        }
        if self.max_attempts == 0 {
            return Err(ClientError::Config("max attempts must be at least 1".into()));
        }
        Ok(())
    }
}

/// The identity a client presents and the root it trusts.
#[derive(Clone, Debug)]
pub struct Credentials {
    pub certificate: Certificate,
    pub keypair: KeyPair,
    pub trust_root: Certificate,
}

impl Credentials {
    pub fn load(config: &ClientConfig) -> Result<Self, ClientError> {
        let certificate = read_certificate(&config.cert_path)?;
        let keypair = import_secret_key(&config.key_path)?;
        let trust_root = read_certificate(&config.trust_root_path)?;
        if !keypair.matches(&certificate) {
            return Err(ClientError::Credentials(PkiError::KeyMismatch));
        }
        Ok(Credentials {
            certificate,
            keypair,
            trust_root,
        })
    }
}

/// Sender certificates looked up by subject.
#[derive(Clone, Debug, Default)]
pub struct PeerDirectory {
    dir: Option<PathBuf>,
    pinned: HashMap<String, Certificate>,
}

impl PeerDirectory {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        PeerDirectory {
            dir: Some(dir.into()),
            pinned: HashMap::new(),
        }
    }

    pub fn insert(&mut self, cert: Certificate) {
        self.pinned.insert(cert.subject.clone(), cert);
    }

    /// Pinned certificates first, then `<dir>/<subject>.cert` read fresh.
    pub fn lookup(&self, subject: &str) -> Option<Certificate> {
        if let Some(c) = self.pinned.get(subject) {
            return Some(c.clone());
        }
        let safe = !subject.is_empty()
            && subject != "ca"
            && !subject.starts_with('.')
            && !subject.contains(['/', '\\', '\0']);
        if !safe {
            return None;
        }
        let cert = read_certificate(&self.dir.as_ref()?.join(format!("{subject}.cert"))).ok()?;
        (cert.subject == subject).then_some(cert)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeliveredMessage {
    pub topic: String,
    pub payload: Vec<u8>,
    pub sender_subject: String,
    pub sequence: u64,
    pub timestamp_ms: u64,
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("credentials: {0}")]
    Credentials(#[from] PkiError),
    #[error("connect failed: {0}")]
    ConnectFailed(String),
    #[error("broker refused connection: {0:?}")]
    AuthRejected(ConnectReturnCode),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("not connected")]
    NotConnected,
    #[error("no acknowledgement after all retransmissions")]
    DeliveryTimeout,
    #[error("subscription to {0} rejected")]
    SubscribeRejected(String),
    #[error("topic: {0}")]
    Topic(#[from] TopicError),
    #[error("envelope: {0}")]
    Envelope(#[from] EnvelopeError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClientStats {
    pub published: u64,
    pub delivered: u64,
    pub rejected: u64,
    pub retransmits: u64,
    pub reconnects: u64,
    pub pings_sent: u64,
}

#[derive(Default)]
struct AtomicStats {
    published: AtomicU64,
    delivered: AtomicU64,
    rejected: AtomicU64,
    retransmits: AtomicU64,
    reconnects: AtomicU64,
    pings_sent: AtomicU64,
}

fn bump(c: &AtomicU64) {
    c.fetch_add(1, Ordering::Relaxed);
}

type Handler = Arc<Mutex<dyn FnMut(DeliveredMessage) + Send>>;

struct Subscription {
    raw: String,
    filter: TopicFilter,
    qos: QoS,
    handler: Handler,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    AwaitPubAck,
    AwaitPubRec,
    AwaitPubComp,
}

struct PendingPublish {
    publish: Publish,
    stage: Stage,
    sent_at: Instant,
    attempts: u32,
    done: mpsc::Sender<Result<(), ClientError>>,
}

struct SubWaiter {
    filters: Vec<String>,
    reply: Option<mpsc::Sender<Vec<SubAckCode>>>,
}

struct IoState {
    writer: Option<TcpStream>,
    next_packet_id: u16,
    next_sequence: u64,
    pending: HashMap<u16, PendingPublish>,
    sub_waiters: HashMap<u16, SubWaiter>,
    last_sent: Instant,
}

impl IoState {
    fn allocate_id(&mut self) -> u16 {
        loop {
            let id = self.next_packet_id;
            self.next_packet_id = self.next_packet_id.checked_add(1).unwrap_or(1);
            if !self.pending.contains_key(&id) && !self.sub_waiters.contains_key(&id) {
                return id;
            }
        }
    }

    fn write(&mut self, packet: &Packet) -> Result<(), ClientError> {
        let frame = encode_packet(packet).map_err(|e| ClientError::Protocol(e.to_string()))?;
        let stream = self.writer.as_mut().ok_or(ClientError::NotConnected)?;
        if let Err(e) = stream.write_all(&frame) {
            let _ = stream.shutdown(Shutdown::Both);
            self.writer = None;
            return Err(ClientError::ConnectFailed(e.to_string()));
        }
        self.last_sent = Instant::now();
        Ok(())
    }
}

struct Inner {
    config: ClientConfig,
    creds: Credentials,
    clock: Arc<dyn Clock>,
    peers: Mutex<PeerDirectory>,
    io: Mutex<IoState>,
    subscriptions: Mutex<Vec<Subscription>>,
    granted: Mutex<HashMap<String, SubAckCode>>,
    closed: AtomicBool,
    connected: AtomicBool,
    stats: AtomicStats,
    attempt_times: Mutex<Vec<Instant>>,
}

/// A connected (or reconnecting) MQTT client.
pub struct ClientSession {
    inner: Arc<Inner>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl fmt::Debug for ClientSession {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClientSession")
            .field("client_id", &self.inner.config.client_id)
            .field("connected", &self.is_connected())
            .finish()
    }
}

fn limits() -> CodecLimits {
    CodecLimits::default()
}

/// Opens TCP, sends CONNECT with a fresh credential and waits for CONNACK.
fn handshake(
    config: &ClientConfig,
    creds: &Credentials,
    clock: &dyn Clock,
) -> Result<(TcpStream, PacketReader), ClientError> {
    let addrs = (config.host.as_str(), config.port)
        .to_socket_addrs()
        .map_err(|e| ClientError::ConnectFailed(format!("{}:{}: {e}", config.host, config.port)))?;
    let mut last_err = io::Error::new(io::ErrorKind::NotFound, "no address");
    let mut stream = None;
    for addr in addrs {
        match TcpStream::connect_timeout(&addr, config.connect_timeout) {
            Ok(s) => {
                stream = Some(s);
                break;
            }
            Err(e) => last_err = e,
        }
    }
    let mut stream = stream.ok_or_else(|| ClientError::ConnectFailed(last_err.to_string()))?;
    let _ = stream.set_nodelay(true);

    let credential = ConnectCredential::create(
        &creds.keypair,
        &creds.certificate,
        &config.client_id,
        clock.now_ms(),
    )?
    .to_bytes()?;
    let connect = Packet::Connect(Connect {
        client_id: config.client_id.clone(),
        keep_alive: config.keep_alive,
        clean_session: true,
        credential: Some(credential),
    });
    let frame = encode_packet(&connect).map_err(|e| ClientError::Protocol(e.to_string()))?;
    stream
        .write_all(&frame)
        .map_err(|e| ClientError::ConnectFailed(e.to_string()))?;

    let read_half = stream
        .try_clone()
        .map_err(|e| ClientError::ConnectFailed(e.to_string()))?;
    let mut reader =
        PacketReader::new(read_half, limits()).map_err(|e| ClientError::ConnectFailed(e.to_string()))?;
    let deadline = Instant::now() + config.connect_timeout;
    match reader.read_packet(Some(deadline), &|| false) {
        Ok(Packet::ConnAck(ack)) if ack.code == ConnectReturnCode::Accepted => Ok((stream, reader)),
        Ok(Packet::ConnAck(ack)) => Err(ClientError::AuthRejected(ack.code)),
        Ok(other) => Err(ClientError::Protocol(format!(
            "expected CONNACK, got {:?}",
            other.packet_type()
        ))),
        Err(ReadError::Protocol(e)) => Err(ClientError::Protocol(e.to_string())),
        Err(e) => Err(ClientError::ConnectFailed(e.to_string())),
    }
}

impl ClientSession {
    /// Connects once; fails without retrying. After success the session
    /// reconnects on its own if the connection drops.
    pub fn connect(
        config: ClientConfig,
        creds: Credentials,
        clock: Arc<dyn Clock>,
    ) -> Result<ClientSession, ClientError> {
        config.validate()?;
        let first = handshake(&config, &creds, clock.as_ref())?;
        Ok(Self::spawn(config, creds, clock, Some(first)))
    }

    /// Returns at once and connects in the background with backoff.
    pub fn start(
        config: ClientConfig,
        creds: Credentials,
        clock: Arc<dyn Clock>,
    ) -> Result<ClientSession, ClientError> {
        config.validate()?;
        Ok(Self::spawn(config, creds, clock, None))
    }

    fn spawn(
        config: ClientConfig,
        creds: Credentials,
        clock: Arc<dyn Clock>,
        first: Option<(TcpStream, PacketReader)>,
    ) -> ClientSession {
        let peers = PeerDirectory::new(config.peer_cert_dir.clone());
        let inner = Arc::new(Inner {
            peers: Mutex::new(peers),
            io: Mutex::new(IoState {
                writer: None,
                next_packet_id: 1,
                next_sequence: 1,
                pending: HashMap::new(),
                sub_waiters: HashMap::new(),
                last_sent: Instant::now(),
            }),
            subscriptions: Mutex::new(Vec::new()),
            granted: Mutex::new(HashMap::new()),
            closed: AtomicBool::new(false),
            connected: AtomicBool::new(false),
            stats: AtomicStats::default(),
            attempt_times: Mutex::new(Vec::new()),
            config,
            creds,
            clock,
        });
        let reader = first.map(|(stream, reader)| {
            inner.attempt_times.lock().push(Instant::now());
            inner.install(stream);
            reader
        });

        let (tx, rx) = mpsc::channel::<Publish>();
        let name = inner.config.client_id.clone();
        let mut threads = Vec::new();

        let i = inner.clone();
        let delivery = thread::Builder::new()
            .name(format!("pqtt-deliver-{name}"))
            .spawn(move || i.delivery_loop(rx))
            .expect("spawn delivery thread");
        threads.push(delivery);

        let i = inner.clone();
        threads.push(
            thread::Builder::new()
                .name(format!("pqtt-read-{name}"))
                .spawn(move || i.reader_loop(reader, tx))
                .expect("spawn reader thread"),
        );
        let i = inner.clone();
        threads.push(
            thread::Builder::new()
                .name(format!("pqtt-timer-{name}"))
                .spawn(move || i.timer_loop())
                .expect("spawn timer thread"),
        );

        ClientSession {
            inner,
            threads: Mutex::new(threads),
        }
    }

    pub fn client_id(&self) -> &str {
        &self.inner.config.client_id
    }

    pub fn subject(&self) -> &str {
        &self.inner.creds.certificate.subject
    }

    pub fn is_connected(&self) -> bool {
        self.inner.connected.load(Ordering::SeqCst)
    }

    /// Blocks until connected or `timeout` elapses.
    pub fn wait_connected(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while !self.is_connected() {
            if Instant::now() >= deadline || self.inner.closed.load(Ordering::SeqCst) {
                return false;
            }
            thread::sleep(Duration::from_millis(10));
        }
        true
    }

    pub fn stats(&self) -> ClientStats {
        let s = &self.inner.stats;
        ClientStats {
            published: s.published.load(Ordering::Relaxed),
            delivered: s.delivered.load(Ordering::Relaxed),
            rejected: s.rejected.load(Ordering::Relaxed),
            retransmits: s.retransmits.load(Ordering::Relaxed),
            reconnects: s.reconnects.load(Ordering::Relaxed),
            pings_sent: s.pings_sent.load(Ordering::Relaxed),
        }
    }

    /// Start times of every connection attempt so far.
    pub fn connect_attempt_times(&self) -> Vec<Instant> {
        self.inner.attempt_times.lock().clone()
    }

    /// Trusts `cert` as a sender in addition to the peer directory.
    pub fn add_peer(&self, cert: Certificate) {
        self.inner.peers.lock().insert(cert);
    }

    /// Seals `payload` and publishes it; blocks until the QoS flow
    /// completes. Returns the envelope sequence number.
    pub fn publish(&self, topic: &str, payload: &[u8], qos: QoS) -> Result<u64, ClientError> {
        TopicName::new(topic)?;
        let inner = &self.inner;
        if inner.closed.load(Ordering::SeqCst) {
            return Err(ClientError::NotConnected);
        }
        let (done_tx, done_rx) = mpsc::channel();
        let sequence;
        {
            let mut io = inner.io.lock();
            if io.writer.is_none() {
                return Err(ClientError::NotConnected);
            }
            sequence = io.next_sequence;
            let env = envelope::seal(
                &inner.creds.keypair,
                &inner.creds.certificate.subject,
                sequence,
                topic,
                payload,
                inner.clock.now_ms(),
            )?;
            let mut publish = Publish {
                dup: false,
                qos,
                retain: false,
                topic: topic.to_owned(),
                packet_id: None,
                payload: env.to_bytes()?,
            };
            if qos != QoS::AtMostOnce {
                publish.packet_id = Some(io.allocate_id());
            }
            io.next_sequence += 1;
            io.write(&Packet::Publish(publish.clone()))?;
            bump(&inner.stats.published);
            match (qos, publish.packet_id) {
                (QoS::AtMostOnce, _) | (_, None) => return Ok(sequence),
                (_, Some(id)) => {
                    let stage = if qos == QoS::AtLeastOnce {
                        Stage::AwaitPubAck
                    } else {
                        Stage::AwaitPubRec
                    };
                    io.pending.insert(
                        id,
                        PendingPublish {
                            publish,
                            stage,
                            sent_at: Instant::now(),
                            attempts: 1,
                            done: done_tx,
                        },
                    );
                }
            }
        }
        match done_rx.recv() {
            Ok(result) => result.map(|_| sequence),
            Err(_) => Err(ClientError::NotConnected),
        }
    }

    /// Registers `handler` for messages matching `filter` and subscribes.
    /// Returns the QoS the broker granted.
    pub fn subscribe<F>(&self, filter: &str, qos: QoS, handler: F) -> Result<QoS, ClientError>
    where
        F: FnMut(DeliveredMessage) + Send + 'static,
    {
        let inner = &self.inner;
        inner.register(filter, qos, Arc::new(Mutex::new(handler)))?;
        let result = inner.send_subscribe(vec![(filter.to_owned(), qos)]);
        let code = match result {
            Ok(codes) => codes.first().copied().unwrap_or(SubAckCode::Failure),
            Err(e) => {
                inner.drop_subscription(filter);
                return Err(e);
            }
        };
        match code {
            SubAckCode::Granted(granted) => {
                info!(target: "pqtt::client", "client={} subscribed {filter} granted={granted}", inner.config.client_id);
                Ok(granted)
            }
            SubAckCode::Failure => {
                inner.drop_subscription(filter);
                Err(ClientError::SubscribeRejected(filter.to_owned()))
            }
        }
    }

    /// Registers `handler` without waiting for a connection. The
    /// subscription is (re)placed on every connect; [`Self::granted`]
    /// reports the broker's answer once it arrives.
    pub fn subscribe_on_connect<F>(&self, filter: &str, qos: QoS, handler: F) -> Result<(), ClientError>
    where
        F: FnMut(DeliveredMessage) + Send + 'static,
    {
        let inner = &self.inner;
        inner.register(filter, qos, Arc::new(Mutex::new(handler)))?;
        let mut io = inner.io.lock();
        if io.writer.is_some() {
            let id = io.allocate_id();
            io.write(&Packet::Subscribe(Subscribe {
                packet_id: id,
                filters: vec![(filter.to_owned(), qos)],
            }))?;
            io.sub_waiters.insert(
                id,
                SubWaiter {
                    filters: vec![filter.to_owned()],
                    reply: None,
                },
            );
        }
        Ok(())
    }

    /// The broker's latest SUBACK code for `filter`.
    pub fn granted(&self, filter: &str) -> Option<SubAckCode> {
        self.inner.granted.lock().get(filter).copied()
    }

    pub fn unsubscribe(&self, filter: &str) -> Result<(), ClientError> {
        let inner = &self.inner;
        inner.drop_subscription(filter);
        let mut io = inner.io.lock();
        let id = io.allocate_id();
        io.write(&Packet::Unsubscribe(Unsubscribe {
            packet_id: id,
            filters: vec![filter.to_owned()],
        }))
    }

    /// Sends DISCONNECT and stops all session threads. No handler runs after
    /// this returns (unless called from inside a handler, in which case the
    /// current handler finishes). Repeated calls do nothing.
    pub fn disconnect(&self) {
        let inner = &self.inner;
        if inner.closed.swap(true, Ordering::SeqCst) {
            return;
        }
        {
            let mut io = inner.io.lock();
            let _ = io.write(&Packet::Disconnect);
            if let Some(s) = io.writer.take() {
                let _ = s.shutdown(Shutdown::Both);
            }
            for (_, p) in io.pending.drain() {
                let _ = p.done.send(Err(ClientError::NotConnected));
            }
            io.sub_waiters.clear();
        }
        inner.connected.store(false, Ordering::SeqCst);
        let me = thread::current().id();
        for t in self.threads.lock().drain(..) {
            if t.thread().id() != me {
                let _ = t.join();
            }
        }
        info!(target: "pqtt::client", "client={} disconnected", inner.config.client_id);
    }
}

impl Drop for ClientSession {
    fn drop(&mut self) {
        self.disconnect();
    }
}

impl Inner {
    fn stopped(&self) -> bool {
        self.closed.load(Ordering::SeqCst)
    }

    fn install(&self, stream: TcpStream) {
        let mut io = self.io.lock();
        io.writer = Some(stream);
        io.last_sent = Instant::now();
        self.connected.store(true, Ordering::SeqCst);
    }

    fn register(&self, filter: &str, qos: QoS, handler: Handler) -> Result<(), ClientError> {
        let parsed = parse_filter(filter)?;
        self.subscriptions.lock().push(Subscription {
            raw: filter.to_owned(),
            filter: parsed,
            qos,
            handler,
        });
        Ok(())
    }

    fn drop_subscription(&self, filter: &str) {
        self.subscriptions.lock().retain(|s| s.raw != filter);
        self.granted.lock().remove(filter);
    }

    fn send_subscribe(&self, filters: Vec<(String, QoS)>) -> Result<Vec<SubAckCode>, ClientError> {
        let (tx, rx) = mpsc::channel();
        let id = {
            let mut io = self.io.lock();
            let id = io.allocate_id();
            let names = filters.iter().map(|(f, _)| f.clone()).collect();
            io.write(&Packet::Subscribe(Subscribe {
                packet_id: id,
                filters,
            }))?;
            io.sub_waiters.insert(
                id,
                SubWaiter {
                    filters: names,
                    reply: Some(tx),
                },
            );
            id
        };
        let wait = self.config.retry_interval * self.config.max_attempts;
        match rx.recv_timeout(wait) {
            Ok(codes) => Ok(codes),
            Err(_) => {
                self.io.lock().sub_waiters.remove(&id);
                Err(if self.stopped() {
                    ClientError::NotConnected
                } else {
                    ClientError::DeliveryTimeout
                })
            }
        }
    }

    /// Resubscribes and resends in-flight publishes after a reconnect.
    fn restore(&self) {
        let filters: Vec<_> = self
            .subscriptions
            .lock()
            .iter()
            .map(|s| (s.raw.clone(), s.qos))
            .collect();
        let mut io = self.io.lock();
        if !filters.is_empty() {
            let id = io.allocate_id();
            let names = filters.iter().map(|(f, _)| f.clone()).collect();
            if io
                .write(&Packet::Subscribe(Subscribe {
                    packet_id: id,
                    filters,
                }))
                .is_ok()
            {
                io.sub_waiters.insert(
                    id,
                    SubWaiter {
                        filters: names,
                        reply: None,
                    },
                );
            }
        }
        let now = Instant::now();
        let resend: Vec<Packet> = io
            .pending
            .values_mut()
            .map(|p| {
                p.sent_at = now;
                match p.stage {
                    Stage::AwaitPubComp => Packet::PubRel(p.publish.packet_id.unwrap_or(0)),
                    _ => {
                        p.publish.dup = true;
                        Packet::Publish(p.publish.clone())
                    }
                }
            })
            .collect();
        for packet in resend {
            bump(&self.stats.retransmits);
            let _ = io.write(&packet);
        }
    }

    fn reconnect(&self, backoff: &mut Backoff, first: bool) -> Option<PacketReader> {
        let mut first = first;
        while !self.stopped() {
            if !first {
                let delay = backoff.next_delay();
                let until = Instant::now() + delay;
                while Instant::now() < until {
                    if self.stopped() {
                        return None;
                    }
                    thread::sleep(POLL_INTERVAL.min(until.saturating_duration_since(Instant::now())));
                }
            }
            first = false;
            self.attempt_times.lock().push(Instant::now());
            match handshake(&self.config, &self.creds, self.clock.as_ref()) {
                Ok((stream, reader)) => {
                    backoff.reset();
                    self.install(stream);
                    info!(target: "pqtt::client", "client={} connected to {}:{}", self.config.client_id, self.config.host, self.config.port);
                    return Some(reader);
                }
                Err(e) => {
                    warn!(target: "pqtt::client", "client={} connect attempt failed: {e}", self.config.client_id);
                }
            }
        }
        None
    }

    fn reader_loop(self: Arc<Self>, first: Option<PacketReader>, deliveries: mpsc::Sender<Publish>) {
        let mut backoff = Backoff::new(self.config.reconnect);
        let mut reader = match first {
            Some(r) => r,
            None => match self.reconnect(&mut backoff, true) {
                Some(r) => {
                    self.restore();
                    r
                }
                None => return,
            },
        };
        let mut inbound = InboundQos::default();
        loop {
            let stop = || self.stopped();
            match reader.read_packet(None, &stop) {
                Ok(packet) => self.handle(packet, &mut inbound, &deliveries),
                Err(e) => {
                    if self.stopped() {
                        return;
                    }
                    warn!(target: "pqtt::client", "client={} connection lost: {e}", self.config.client_id);
                    self.connected.store(false, Ordering::SeqCst);
                    {
                        let mut io = self.io.lock();
                        if let Some(s) = io.writer.take() {
                            let _ = s.shutdown(Shutdown::Both);
                        }
                        io.sub_waiters.clear();
                    }
                    inbound = InboundQos::default();
                    match self.reconnect(&mut backoff, false) {
                        Some(r) => {
                            bump(&self.stats.reconnects);
                            reader = r;
                            self.restore();
                        }
                        None => return,
                    }
                }
            }
        }
    }

    fn handle(&self, packet: Packet, inbound: &mut InboundQos, deliveries: &mpsc::Sender<Publish>) {
        let action = match packet {
            Packet::Publish(p) => Some(inbound.on_publish(p)),
            Packet::PubRel(id) => Some(inbound.on_pubrel(id)),
            Packet::PubAck(id) => {
                let mut io = self.io.lock();
                if matches!(io.pending.get(&id), Some(p) if p.stage == Stage::AwaitPubAck) {
                    if let Some(p) = io.pending.remove(&id) {
                        let _ = p.done.send(Ok(()));
                    }
                }
                None
            }
            Packet::PubRec(id) => {
                let mut io = self.io.lock();
                if let Some(p) = io.pending.get_mut(&id) {
                    if p.stage == Stage::AwaitPubRec {
                        p.stage = Stage::AwaitPubComp;
                        p.sent_at = Instant::now();
                        p.attempts = 1;
                    }
                }
                let _ = io.write(&Packet::PubRel(id));
                None
            }
            Packet::PubComp(id) => {
                let mut io = self.io.lock();
                if matches!(io.pending.get(&id), Some(p) if p.stage == Stage::AwaitPubComp) {
                    if let Some(p) = io.pending.remove(&id) {
                        let _ = p.done.send(Ok(()));
                    }
                }
                None
            }
            Packet::SubAck(ack) => {
                let waiter = self.io.lock().sub_waiters.remove(&ack.packet_id);
                if let Some(w) = waiter {
                    let mut granted = self.granted.lock();
                    for (f, code) in w.filters.iter().zip(&ack.codes) {
                        granted.insert(f.clone(), *code);
                    }
                    drop(granted);
                    if let Some(reply) = w.reply {
                        let _ = reply.send(ack.codes);
                    }
                }
                None
            }
            Packet::UnsubAck(_) | Packet::PingResp => None,
            other => {
                debug!(target: "pqtt::client", "ignoring {:?}", other.packet_type());
                None
            }
        };
        if let Some(action) = action {
            if let Some(reply) = &action.reply {
                let _ = self.io.lock().write(reply);
            }
            if let Some(publish) = action.route {
                let _ = deliveries.send(publish);
            }
        }
    }

    fn verify(&self, publish: &Publish, replay: &mut ReplayState) -> Result<DeliveredMessage, String> {
        let env = deserialize_envelope(&publish.payload).map_err(|e| e.to_string())?;
        if env.topic != publish.topic {
            return Err(format!("envelope topic {:?} differs from {:?}", env.topic, publish.topic));
        }
        let cert = self
            .peers
            .lock()
            .lookup(&env.sender_subject)
            .ok_or_else(|| format!("no certificate for sender {:?}", env.sender_subject))?;
        let payload = envelope::open(&env, &cert, &self.creds.trust_root, replay, self.clock.now_ms())
            .map_err(|e| e.to_string())?;
        Ok(DeliveredMessage {
            topic: env.topic,
            payload,
            sender_subject: env.sender_subject,
            sequence: env.sequence,
            timestamp_ms: env.timestamp_ms,
        })
    }

    fn delivery_loop(self: Arc<Self>, rx: mpsc::Receiver<Publish>) {
        let mut replay = ReplayState::new(self.config.freshness_window_ms);
        loop {
            let publish = match rx.recv_timeout(POLL_INTERVAL) {
                Ok(p) => p,
                Err(mpsc::RecvTimeoutError::Timeout) => {
                    if self.stopped() {
                        return;
                    }
                    continue;
                }
                Err(mpsc::RecvTimeoutError::Disconnected) => return,
            };
            if self.stopped() {
                return;
            }
            let message = match self.verify(&publish, &mut replay) {
                Ok(m) => m,
                Err(reason) => {
                    bump(&self.stats.rejected);
                    warn!(target: "pqtt::client", "client={} rejected message on {}: {reason}", self.config.client_id, publish.topic);
                    continue;
                }
            };
            let Ok(topic) = TopicName::new(message.topic.clone()) else {
                continue;
            };
            let handlers: Vec<Handler> = self
                .subscriptions
                .lock()
                .iter()
                .filter(|s| matches(&s.filter, &topic))
                .map(|s| s.handler.clone())
                .collect();
            bump(&self.stats.delivered);
            for h in handlers {
                if self.stopped() {
                    return;
                }
                (h.lock())(message.clone());
            }
        }
    }

    fn timer_loop(self: Arc<Self>) {
        let keep_alive = Duration::from_secs(self.config.keep_alive as u64);
        while !self.stopped() {
            thread::sleep(Duration::from_millis(25));
            let now = Instant::now();
            let mut io = self.io.lock();
            if io.writer.is_none() {
                continue;
            }
            if now.duration_since(io.last_sent) >= keep_alive && io.write(&Packet::PingReq).is_ok() {
                bump(&self.stats.pings_sent);
            }
            let mut resend = Vec::new();
            let mut expired = Vec::new();
            for (&id, p) in io.pending.iter_mut() {
                if now.duration_since(p.sent_at) < self.config.retry_interval {
                    continue;
                }
                if p.attempts >= self.config.max_attempts {
                    expired.push(id);
                    continue;
                }
                p.attempts += 1;
                p.sent_at = now;
                resend.push(match p.stage {
                    Stage::AwaitPubComp => Packet::PubRel(id),
                    _ => {
                        p.publish.dup = true;
                        Packet::Publish(p.publish.clone())
                    }
                });
            }
            for id in expired {
                if let Some(p) = io.pending.remove(&id) {
                    warn!(target: "pqtt::client", "client={} packet {id} unacknowledged after {} attempts", self.config.client_id, p.attempts);
                    let _ = p.done.send(Err(ClientError::DeliveryTimeout));
                }
            }
            for packet in resend {
                bump(&self.stats.retransmits);
                let _ = io.write(&packet);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_to_cap_and_resets() {
        let mut b = Backoff::new(ReconnectPolicy::default());
        let secs: Vec<u64> = (0..9).map(|_| b.next_delay().as_secs()).collect();
        assert_eq!(secs, vec![1, 2, 4, 8, 16, 32, 60, 60, 60]);
        b.reset();
        assert_eq!(b.next_delay(), Duration::from_secs(1));
    }

    #[test]
    fn config_validation() {
        let dir = Path::new("/tmp/certs");
        let mut c = ClientConfig::from_cert_dir("localhost", 8883, "pub-01", dir, "pub-01");
        assert_eq!(c.cert_path, dir.join("pub-01.cert"));
        assert_eq!(c.trust_root_path, dir.join("ca.cert"));
        assert_eq!(c.keep_alive, 30);
        assert!(c.validate().is_ok());
        c.keep_alive = 0;
        assert!(matches!(c.validate(), Err(ClientError::Config(_))));
        c.keep_alive = 1;
        c.client_id.clear();
        assert!(matches!(c.validate(), Err(ClientError::Config(_))));
    }

    #[test]
    fn peer_lookup_refuses_path_like_subjects() {
        let dir = tempfile::tempdir().unwrap();
        let peers = PeerDirectory::new(dir.path());
        for s in ["", "../x", "a/b", ".hidden", "ca"] {
            assert!(peers.lookup(s).is_none(), "{s}");
        }
    }
}
