//! The MQTT broker.
//!
//! One reader thread and one writer thread per connection. The subscription
//! trie and the session registry are behind reader/writer locks; routing for
//! a publisher happens on that publisher's reader thread, so messages from
//! one client reach every subscriber in publish order. A maintenance thread
//! runs the keep-alive sweep, outbound retransmission and the periodic
//! `$SYS/broker/counters` publish.

pub mod auth;
mod session;

use std::collections::HashMap;
use std::fmt;
use std::io::{self, ErrorKind, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use parking_lot::{Mutex, RwLock};
use serde::Serialize;

use crate::clock::Clock;
use crate::codec::{
    encode_packet, CodecLimits, ConnAck, Connect, ConnectReturnCode, Packet, ProtocolErrorKind,
    Publish, QoS, SubAck, SubAckCode, Subscribe, DEFAULT_MAX_PACKET_SIZE,
};
use crate::envelope::{self, deserialize_envelope, ReplayState, DEFAULT_FRESHNESS_WINDOW_MS};
use crate::net::{PacketReader, ReadError};
use crate::pki::{Certificate, KeyPair};
use crate::topic::{parse_filter, SubscriptionTrie, TopicName};

pub use auth::{authenticate, AuthError, ConnectCredential, DEFAULT_CREDENTIAL_WINDOW_MS};
pub use session::{keepalive_sweep, InboundAction, InboundQos, OutboundQos};

pub const DEFAULT_PORT: u16 = 8883;
pub const COUNTERS_TOPIC: &str = "$SYS/broker/counters";

#[derive(Clone, Debug)]
pub struct BrokerConfig {
    pub bind_host: String,
    /// 0 binds an ephemeral port.
    pub port: u16,
    pub verify_at_broker: bool,
    pub credential_window_ms: u64,
    /// Freshness window for envelopes checked at the broker.
    pub envelope_window_ms: u64,
    pub max_packet_size: usize,
    pub keepalive_grace: f64,
    pub max_client_id_len: usize,
    pub counters_interval: Duration,
    pub retry_interval: Duration,
    pub max_retry_attempts: u32,
    pub connect_timeout: Duration,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            bind_host: "0.0.0.0".into(),
            port: DEFAULT_PORT,
            verify_at_broker: true,
            credential_window_ms: DEFAULT_CREDENTIAL_WINDOW_MS,
            envelope_window_ms: DEFAULT_FRESHNESS_WINDOW_MS,
            max_packet_size: DEFAULT_MAX_PACKET_SIZE,
            keepalive_grace: 1.5,
            max_client_id_len: 23,
            counters_interval: Duration::from_secs(10),
            retry_interval: Duration::from_secs(5),
            max_retry_attempts: 5,
            connect_timeout: Duration::from_secs(10),
        }
    }
}

/// The broker's own certificate and key; used to sign `$SYS` publishes.
#[derive(Clone, Debug)]
pub struct BrokerIdentity {
    pub certificate: Certificate,
    pub keypair: KeyPair,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SessionId(pub u64);

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    /// Deliveries handed to subscriber sessions.
    pub forwarded: u64,
    /// Publishes discarded by envelope verification.
    pub dropped: u64,
    pub connections_accepted: u64,
    pub connections_refused: u64,
    pub protocol_errors: u64,
    pub sessions: u64,
}

#[derive(Default)]
struct AtomicCounters {
    forwarded: AtomicU64,
    dropped: AtomicU64,
    accepted: AtomicU64,
    refused: AtomicU64,
    protocol_errors: AtomicU64,
}

fn bump(c: &AtomicU64) {
    c.fetch_add(1, Ordering::Relaxed);
}

fn log_event(session: impl fmt::Display, event: &str, detail: impl fmt::Display) {
    info!(target: "pqtt::broker", "session={session} event={event} detail={detail}");
}

struct SessionHandle {
    id: SessionId,
    client_id: String,
    certificate: Certificate,
    keep_alive: u16,
    last_activity: Mutex<Instant>,
    outbound: Mutex<OutboundQos>,
    tx: mpsc::Sender<Vec<u8>>,
    stream: TcpStream,
}

impl SessionHandle {
    fn touch(&self) {
        *self.last_activity.lock() = Instant::now();
    }

    fn send(&self, packet: &Packet) {
        match encode_packet(packet) {
            Ok(frame) => {
                let _ = self.tx.send(frame);
            }
            Err(e) => warn!(target: "pqtt::broker", "session={} event=encode_error detail={e}", self.id),
        }
    }

    /// Queues a delivery; returns false when no packet id is free.
    fn deliver(&self, topic: &str, payload: &[u8], qos: QoS) -> bool {
        let publish = Publish {
            dup: false,
            qos,
            retain: false,
            topic: topic.to_owned(),
            packet_id: None,
            payload: payload.to_vec(),
        };
        let mut outbound = self.outbound.lock();
        match outbound.prepare(publish, Instant::now()) {
            Some(p) => {
                self.send(&Packet::Publish(p));
                true
            }
            None => false,
        }
    }

    fn close(&self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

struct Shared {
    config: BrokerConfig,
    limits: CodecLimits,
    trust_root: Certificate,
    identity: Option<BrokerIdentity>,
    clock: Arc<dyn Clock>,
    shutdown: AtomicBool,
    trie: RwLock<SubscriptionTrie<SessionId>>,
    sessions: RwLock<HashMap<SessionId, Arc<SessionHandle>>>,
    client_ids: Mutex<HashMap<String, SessionId>>,
    replay: Mutex<ReplayState>,
    next_session: AtomicU64,
    counters: AtomicCounters,
    sys_sequence: AtomicU64,
    connections: Mutex<Vec<JoinHandle<()>>>,
}

/// A running broker. Dropping it shuts it down.
pub struct Broker {
    shared: Arc<Shared>,
    addr: SocketAddr,
    threads: Vec<JoinHandle<()>>,
}

impl Broker {
    pub fn start(
        config: BrokerConfig,
        trust_root: Certificate,
        identity: Option<BrokerIdentity>,
        clock: Arc<dyn Clock>,
    ) -> io::Result<Broker> {
        let listener = TcpListener::bind((config.bind_host.as_str(), config.port))?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            limits: CodecLimits {
                max_packet_size: config.max_packet_size,
            },
            replay: Mutex::new(ReplayState::new(config.envelope_window_ms)),
            config,
            trust_root,
            identity,
            clock,
            shutdown: AtomicBool::new(false),
            trie: RwLock::new(SubscriptionTrie::new()),
            sessions: RwLock::new(HashMap::new()),
            client_ids: Mutex::new(HashMap::new()),
            next_session: AtomicU64::new(1),
            counters: AtomicCounters::default(),
            sys_sequence: AtomicU64::new(1),
            connections: Mutex::new(Vec::new()),
        });

        let accept_shared = shared.clone();
        let acceptor = thread::Builder::new()
            .name("pqtt-accept".into())
            .spawn(move || accept_loop(accept_shared, listener))?;
        let maint_shared = shared.clone();
        let maintenance = thread::Builder::new()
            .name("pqtt-maint".into())
            .spawn(move || maintenance_loop(maint_shared))?;
        debug!(target: "pqtt::broker", "listening on {addr}");
        Ok(Broker {
            shared,
            addr,
            threads: vec![acceptor, maintenance],
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn counters(&self) -> Counters {
        self.shared.counters()
    }

    pub fn session_count(&self) -> usize {
        self.shared.sessions.read().len()
    }

    /// Client ids of authenticated sessions.
    pub fn client_ids(&self) -> Vec<String> {
        let mut ids: Vec<_> = self.shared.client_ids.lock().keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn subscription_count(&self) -> usize {
        self.shared.trie.read().len()
    }

    /// Runs one keep-alive sweep immediately; returns the disconnected ids.
    pub fn keepalive_sweep_now(&self) -> Vec<SessionId> {
        self.shared.sweep_keepalive(Instant::now())
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if self.shared.shutdown.swap(true, Ordering::SeqCst) {
            return;
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        for s in self.shared.sessions.read().values() {
            s.close();
        }
        let conns: Vec<_> = self.shared.connections.lock().drain(..).collect();
        for c in conns {
            let _ = c.join();
        }
        info!(target: "pqtt::broker", "stopped");
    }
}

impl Drop for Broker {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(shared: Arc<Shared>, listener: TcpListener) {
    while !shared.shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let conn_shared = shared.clone();
                let spawned = thread::Builder::new()
                    .name(format!("pqtt-conn-{peer}"))
                    .spawn(move || serve_connection(conn_shared, stream, peer));
                match spawned {
                    Ok(handle) => {
                        let mut conns = shared.connections.lock();
                        conns.retain(|h| !h.is_finished());
                        conns.push(handle);
                    }
                    Err(e) => warn!(target: "pqtt::broker", "spawn failed: {e}"),
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(10));
            }
            Err(e) => {
                warn!(target: "pqtt::broker", "accept failed: {e}");
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn maintenance_loop(shared: Arc<Shared>) {
    let mut next_counters = Instant::now() + shared.config.counters_interval;
    while !shared.shutdown.load(Ordering::SeqCst) {
        thread::sleep(Duration::from_millis(50));
        let now = Instant::now();
        shared.sweep_keepalive(now);
        shared.retransmit(now);
        if now >= next_counters {
            shared.publish_counters();
            next_counters = now + shared.config.counters_interval;
        }
    }
}

fn refuse(mut stream: TcpStream, code: ConnectReturnCode) {
    if let Ok(frame) = encode_packet(&Packet::ConnAck(ConnAck {
        session_present: false,
        code,
    })) {
        let _ = stream.write_all(&frame);
        let _ = stream.flush();
    }
    let _ = stream.shutdown(Shutdown::Both);
}

fn serve_connection(shared: Arc<Shared>, stream: TcpStream, peer: SocketAddr) {
    let _ = stream.set_nodelay(true);
    let mut conn = match stream
        .try_clone()
        .and_then(|read_half| PacketReader::new(read_half, shared.limits))
    {
        Ok(c) => c,
        Err(_) => return,
    };
    let stopped = || shared.shutdown.load(Ordering::SeqCst);

    let deadline = Instant::now() + shared.config.connect_timeout;
    let connect = match conn.read_packet(Some(deadline), &stopped) {
        Ok(Packet::Connect(c)) => c,
        Ok(other) => {
            log_event(peer, "reject", format!("first packet {:?} is not CONNECT", other.packet_type()));
            bump(&shared.counters.protocol_errors);
            let _ = stream.shutdown(Shutdown::Both);
            return;
        }
        Err(ReadError::Protocol(e)) => {
            log_event(peer, "protocol_error", &e);
            bump(&shared.counters.protocol_errors);
            if e.kind == ProtocolErrorKind::UnsupportedProtocol {
                refuse(stream, ConnectReturnCode::UnacceptableProtocolVersion);
            } else {
                let _ = stream.shutdown(Shutdown::Both);
            }
            return;
        }
        Err(_) => {
            let _ = stream.shutdown(Shutdown::Both);
            return;
        }
    };

    let certificate = match shared.check_connect(&connect) {
        Ok(cert) => cert,
        Err((code, reason)) => {
            log_event(peer, "connect_refused", format!("client_id={} {reason}", connect.client_id));
            bump(&shared.counters.refused);
            refuse(stream, code);
            return;
        }
    };

    let session = match shared.register(&connect, certificate, stream) {
        Ok(s) => s,
        Err(e) => {
            warn!(target: "pqtt::broker", "register failed: {e}");
            return;
        }
    };
    session.send(&Packet::ConnAck(ConnAck {
        session_present: false,
        code: ConnectReturnCode::Accepted,
    }));

    let mut inbound = InboundQos::default();
    let reason = loop {
        match conn.read_packet(None, &stopped) {
            Ok(packet) => {
                session.touch();
                if let Err(reason) = shared.handle_packet(&session, &mut inbound, packet) {
                    break reason;
                }
            }
            Err(e) => {
                if matches!(e, ReadError::Protocol(_)) {
                    bump(&shared.counters.protocol_errors);
                }
                break e.to_string();
            }
        }
    };
    shared.unregister(&session, &reason);
}

impl Shared {
    fn counters(&self) -> Counters {
        let c = &self.counters;
        Counters {
            forwarded: c.forwarded.load(Ordering::Relaxed),
            dropped: c.dropped.load(Ordering::Relaxed),
            connections_accepted: c.accepted.load(Ordering::Relaxed),
            connections_refused: c.refused.load(Ordering::Relaxed),
            protocol_errors: c.protocol_errors.load(Ordering::Relaxed),
            sessions: self.sessions.read().len() as u64,
        }
    }

    fn check_connect(&self, connect: &Connect) -> Result<Certificate, (ConnectReturnCode, String)> {
        if connect.client_id.is_empty() || connect.client_id.len() > self.config.max_client_id_len {
            return Err((
                ConnectReturnCode::IdentifierRejected,
                format!("client id length {}", connect.client_id.len()),
            ));
        }
        authenticate(
            connect,
            &self.trust_root,
            self.clock.now_ms(),
            self.config.credential_window_ms,
        )
        .map_err(|e| (ConnectReturnCode::NotAuthorized, e.to_string()))
    }

    fn register(
        &self,
        connect: &Connect,
        certificate: Certificate,
        stream: TcpStream,
    ) -> io::Result<Arc<SessionHandle>> {
        let id = SessionId(self.next_session.fetch_add(1, Ordering::SeqCst));
        let (tx, rx) = mpsc::channel::<Vec<u8>>();
        let mut write_half = stream.try_clone()?;
        thread::Builder::new()
            .name(format!("pqtt-write-{id}"))
            .spawn(move || {
                for frame in rx {
                    if write_half.write_all(&frame).is_err() {
                        break;
                    }
                }
                let _ = write_half.shutdown(Shutdown::Write);
            })?;
        let session = Arc::new(SessionHandle {
            id,
            client_id: connect.client_id.clone(),
            certificate,
            keep_alive: connect.keep_alive,
            last_activity: Mutex::new(Instant::now()),
            outbound: Mutex::new(OutboundQos::default()),
            tx,
            stream,
        });

        let previous = self.client_ids.lock().insert(connect.client_id.clone(), id);
        if let Some(old) = previous.and_then(|old| self.sessions.write().remove(&old)) {
            log_event(old.id, "takeover", format!("client_id={} replaced by {id}", old.client_id));
            self.trie.write().remove_session(&old.id);
            old.close();
        }
        self.sessions.write().insert(id, session.clone());
        bump(&self.counters.accepted);
        log_event(
            id,
            "connected",
            format!(
                "client_id={} subject={} role={} keepalive={}",
                session.client_id, session.certificate.subject, session.certificate.role, session.keep_alive
            ),
        );
        Ok(session)
    }

    fn unregister(&self, session: &SessionHandle, reason: &str) {
        self.sessions.write().remove(&session.id);
        self.trie.write().remove_session(&session.id);
        {
            let mut ids = self.client_ids.lock();
            if ids.get(&session.client_id) == Some(&session.id) {
                ids.remove(&session.client_id);
            }
        }
        session.close();
        log_event(session.id, "disconnected", reason);
    }

    /// Dispatches one packet from an authenticated session. `Err` closes the
    /// connection.
    fn handle_packet(
        &self,
        session: &SessionHandle,
        inbound: &mut InboundQos,
        packet: Packet,
    ) -> Result<(), String> {
        match packet {
            Packet::Publish(p) => {
                let action = inbound.on_publish(p);
                self.apply_inbound(session, action);
            }
            Packet::PubRel(id) => {
                let action = inbound.on_pubrel(id);
                self.apply_inbound(session, action);
            }
            Packet::PubAck(id) => session.outbound.lock().on_puback(id),
            Packet::PubRec(id) => {
                let rel = session.outbound.lock().on_pubrec(id, Instant::now());
                session.send(&rel);
            }
            Packet::PubComp(id) => session.outbound.lock().on_pubcomp(id),
            Packet::Subscribe(s) => {
                let ack = apply_subscribe(&mut self.trie.write(), session.id, &s);
                log_event(
                    session.id,
                    "subscribe",
                    s.filters
                        .iter()
                        .zip(&ack.codes)
                        .map(|((f, _), c)| format!("{f}:{:#04x}", c.as_u8()))
                        .collect::<Vec<_>>()
                        .join(","),
                );
                session.send(&Packet::SubAck(ack));
            }
            Packet::Unsubscribe(u) => {
                let mut trie = self.trie.write();
                for f in &u.filters {
                    if let Ok(filter) = parse_filter(f) {
                        trie.remove(&filter, &session.id);
                    }
                }
                drop(trie);
                session.send(&Packet::UnsubAck(u.packet_id));
            }
            Packet::PingReq => session.send(&Packet::PingResp),
            Packet::Disconnect => return Err("client disconnect".into()),
            other => {
                bump(&self.counters.protocol_errors);
                return Err(format!("unexpected {:?} from client", other.packet_type()));
            }
        }
        Ok(())
    }

    fn apply_inbound(&self, session: &SessionHandle, action: InboundAction) {
        if let Some(reply) = &action.reply {
            session.send(reply);
        }
        if let Some(publish) = action.route {
            self.route(Some(session), &publish);
        }
    }

    fn verify_envelope(&self, from: &SessionHandle, publish: &Publish) -> Result<(), String> {
        let env = deserialize_envelope(&publish.payload).map_err(|e| e.to_string())?;
        if env.topic != publish.topic {
            return Err(format!("envelope topic {:?} differs from {:?}", env.topic, publish.topic));
        }
        let now_ms = self.clock.now_ms();
        envelope::open(&env, &from.certificate, &self.trust_root, &mut self.replay.lock(), now_ms)
            .map(|_| ())
            .map_err(|e| e.to_string())
    }

    /// Fans a publish out to matching sessions; returns the delivery count.
    fn route(&self, from: Option<&SessionHandle>, publish: &Publish) -> usize {
        let Ok(topic) = TopicName::new(publish.topic.clone()) else {
            return 0;
        };
        if let Some(from) = from {
            if self.config.verify_at_broker && !topic.is_reserved() {
                if let Err(reason) = self.verify_envelope(from, publish) {
                    bump(&self.counters.dropped);
                    log_event(from.id, "drop", format!("topic={topic} {reason}"));
                    return 0;
                }
            }
        }
        let targets = self.trie.read().match_subscribers(&topic);
        let sessions = self.sessions.read();
        let mut delivered = 0;
        for (sid, granted) in targets {
            let Some(target) = sessions.get(&sid) else {
                continue;
            };
            let qos = publish.qos.min(granted);
            if target.deliver(&publish.topic, &publish.payload, qos) {
                bump(&self.counters.forwarded);
                delivered += 1;
            } else {
                warn!(target: "pqtt::broker", "session={sid} event=overflow detail=no free packet id");
            }
        }
        debug!(target: "pqtt::broker", "event=route topic={topic} deliveries={delivered}");
        delivered
    }

    fn sweep_keepalive(&self, now: Instant) -> Vec<SessionId> {
        let sessions: Vec<_> = self.sessions.read().values().cloned().collect();
        let expired = keepalive_sweep(
            sessions
                .iter()
                .map(|s| (s.id, s.keep_alive, *s.last_activity.lock())),
            now,
            self.config.keepalive_grace,
        );
        for id in &expired {
            if let Some(s) = sessions.iter().find(|s| s.id == *id) {
                log_event(id, "keepalive_timeout", format!("client_id={}", s.client_id));
                s.close();
            }
        }
        expired
    }

    fn retransmit(&self, now: Instant) {
        let sessions: Vec<_> = self.sessions.read().values().cloned().collect();
        for s in sessions {
            let due = s.outbound.lock().due_retransmits(
                now,
                self.config.retry_interval,
                self.config.max_retry_attempts,
            );
            for packet in due {
                s.send(&packet);
            }
        }
    }

    fn publish_counters(&self) {
        let counters = self.counters();
        let Ok(body) = serde_json::to_vec(&counters) else {
            return;
        };
        let payload = match &self.identity {
            Some(id) => {
                let seq = self.sys_sequence.fetch_add(1, Ordering::SeqCst);
                match envelope::seal(
                    &id.keypair,
                    &id.certificate.subject,
                    seq,
                    COUNTERS_TOPIC,
                    &body,
                    self.clock.now_ms(),
                )
                .and_then(|e| e.to_bytes())
                {
                    Ok(bytes) => bytes,
                    Err(e) => {
                        warn!(target: "pqtt::broker", "counters not signed: {e}");
                        return;
                    }
                }
            }
            None => body,
        };
        self.route(None, &Publish::at_most_once(COUNTERS_TOPIC, payload));
    }
}

/// Applies a SUBSCRIBE to the trie; one SUBACK code per filter in request
/// order, 0x80 for filters that do not parse.
pub fn apply_subscribe(
    trie: &mut SubscriptionTrie<SessionId>,
    session: SessionId,
    subscribe: &Subscribe,
) -> SubAck {
    let codes = subscribe
        .filters
        .iter()
        .map(|(raw, requested)| match parse_filter(raw) {
            Ok(filter) => {
                let granted = (*requested).min(QoS::ExactlyOnce);
                trie.insert(&filter, session, granted);
                SubAckCode::Granted(granted)
            }
            Err(_) => SubAckCode::Failure,
        })
        .collect();
    SubAck {
        packet_id: subscribe.packet_id,
        codes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subscribe_grants_and_per_entry_failure() {
        let mut trie = SubscriptionTrie::new();
        let ack = apply_subscribe(
            &mut trie,
            SessionId(1),
            &Subscribe {
                packet_id: 3,
                filters: vec![
                    ("motion-sensor".into(), QoS::AtLeastOnce),
                    ("a/#/b".into(), QoS::AtMostOnce),
                ],
            },
        );
        assert_eq!(ack.packet_id, 3);
        assert_eq!(
            ack.codes,
            vec![SubAckCode::Granted(QoS::AtLeastOnce), SubAckCode::Failure]
        );
        assert_eq!(trie.len(), 1);
    }

    #[test]
    fn duplicate_subscribe_updates_grant() {
        let mut trie = SubscriptionTrie::new();
        for qos in [QoS::AtMostOnce, QoS::ExactlyOnce] {
            apply_subscribe(
                &mut trie,
                SessionId(1),
                &Subscribe {
                    packet_id: 1,
                    filters: vec![("motion-sensor".into(), qos)],
                },
            );
        }
        assert_eq!(trie.len(), 1);
        let topic = TopicName::new("motion-sensor").unwrap();
        assert_eq!(trie.match_subscribers(&topic)[&SessionId(1)], QoS::ExactlyOnce);
    }

    #[test]
    fn default_config_values() {
        let c = BrokerConfig::default();
        assert_eq!(c.port, 8883);
        assert!(c.verify_at_broker);
        assert_eq!(c.credential_window_ms, 60_000);
        assert_eq!(c.keepalive_grace, 1.5);
        assert_eq!(c.max_packet_size, 1024 * 1024);
    }
}
