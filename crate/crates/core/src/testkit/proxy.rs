//! TCP relay that applies scripted faults to whole MQTT packets.

use std::io::{self, ErrorKind, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use crate::codec::{encode_packet, CodecLimits, Packet, PacketType};
use crate::net::PacketReader;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    ClientToBroker,
    BrokerToClient,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultAction {
    Drop,
    Duplicate,
    /// Flips the low bit of one byte: within the application payload for
    /// PUBLISH, within the raw frame otherwise. The offset wraps.
    TamperByte(usize),
    Delay(Duration),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FaultRule {
    pub direction: Direction,
    pub packet_type: PacketType,
    /// 1-based count of packets of this type in this direction, across all
    /// relayed connections.
    pub occurrence: usize,
    pub action: FaultAction,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FaultScript {
    pub rules: Vec<FaultRule>,
}

impl FaultScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rule(
        mut self,
        direction: Direction,
        packet_type: PacketType,
        occurrence: usize,
        action: FaultAction,
    ) -> Self {
        self.rules.push(FaultRule {
            direction,
            packet_type,
            occurrence,
            action,
        });
        self
    }
}

/// One relayed (or dropped) packet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Observation {
    pub at: Instant,
    pub direction: Direction,
    pub packet: Packet,
    pub occurrence: usize,
    pub action: Option<FaultAction>,
}

#[derive(Default)]
struct State {
    counts: std::collections::HashMap<(Direction, PacketType), usize>,
    log: Vec<Observation>,
    forwarded_bytes: [u64; 2],
}

struct Shared {
    upstream: SocketAddr,
    script: FaultScript,
    state: Mutex<State>,
    stop: AtomicBool,
    relays: Mutex<Vec<JoinHandle<()>>>,
    streams: Mutex<Vec<TcpStream>>,
}

pub struct FaultProxy {
    shared: Arc<Shared>,
    addr: SocketAddr,
    acceptor: Option<JoinHandle<()>>,
}

impl FaultProxy {
    /// Listens on an ephemeral loopback port and relays to `upstream`.
    pub fn start(upstream: SocketAddr, script: FaultScript) -> io::Result<FaultProxy> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            upstream,
            script,
            state: Mutex::new(State::default()),
            stop: AtomicBool::new(false),
            relays: Mutex::new(Vec::new()),
            streams: Mutex::new(Vec::new()),
        });
        let s = shared.clone();
        let acceptor = thread::Builder::new()
            .name("pqtt-proxy".into())
            .spawn(move || accept_loop(s, listener))?;
        Ok(FaultProxy {
            shared,
            addr,
            acceptor: Some(acceptor),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn observations(&self) -> Vec<Observation> {
        self.shared.state.lock().log.clone()
    }

    /// Bytes written towards the broker and towards the client.
    pub fn forwarded_bytes(&self) -> (u64, u64) {
        let b = self.shared.state.lock().forwarded_bytes;
        (b[0], b[1])
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
        for s in self.shared.streams.lock().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        let relays: Vec<_> = self.shared.relays.lock().drain(..).collect();
        for r in relays {
            let _ = r.join();
        }
    }
}

impl Drop for FaultProxy {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(shared: Arc<Shared>, listener: TcpListener) {
    while !shared.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((client, _)) => {
                let _ = client.set_nonblocking(false);
                let upstream = match TcpStream::connect_timeout(&shared.upstream, Duration::from_secs(2)) {
                    Ok(u) => u,
                    Err(_) => {
                        let _ = client.shutdown(Shutdown::Both);
                        continue;
                    }
                };
                let _ = client.set_nodelay(true);
                let _ = upstream.set_nodelay(true);
                let pairs = [
                    (client.try_clone(), upstream.try_clone(), Direction::ClientToBroker),
                    (upstream.try_clone(), client.try_clone(), Direction::BrokerToClient),
                ];
                {
                    let mut streams = shared.streams.lock();
                    streams.push(client);
                    streams.push(upstream);
                }
                for (from, to, dir) in pairs {
                    let (Ok(from), Ok(to)) = (from, to) else {
                        continue;
                    };
                    let s = shared.clone();
                    if let Ok(h) = thread::Builder::new()
                        .name(format!("pqtt-relay-{dir:?}"))
                        .spawn(move || relay(s, from, to, dir))
                    {
                        shared.relays.lock().push(h);
                    }
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(_) => thread::sleep(Duration::from_millis(20)),
        }
    }
}

fn tamper(packet: &Packet, raw: &[u8], offset: usize) -> Vec<u8> {
    if let Packet::Publish(p) = packet {
        if !p.payload.is_empty() {
            let mut p = p.clone();
            let i = offset % p.payload.len();
            p.payload[i] ^= 0x01;
            if let Ok(bytes) = encode_packet(&Packet::Publish(p)) {
                return bytes;
            }
        }
    }
    let mut out = raw.to_vec();
    if !out.is_empty() {
        let i = offset % out.len();
        out[i] ^= 0x01;
    }
    out
}

fn relay(shared: Arc<Shared>, from: TcpStream, mut to: TcpStream, dir: Direction) {
    let limits = CodecLimits {
        max_packet_size: usize::MAX,
    };
    let Ok(mut reader) = PacketReader::new(from.try_clone().expect("clone"), limits) else {
        return;
    };
    let stop = || shared.stop.load(Ordering::SeqCst);
    let slot = match dir {
        Direction::ClientToBroker => 0,
        Direction::BrokerToClient => 1,
    };
    while let Ok((packet, raw)) = reader.read_frame(None, &stop) {
        let kind = packet.packet_type();
        let action = {
            let mut st = shared.state.lock();
            let n = st.counts.entry((dir, kind)).or_insert(0);
            *n += 1;
            let occurrence = *n;
            let action = shared
                .script
                .rules
                .iter()
                .find(|r| r.direction == dir && r.packet_type == kind && r.occurrence == occurrence)
                .map(|r| r.action);
            st.log.push(Observation {
                at: Instant::now(),
                direction: dir,
                packet: packet.clone(),
                occurrence,
                action,
            });
            action
        };
        let frames: Vec<Vec<u8>> = match action {
            None => vec![raw],
            Some(FaultAction::Drop) => vec![],
            Some(FaultAction::Duplicate) => vec![raw.clone(), raw],
            Some(FaultAction::TamperByte(offset)) => vec![tamper(&packet, &raw, offset)],
            Some(FaultAction::Delay(d)) => {
                thread::sleep(d);
                vec![raw]
            }
        };
        for f in frames {
            if to.write_all(&f).is_err() {
                let _ = from.shutdown(Shutdown::Both);
                return;
            }
            shared.state.lock().forwarded_bytes[slot] += f.len() as u64;
        }
    }
    let _ = to.shutdown(Shutdown::Both);
    let _ = from.shutdown(Shutdown::Both);
}
