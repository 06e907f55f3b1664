//! Shared test infrastructure: deterministic key and certificate fixtures,
//! a loopback broker harness, message collectors and the fault proxy.

mod proxy;

use std::io::{self, ErrorKind, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use crate::clock::MockClock;
pub use proxy::{Direction, FaultAction, FaultProxy, FaultRule, FaultScript, Observation};

use crate::broker::{Broker, BrokerConfig, BrokerIdentity, ConnectCredential};
use crate::client::{ClientConfig, ClientError, ClientSession, Credentials, DeliveredMessage, ReconnectPolicy};
use crate::clock::{Clock, SystemClock};
use crate::codec::{encode_packet, CodecLimits, ConnAck, Connect, Packet};
use crate::net::{PacketReader, ReadError};
use crate::pki::{
    export_secret_key, generate_keypair_by_id, issue_certificate, self_signed_ca,
    write_certificate, Certificate, CertificateRequest, KeyPair, Role, SchemeId, FALCON_1024,
};

/// 2100-01-01T00:00:00Z.
pub const FAR_FUTURE_SECS: u64 = 4_102_444_800;

/// A reproducible 32-byte seed derived from a label.
pub fn seed_for(label: &str) -> [u8; 32] {
    let h = label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    let mut seed = [0u8; 32];
    ChaCha8Rng::seed_from_u64(h).fill_bytes(&mut seed);
    seed
}

pub fn keypair_for(scheme: SchemeId, label: &str) -> KeyPair {
    generate_keypair_by_id(scheme, Some(seed_for(label))).expect("fixture key generation")
}

#[derive(Clone, Debug)]
pub struct Identity {
    pub keypair: KeyPair,
    pub certificate: Certificate,
}

impl Identity {
    pub fn subject(&self) -> &str {
        &self.certificate.subject
    }

    /// Writes `<subject>.cert` and `<subject>.key` into `dir`.
    pub fn write_to(&self, dir: &Path) {
        write_certificate(&self.certificate, &dir.join(format!("{}.cert", self.subject()))).unwrap();
        export_secret_key(&self.keypair, &dir.join(format!("{}.key", self.subject()))).unwrap();
    }
}

/// A CA whose keys are derived from its subject and scheme.
#[derive(Clone, Debug)]
pub struct TestCa {
    pub keypair: KeyPair,
    pub certificate: Certificate,
}

impl TestCa {
    pub fn new(subject: &str, scheme: SchemeId) -> Self {
        let keypair = keypair_for(scheme, &format!("ca/{subject}/{scheme}"));
        let certificate = self_signed_ca(&keypair, subject, 0, FAR_FUTURE_SECS, 1).unwrap();
        TestCa { keypair, certificate }
    }

    pub fn issue(&self, subject: &str, role: Role, scheme: SchemeId) -> Identity {
        self.issue_with_validity(subject, role, scheme, 0, FAR_FUTURE_SECS)
    }

    pub fn issue_with_validity(
        &self,
        subject: &str,
        role: Role,
        scheme: SchemeId,
        not_before: u64,
        not_after: u64,
    ) -> Identity {
        let label = format!("{}/{subject}/{scheme}", self.certificate.subject);
        let keypair = keypair_for(scheme, &label);
        let certificate = issue_certificate(
            &self.keypair,
            &self.certificate,
            &CertificateRequest {
                subject,
                role,
                scheme,
                public_key: keypair.public_key(),
                not_before,
                not_after,
                serial: seed_for(&label)[0] as u64 + 2,
            },
        )
        .unwrap();
        Identity { keypair, certificate }
    }

    /// Writes `ca.cert` and `ca.key` into `dir`.
    pub fn write_to(&self, dir: &Path) {
        write_certificate(&self.certificate, &dir.join("ca.cert")).unwrap();
        export_secret_key(&self.keypair, &dir.join("ca.key")).unwrap();
    }

    pub fn credentials(&self, id: &Identity) -> Credentials {
        Credentials {
            certificate: id.certificate.clone(),
            keypair: id.keypair.clone(),
            trust_root: self.certificate.clone(),
        }
    }
}

/// A trusted CA and an unrelated one with the same subject.
pub struct TwoCaFixture {
    pub trusted: TestCa,
    pub foreign: TestCa,
}

impl TwoCaFixture {
    pub fn new(scheme: SchemeId) -> Self {
        TwoCaFixture {
            trusted: TestCa::new("pqtt-ca", scheme),
            foreign: TestCa::new_foreign("pqtt-ca", scheme),
        }
    }
}

impl TestCa {
    fn new_foreign(subject: &str, scheme: SchemeId) -> Self {
        let keypair = keypair_for(scheme, &format!("foreign-ca/{subject}/{scheme}"));
        let certificate = self_signed_ca(&keypair, subject, 0, FAR_FUTURE_SECS, 1).unwrap();
        TestCa { keypair, certificate }
    }
}

/// Collects delivered messages from a subscription handler.
#[derive(Clone, Default)]
pub struct Collector(Arc<Mutex<Vec<DeliveredMessage>>>);

impl Collector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn handler(&self) -> impl FnMut(DeliveredMessage) + Send + 'static {
        let inner = self.0.clone();
        move |m| inner.lock().push(m)
    }

    pub fn messages(&self) -> Vec<DeliveredMessage> {
        self.0.lock().clone()
    }

    pub fn len(&self) -> usize {
        self.0.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Waits until at least `n` messages arrived; returns the count seen.
    pub fn wait_for(&self, n: usize, timeout: Duration) -> usize {
        wait_until(timeout, || self.len() >= n);
        self.len()
    }
}

/// Polls `cond` every few milliseconds until it holds or `timeout` passes.
pub fn wait_until(timeout: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    loop {
        if cond() {
            return true;
        }
        if Instant::now() >= deadline {
            return false;
        }
        thread::sleep(Duration::from_millis(5));
    }
}

/// A broker on an ephemeral loopback port with a populated certificate
/// directory.
pub struct TestNet {
    pub dir: tempfile::TempDir,
    pub ca: TestCa,
    pub broker: Broker,
    pub clock: Arc<dyn Clock>,
    pub scheme: SchemeId,
}

impl TestNet {
    pub fn start(tune: impl FnOnce(&mut BrokerConfig)) -> Self {
        Self::start_with(FALCON_1024, Arc::new(SystemClock), tune)
    }

    pub fn start_with(
        scheme: SchemeId,
        clock: Arc<dyn Clock>,
        tune: impl FnOnce(&mut BrokerConfig),
    ) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let ca = TestCa::new("pqtt-ca", scheme);
        ca.write_to(dir.path());
        let broker_id = ca.issue("broker", Role::Broker, scheme);
        broker_id.write_to(dir.path());
        let mut config = BrokerConfig {
            bind_host: "127.0.0.1".into(),
            port: 0,
            ..BrokerConfig::default()
        };
        tune(&mut config);
        let broker = Broker::start(
            config,
            ca.certificate.clone(),
            Some(BrokerIdentity {
                certificate: broker_id.certificate,
                keypair: broker_id.keypair,
            }),
            clock.clone(),
        )
        .unwrap();
        TestNet {
            dir,
            ca,
            broker,
            clock,
            scheme,
        }
    }

    pub fn cert_dir(&self) -> &Path {
        self.dir.path()
    }

    pub fn addr(&self) -> SocketAddr {
        self.broker.local_addr()
    }

    /// Issues a certificate for `subject` and writes it to the directory.
    pub fn identity(&self, subject: &str, role: Role) -> Identity {
        let id = self.ca.issue(subject, role, self.scheme);
        id.write_to(self.dir.path());
        id
    }

    /// Client settings with short timers, pointed at `addr`.
    pub fn client_config(&self, subject: &str, addr: SocketAddr) -> ClientConfig {
        let mut c = ClientConfig::from_cert_dir(
            &addr.ip().to_string(),
            addr.port(),
            subject,
            self.dir.path(),
            subject,
        );
        c.retry_interval = Duration::from_millis(300);
        c.reconnect = ReconnectPolicy {
            initial: Duration::from_millis(100),
            cap: Duration::from_secs(2),
        };
        c.connect_timeout = Duration::from_secs(5);
        c
    }

    pub fn connect(&self, id: &Identity) -> Result<ClientSession, ClientError> {
        self.connect_via(id, self.addr())
    }

    pub fn connect_via(&self, id: &Identity, addr: SocketAddr) -> Result<ClientSession, ClientError> {
        ClientSession::connect(
            self.client_config(id.subject(), addr),
            self.ca.credentials(id),
            self.clock.clone(),
        )
    }

    pub fn log_path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

/// CONNECT carrying a credential for `id` signed at `now_ms`.
pub fn connect_packet(id: &Identity, client_id: &str, keep_alive: u16, now_ms: u64) -> Packet {
    let credential = ConnectCredential::create(&id.keypair, &id.certificate, client_id, now_ms)
        .and_then(|c| c.to_bytes())
        .expect("credential");
    Packet::Connect(Connect {
        client_id: client_id.to_owned(),
        keep_alive,
        clean_session: true,
        credential: Some(credential),
    })
}

/// A bare MQTT connection for driving a broker packet by packet.
pub struct RawClient {
    stream: TcpStream,
    reader: PacketReader,
}

impl RawClient {
    pub fn connect(addr: SocketAddr) -> io::Result<RawClient> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let reader = PacketReader::new(stream.try_clone()?, CodecLimits::default())?;
        Ok(RawClient { stream, reader })
    }

    pub fn send(&mut self, packet: &Packet) -> io::Result<()> {
        let bytes = encode_packet(packet).map_err(|e| io::Error::new(ErrorKind::InvalidInput, e))?;
        self.send_bytes(&bytes)
    }

    pub fn send_bytes(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.stream.write_all(bytes)
    }

    /// Next packet from the broker. Fails with `TimedOut` when nothing
    /// arrives in time and `UnexpectedEof` once the broker has closed.
    pub fn recv(&mut self, timeout: Duration) -> io::Result<Packet> {
        match self.reader.read_packet(Some(Instant::now() + timeout), &|| false) {
            Ok(p) => Ok(p),
            Err(ReadError::Timeout) => Err(ErrorKind::TimedOut.into()),
            Err(ReadError::Closed) => Err(ErrorKind::UnexpectedEof.into()),
            Err(ReadError::Io(e)) => Err(e),
            Err(e) => Err(io::Error::other(e.to_string())),
        }
    }

    /// Waits for the broker to close the connection, skipping packets.
    pub fn closed_within(&mut self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            match self.recv(deadline - Instant::now()) {
                Ok(_) => continue,
                Err(e) if e.kind() == ErrorKind::TimedOut => return false,
                Err(_) => return true,
            }
        }
        false
    }
}

impl TestNet {
    /// Opens a raw connection and completes CONNECT for `id`.
    pub fn raw_login(&self, id: &Identity, client_id: &str, keep_alive: u16) -> (RawClient, ConnAck) {
        let mut raw = RawClient::connect(self.addr()).expect("tcp connect");
        raw.send(&connect_packet(id, client_id, keep_alive, self.clock.now_ms()))
            .expect("send CONNECT");
        match raw.recv(Duration::from_secs(5)) {
            Ok(Packet::ConnAck(ack)) => (raw, ack),
            other => panic!("expected CONNACK, got {other:?}"),
        }
    }
}
