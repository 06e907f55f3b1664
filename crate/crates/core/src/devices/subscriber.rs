use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::{parse_motion_event, EventKind, DEFAULT_LOG_PATH, DEFAULT_MOTION_TOPIC};
use crate::client::{ClientConfig, ClientError, ClientSession, Credentials, DeliveredMessage};
use crate::clock::Clock;
use crate::codec::{QoS, SubAckCode};

#[derive(Clone, Debug)]
pub struct SubscriberConfig {
    pub client: ClientConfig,
    pub motion_topic: String,
    pub qos: QoS,
    pub log_path: PathBuf,
    pub echo_stdout: bool,
}

impl SubscriberConfig {
    pub fn new(client: ClientConfig) -> Self {
        SubscriberConfig {
            client,
            motion_topic: DEFAULT_MOTION_TOPIC.into(),
            qos: QoS::AtLeastOnce,
            log_path: PathBuf::from(DEFAULT_LOG_PATH),
            echo_stdout: false,
        }
    }
}

/// One line of the event log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub device_id: String,
    pub kind: EventKind,
    pub event_seq: u64,
    pub sensed_at_ms: u64,
    pub received_at_ms: u64,
    pub sender_subject: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubscriberReport {
    pub received: u64,
    pub rejected: u64,
    pub log_path: PathBuf,
}

struct Sink {
    log: File,
    echo: bool,
    clock: Arc<dyn Clock>,
    received: Arc<AtomicU64>,
    malformed: Arc<AtomicU64>,
}

impl Sink {
    fn accept(&mut self, m: DeliveredMessage) {
        let event = match parse_motion_event(&m.payload) {
            Ok(e) => e,
            Err(e) => {
                self.malformed.fetch_add(1, Ordering::Relaxed);
                warn!(target: "pqtt::subscriber", "from {}: {e}", m.sender_subject);
                return;
            }
        };
        let record = LogRecord {
            device_id: event.device_id,
            kind: event.kind,
            event_seq: event.event_seq,
            sensed_at_ms: event.sensed_at_ms,
            received_at_ms: self.clock.now_ms(),
            sender_subject: m.sender_subject,
        };
        let mut line = serde_json::to_string(&record).expect("log record serializes");
        line.push('\n');
        if let Err(e) = self.log.write_all(line.as_bytes()) {
            warn!(target: "pqtt::subscriber", "event log write failed: {e}");
        }
        if self.echo {
            print!("{line}");
            let _ = io::stdout().flush();
        }
        self.received.fetch_add(1, Ordering::Relaxed);
    }
}

/// A running subscriber node.
pub struct Subscriber {
    session: ClientSession,
    topic: String,
    log_path: PathBuf,
    received: Arc<AtomicU64>,
    malformed: Arc<AtomicU64>,
}

impl Subscriber {
    /// Opens (creating) the event log and connects in the background. The
    /// subscription is placed on every connect; [`Subscriber::wait_ready`]
    /// blocks until the broker has granted it.
    pub fn start(
        config: &SubscriberConfig,
        creds: Credentials,
        clock: Arc<dyn Clock>,
    ) -> Result<Subscriber, ClientError> {
        if let Some(dir) = config.log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| ClientError::Config(format!("{}: {e}", dir.display())))?;
        }
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&config.log_path)
            .map_err(|e| ClientError::Config(format!("{}: {e}", config.log_path.display())))?;
        let received = Arc::new(AtomicU64::new(0));
        let malformed = Arc::new(AtomicU64::new(0));
        let mut sink = Sink {
            log,
            echo: config.echo_stdout,
            clock: clock.clone(),
            received: received.clone(),
            malformed: malformed.clone(),
        };
        let session = ClientSession::start(config.client.clone(), creds, clock)?;
        session.subscribe_on_connect(&config.motion_topic, config.qos, move |m| sink.accept(m))?;
        info!(
            target: "pqtt::subscriber",
            "topic={} log={}",
            config.motion_topic,
            config.log_path.display()
        );
        Ok(Subscriber {
            session,
            topic: config.motion_topic.clone(),
            log_path: config.log_path.clone(),
            received,
            malformed,
        })
    }

    /// True once the broker granted the subscription; false on timeout.
    pub fn wait_ready(&self, timeout: Duration) -> Result<bool, ClientError> {
        let deadline = Instant::now() + timeout;
        loop {
            match self.session.granted(&self.topic) {
                Some(SubAckCode::Granted(_)) => return Ok(true),
                Some(SubAckCode::Failure) => return Err(ClientError::SubscribeRejected(self.topic.clone())),
                None if Instant::now() >= deadline => return Ok(false),
                None => thread::sleep(Duration::from_millis(10)),
            }
        }
    }

    pub fn session(&self) -> &ClientSession {
        &self.session
    }

    pub fn received(&self) -> u64 {
        self.received.load(Ordering::Relaxed)
    }

    /// Envelopes that failed verification plus verified payloads that are
    /// not valid events.
    pub fn rejected(&self) -> u64 {
        self.session.stats().rejected + self.malformed.load(Ordering::Relaxed)
    }

    pub fn stop(self) -> SubscriberReport {
        self.session.disconnect();
        SubscriberReport {
            received: self.received(),
            rejected: self.rejected(),
            log_path: self.log_path.clone(),
        }
    }
}

/// Runs the subscriber node until `stop` is set.
pub fn run_subscriber(
    config: &SubscriberConfig,
    creds: Credentials,
    clock: Arc<dyn Clock>,
    stop: &AtomicBool,
) -> Result<SubscriberReport, ClientError> {
    let sub = Subscriber::start(config, creds, clock)?;
    while !stop.load(Ordering::SeqCst) {
        thread::sleep(Duration::from_millis(20));
    }
    let report = sub.stop();
    info!(
        target: "pqtt::subscriber",
        "received={} rejected={} log={}",
        report.received, report.rejected, report.log_path.display()
    );
    Ok(report)
}
