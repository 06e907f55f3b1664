use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use super::{
    serialize_motion_event, status_topic, EventKind, Indicator, MotionEvent, PinAssignment,
    SensorEventSource, DEFAULT_HEARTBEAT_SECS, DEFAULT_HOLD_MS, DEFAULT_MOTION_TOPIC,
};
use crate::client::{ClientConfig, ClientError, ClientSession, Credentials};
use crate::clock::Clock;
use crate::codec::QoS;

const TICK: Duration = Duration::from_millis(20);

#[derive(Clone, Debug)]
pub struct PublisherConfig {
    pub client: ClientConfig,
    pub device_id: String,
    pub motion_topic: String,
    pub status_topic: String,
    pub heartbeat_interval: Duration,
    pub motion_qos: QoS,
    pub heartbeat_qos: QoS,
    pub hold: Duration,
    pub pins: PinAssignment,
    /// How long to wait for the first connection before the schedule clock
    /// starts.
    pub initial_connect_wait: Duration,
    /// Return once the sensor source is exhausted and the last event is out.
    pub exit_when_exhausted: bool,
}

impl PublisherConfig {
    pub fn new(client: ClientConfig) -> Self {
        let device_id = client.client_id.clone();
        PublisherConfig {
            status_topic: status_topic(&device_id),
            device_id,
            client,
            motion_topic: DEFAULT_MOTION_TOPIC.into(),
            heartbeat_interval: Duration::from_secs(DEFAULT_HEARTBEAT_SECS),
            motion_qos: QoS::AtLeastOnce,
            heartbeat_qos: QoS::AtMostOnce,
            hold: Duration::from_millis(DEFAULT_HOLD_MS),
            pins: PinAssignment::default(),
            initial_connect_wait: Duration::from_secs(5),
            exit_when_exhausted: false,
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        self.client.validate()?;
        if self.heartbeat_interval.is_zero() {
            return Err(ClientError::Config("heartbeat interval must be positive".into()));
        }
        if self.hold.is_zero() {
            return Err(ClientError::Config("detection hold must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PublisherReport {
    pub events_published: u64,
    pub heartbeats_published: u64,
    /// Motion events that could not be delivered.
    pub delivery_failures: u64,
}

fn sleep_until(deadline: Instant, stop: &AtomicBool) {
    loop {
        let now = Instant::now();
        if now >= deadline || stop.load(Ordering::SeqCst) {
            return;
        }
        thread::sleep(TICK.min(deadline - now));
    }
}

/// Runs the publisher node until `stop` is set (or the source is exhausted
/// with `exit_when_exhausted`).
pub fn run_publisher(
    config: &PublisherConfig,
    creds: Credentials,
    source: &mut dyn SensorEventSource,
    clock: Arc<dyn Clock>,
    indicator: Option<&Indicator>,
    stop: &AtomicBool,
) -> Result<PublisherReport, ClientError> {
    config.validate()?;
    let fallback = Indicator::new(config.hold);
    let indicator = indicator.unwrap_or(&fallback);
    let session = ClientSession::start(config.client.clone(), creds, clock.clone())?;
    let wait_until = Instant::now() + config.initial_connect_wait;
    while !session.is_connected() && Instant::now() < wait_until && !stop.load(Ordering::SeqCst) {
        thread::sleep(TICK);
    }

    let start = Instant::now();
    let mut report = PublisherReport::default();
    let mut motion_seq = 0u64;
    let mut heartbeat_seq = 0u64;
    let mut next_motion = source.next_offset().map(|d| start + d);
    let mut heartbeats_due = 1u32;
    let mut last_state = None;
    info!(
        target: "pqtt::publisher",
        "device={} motion_topic={} status_topic={} heartbeat={:?} pir=GPIO{}",
        config.device_id, config.motion_topic, config.status_topic, config.heartbeat_interval, config.pins.pir_sensor
    );

    while !stop.load(Ordering::SeqCst) {
        let next_heartbeat = start + config.heartbeat_interval * heartbeats_due;
        if next_motion.is_none() && config.exit_when_exhausted {
            break;
        }
        let due = next_motion.map_or(next_heartbeat, |m| m.min(next_heartbeat));
        let now = Instant::now();
        indicator.set_connected(session.is_connected());
        let state = indicator.state_at(now);
        if last_state != Some(state) {
            debug!(target: "pqtt::publisher", "status_led={} detection_led={}", state.status_on, state.detection_on);
            last_state = Some(state);
        }
        if now < due {
            sleep_until(due.min(now + TICK * 5), stop);
            continue;
        }

        if next_motion.is_some_and(|m| m <= now) {
            motion_seq += 1;
            indicator.motion_at(now);
            let event = MotionEvent {
                device_id: config.device_id.clone(),
                kind: EventKind::Motion,
                event_seq: motion_seq,
                sensed_at_ms: clock.now_ms(),
            };
            match session.publish(&config.motion_topic, &serialize_motion_event(&event), config.motion_qos) {
                Ok(seq) => {
                    report.events_published += 1;
                    debug!(target: "pqtt::publisher", "motion event_seq={motion_seq} envelope_seq={seq}");
                }
                Err(e) => {
                    report.delivery_failures += 1;
                    warn!(target: "pqtt::publisher", "motion event_seq={motion_seq} not delivered: {e}");
                }
            }
            next_motion = source.next_offset().map(|d| start + d);
        } else {
            heartbeats_due += 1;
            heartbeat_seq += 1;
            let event = MotionEvent {
                device_id: config.device_id.clone(),
                kind: EventKind::Heartbeat,
                event_seq: heartbeat_seq,
                sensed_at_ms: clock.now_ms(),
            };
            match session.publish(&config.status_topic, &serialize_motion_event(&event), config.heartbeat_qos) {
                Ok(_) => report.heartbeats_published += 1,
                Err(e) => debug!(target: "pqtt::publisher", "heartbeat {heartbeat_seq} dropped: {e}"),
            }
        }
    }
    session.disconnect();
    indicator.set_connected(false);
    info!(
        target: "pqtt::publisher",
        "events={} heartbeats={} failures={}",
        report.events_published, report.heartbeats_published, report.delivery_failures
    );
    Ok(report)
}
