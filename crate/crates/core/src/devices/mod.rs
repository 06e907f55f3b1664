//! The motion-sensing publisher node and the logging subscriber node.

mod publisher;
mod sensor;
mod subscriber;

use std::fmt;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use publisher::{run_publisher, PublisherConfig, PublisherReport};
pub use sensor::{HardwarePir, PinAssignment, SensorEventSource, SimulatedPir};
pub use subscriber::{run_subscriber, LogRecord, Subscriber, SubscriberConfig, SubscriberReport};

pub const DEFAULT_MOTION_TOPIC: &str = "motion-sensor";
pub const DEFAULT_HEARTBEAT_SECS: u64 = 60;
pub const DEFAULT_HOLD_MS: u64 = 1000;
pub const DEFAULT_LOG_PATH: &str = "./pqc-mqtt/events.log";

pub fn status_topic(device_id: &str) -> String {
    format!("status/{device_id}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Motion,
    Heartbeat,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::Motion => "motion",
            EventKind::Heartbeat => "heartbeat",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionEvent {
    pub device_id: String,
    pub kind: EventKind,
    pub event_seq: u64,
    pub sensed_at_ms: u64,
}

#[derive(Debug, Error)]
#[error("motion event: {0}")]
pub struct EventParseError(#[from] serde_json::Error);

pub fn serialize_motion_event(e: &MotionEvent) -> Vec<u8> {
    serde_json::to_vec(e).expect("motion event serializes")
}

pub fn parse_motion_event(bytes: &[u8]) -> Result<MotionEvent, EventParseError> {
    Ok(serde_json::from_slice(bytes)?)
}

/// The two LEDs on the publisher: status (lit while connected) and
/// detection (lit for `hold` after each motion event).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IndicatorState {
    pub status_on: bool,
    pub detection_on: bool,
}

#[derive(Debug)]
pub struct Indicator {
    hold: Duration,
    inner: Mutex<(bool, Option<Instant>)>,
}

impl Indicator {
    pub fn new(hold: Duration) -> Self {
        Indicator {
            hold,
            inner: Mutex::new((false, None)),
        }
    }

    pub fn set_connected(&self, on: bool) {
        self.inner.lock().0 = on;
    }

    pub fn motion_at(&self, at: Instant) {
        self.inner.lock().1 = Some(at);
    }

    pub fn state_at(&self, now: Instant) -> IndicatorState {
        let (status_on, last) = *self.inner.lock();
        IndicatorState {
            status_on,
            detection_on: last.is_some_and(|t| now >= t && now.duration_since(t) < self.hold),
        }
    }

    pub fn state(&self) -> IndicatorState {
        self.state_at(Instant::now())
    }
}
