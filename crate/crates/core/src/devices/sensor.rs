use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A source of motion triggers, expressed as offsets from the start of a
/// run. Offsets never decrease.
pub trait SensorEventSource: Send {
    /// `None` once the source has no more triggers.
    fn next_offset(&mut self) -> Option<Duration>;
}

/// Simulated PIR sensor: either a fixed schedule or seeded exponential gaps.
#[derive(Clone, Debug)]
pub struct SimulatedPir {
    mode: Mode,
    elapsed: Duration,
}

#[derive(Clone, Debug)]
enum Mode {
    Schedule { offsets: Vec<Duration>, next: usize },
    Random { rng: ChaCha8Rng, mean: Duration, remaining: Option<u64> },
}

impl SimulatedPir {
    /// Triggers at the given offsets (sorted first).
    pub fn from_schedule(mut offsets: Vec<Duration>) -> Self {
        offsets.sort();
        SimulatedPir {
            mode: Mode::Schedule { offsets, next: 0 },
            elapsed: Duration::ZERO,
        }
    }

    pub fn from_schedule_ms(offsets: &[u64]) -> Self {
        Self::from_schedule(offsets.iter().map(|&ms| Duration::from_millis(ms)).collect())
    }

    /// Exponentially distributed gaps with the given mean; `limit` caps the
    /// number of triggers.
    pub fn random(seed: u64, mean: Duration, limit: Option<u64>) -> Self {
        SimulatedPir {
            mode: Mode::Random {
                rng: ChaCha8Rng::seed_from_u64(seed),
                mean,
                remaining: limit,
            },
            elapsed: Duration::ZERO,
        }
    }
}

impl SensorEventSource for SimulatedPir {
    fn next_offset(&mut self) -> Option<Duration> {
        match &mut self.mode {
            Mode::Schedule { offsets, next } => {
                let d = *offsets.get(*next)?;
                *next += 1;
                Some(d)
            }
            Mode::Random { rng, mean, remaining } => {
                if let Some(r) = remaining {
                    if *r == 0 {
                        return None;
                    }
                    *r -= 1;
                }
                let u: f64 = rng.gen();
                let gap_ms = (-(1.0 - u).ln() * mean.as_secs_f64() * 1000.0).max(1.0);
                self.elapsed += Duration::from_micros((gap_ms * 1000.0) as u64);
                Some(self.elapsed)
            }
        }
    }
}

/// GPIO pins used by the physical build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PinAssignment {
    pub pir_sensor: u8,
    pub status_led: u8,
    pub detection_led: u8,
}

impl Default for PinAssignment {
    fn default() -> Self {
        PinAssignment {
            pir_sensor: 14,
            status_led: 21,
            detection_led: 20,
        }
    }
}

/// Placeholder for a GPIO-backed PIR sensor. No GPIO driver is linked, so
/// it yields no triggers.
#[derive(Clone, Debug, Default)]
pub struct HardwarePir {
    pub pins: PinAssignment,
}

impl SensorEventSource for HardwarePir {
    fn next_offset(&mut self) -> Option<Duration> {
        log::warn!("no GPIO backend available for PIR on GPIO{}", self.pins.pir_sensor);
        None
    }
}
