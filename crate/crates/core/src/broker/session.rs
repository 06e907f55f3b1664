//! Per-session QoS bookkeeping, independent of sockets.

use std::collections::{BTreeMap, HashMap};
use std::time::{Duration, Instant};

use crate::codec::{Packet, Publish, QoS};

/// What the broker must do after an inbound packet.
#[derive(Debug, Default, PartialEq, Eq)]
pub struct InboundAction {
    pub reply: Option<Packet>,
    pub route: Option<Publish>,
}

/// Inbound QoS handling for messages a client publishes to the broker.
///
/// QoS 2 messages are held until PUBREL and routed exactly once per
/// packet-id cycle; retransmissions before PUBREL are acknowledged again but
/// never routed twice.
#[derive(Debug, Default)]
pub struct InboundQos {
    awaiting_release: HashMap<u16, Publish>,
}

impl InboundQos {
    pub fn on_publish(&mut self, publish: Publish) -> InboundAction {
        match (publish.qos, publish.packet_id) {
            (QoS::AtMostOnce, _) | (_, None) => InboundAction {
                reply: None,
                route: Some(publish),
            },
            (QoS::AtLeastOnce, Some(id)) => InboundAction {
                reply: Some(Packet::PubAck(id)),
                route: Some(publish),
            },
            (QoS::ExactlyOnce, Some(id)) => {
                self.awaiting_release.entry(id).or_insert(publish);
                InboundAction {
                    reply: Some(Packet::PubRec(id)),
                    route: None,
                }
            }
        }
    }

    pub fn on_pubrel(&mut self, id: u16) -> InboundAction {
        InboundAction {
            reply: Some(Packet::PubComp(id)),
            route: self.awaiting_release.remove(&id),
        }
    }

    pub fn pending(&self) -> usize {
        self.awaiting_release.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    AwaitPubAck,
    AwaitPubRec,
    AwaitPubComp,
}

#[derive(Debug)]
struct Inflight {
    publish: Publish,
    stage: Stage,
    sent_at: Instant,
    attempts: u32,
}

/// Outbound QoS state for deliveries from the broker to one subscriber.
#[derive(Debug)]
pub struct OutboundQos {
    next_id: u16,
    inflight: BTreeMap<u16, Inflight>,
}

impl Default for OutboundQos {
    fn default() -> Self {
        OutboundQos {
            next_id: 1,
            inflight: BTreeMap::new(),
        }
    }
}

impl OutboundQos {
    fn allocate_id(&mut self) -> Option<u16> {
        if self.inflight.len() >= u16::MAX as usize {
            return None;
        }
        loop {
            let id = self.next_id;
            self.next_id = self.next_id.checked_add(1).unwrap_or(1);
            if !self.inflight.contains_key(&id) {
                return Some(id);
            }
        }
    }

    /// Stamps a packet id on a QoS 1/2 delivery and tracks it. Returns `None`
    /// when every packet id is in flight.
    pub fn prepare(&mut self, mut publish: Publish, now: Instant) -> Option<Publish> {
        publish.dup = false;
        let stage = match publish.qos {
            QoS::AtMostOnce => {
                publish.packet_id = None;
                return Some(publish);
            }
            QoS::AtLeastOnce => Stage::AwaitPubAck,
            QoS::ExactlyOnce => Stage::AwaitPubRec,
        };
        let id = self.allocate_id()?;
        publish.packet_id = Some(id);
        self.inflight.insert(
            id,
            Inflight {
                publish: publish.clone(),
                stage,
                sent_at: now,
                attempts: 1,
            },
        );
        Some(publish)
    }

    pub fn on_puback(&mut self, id: u16) {
        if matches!(self.inflight.get(&id), Some(f) if f.stage == Stage::AwaitPubAck) {
            self.inflight.remove(&id);
        }
    }

    /// Returns the PUBREL to send.
    pub fn on_pubrec(&mut self, id: u16, now: Instant) -> Packet {
        if let Some(f) = self.inflight.get_mut(&id) {
            if f.stage == Stage::AwaitPubRec {
                f.stage = Stage::AwaitPubComp;
                f.sent_at = now;
                f.attempts = 1;
            }
        }
        Packet::PubRel(id)
    }

    pub fn on_pubcomp(&mut self, id: u16) {
        if matches!(self.inflight.get(&id), Some(f) if f.stage == Stage::AwaitPubComp) {
            self.inflight.remove(&id);
        }
    }

    pub fn in_flight(&self) -> usize {
        self.inflight.len()
    }

    /// Packets whose acknowledgement is overdue, marked for retransmission.
    /// Entries that exhausted `max_attempts` are dropped.
    pub fn due_retransmits(
        &mut self,
        now: Instant,
        interval: Duration,
        max_attempts: u32,
    ) -> Vec<Packet> {
        let mut out = Vec::new();
        self.inflight.retain(|&id, f| {
            if now.duration_since(f.sent_at) < interval {
                return true;
            }
            if f.attempts >= max_attempts {
                return false;
            }
            f.attempts += 1;
            f.sent_at = now;
            out.push(match f.stage {
                Stage::AwaitPubComp => Packet::PubRel(id),
                _ => {
                    let mut p = f.publish.clone();
                    p.dup = true;
                    Packet::Publish(p)
                }
            });
            true
        });
        out
    }
}

/// Sessions idle for longer than `grace × keep_alive`. A keep-alive of zero
/// disables the check.
pub fn keepalive_sweep<S>(
    sessions: impl IntoIterator<Item = (S, u16, Instant)>,
    now: Instant,
    grace: f64,
) -> Vec<S> {
    sessions
        .into_iter()
        .filter(|(_, keep_alive, last_activity)| {
            if *keep_alive == 0 {
                return false;
            }
            let limit = Duration::from_secs_f64(*keep_alive as f64 * grace);
            now.saturating_duration_since(*last_activity) > limit
        })
        .map(|(s, _, _)| s)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn publish(qos: QoS, id: Option<u16>) -> Publish {
        Publish {
            dup: false,
            qos,
            retain: false,
            topic: "motion-sensor".into(),
            packet_id: id,
            payload: b"x".to_vec(),
        }
    }

    #[test]
    fn qos0_routes_without_ack() {
        let mut q = InboundQos::default();
        let a = q.on_publish(publish(QoS::AtMostOnce, None));
        assert_eq!(a.reply, None);
        assert!(a.route.is_some());
    }

    #[test]
    fn qos1_acks_and_routes_every_copy() {
        let mut q = InboundQos::default();
        let a = q.on_publish(publish(QoS::AtLeastOnce, Some(4)));
        assert_eq!(a.reply, Some(Packet::PubAck(4)));
        assert!(a.route.is_some());
        let mut dup = publish(QoS::AtLeastOnce, Some(4));
        dup.dup = true;
        assert!(q.on_publish(dup).route.is_some());
    }

    #[test]
    fn qos2_duplicate_before_pubrel_routes_once() {
        let mut q = InboundQos::default();
        let mut routed = 0;
        let script = [
            Packet::Publish(publish(QoS::ExactlyOnce, Some(9))),
            Packet::Publish(Publish {
                dup: true,
                ..publish(QoS::ExactlyOnce, Some(9))
            }),
            Packet::PubRel(9),
            Packet::PubRel(9),
        ];
        let mut replies = Vec::new();
        for packet in script {
            let action = match packet {
                Packet::Publish(p) => q.on_publish(p),
                Packet::PubRel(id) => q.on_pubrel(id),
                _ => unreachable!(),
            };
            routed += action.route.is_some() as usize;
            replies.push(action.reply.unwrap());
        }
        assert_eq!(routed, 1);
        assert_eq!(
            replies,
            vec![
                Packet::PubRec(9),
                Packet::PubRec(9),
                Packet::PubComp(9),
                Packet::PubComp(9)
            ]
        );
        assert_eq!(q.pending(), 0);

        // id released: a new message may reuse it
        assert!(q.on_publish(publish(QoS::ExactlyOnce, Some(9))).route.is_none());
        assert!(q.on_pubrel(9).route.is_some());
    }

    #[test]
    fn outbound_ids_are_unique_and_released() {
        let mut out = OutboundQos::default();
        let now = Instant::now();
        let a = out.prepare(publish(QoS::AtLeastOnce, None), now).unwrap();
        let b = out.prepare(publish(QoS::ExactlyOnce, None), now).unwrap();
        assert_ne!(a.packet_id, b.packet_id);
        assert!(a.packet_id.unwrap() != 0);
        assert_eq!(out.in_flight(), 2);

        out.on_puback(a.packet_id.unwrap());
        assert_eq!(out.on_pubrec(b.packet_id.unwrap(), now), Packet::PubRel(b.packet_id.unwrap()));
        // PUBACK for a QoS 2 id is ignored
        out.on_puback(b.packet_id.unwrap());
        assert_eq!(out.in_flight(), 1);
        out.on_pubcomp(b.packet_id.unwrap());
        assert_eq!(out.in_flight(), 0);

        let zero = out.prepare(publish(QoS::AtMostOnce, Some(3)), now).unwrap();
        assert_eq!(zero.packet_id, None);
    }

    #[test]
    fn retransmits_set_dup_and_give_up() {
        let mut out = OutboundQos::default();
        let t0 = Instant::now();
        let p = out.prepare(publish(QoS::AtLeastOnce, None), t0).unwrap();
        let interval = Duration::from_secs(5);
        assert!(out.due_retransmits(t0 + Duration::from_secs(4), interval, 3).is_empty());
        let again = out.due_retransmits(t0 + Duration::from_secs(5), interval, 3);
        match &again[..] {
            [Packet::Publish(r)] => {
                assert!(r.dup);
                assert_eq!(r.packet_id, p.packet_id);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(out.due_retransmits(t0 + Duration::from_secs(10), interval, 3).len(), 1);
        assert!(out.due_retransmits(t0 + Duration::from_secs(15), interval, 3).is_empty());
        assert_eq!(out.in_flight(), 0);
    }

    #[test]
    fn keepalive_boundaries() {
        let t0 = Instant::now();
        let idle = |secs: f64| t0 + Duration::from_secs_f64(secs);
        // keepalive 10 s, grace 1.5: limit 15 s
        let sessions = [(1, 10u16, t0)];
        assert!(keepalive_sweep(sessions, idle(15.0), 1.5).is_empty());
        assert_eq!(keepalive_sweep(sessions, idle(16.0), 1.5), vec![1]);
        // PINGREQ at 14 s refreshes activity
        let refreshed = [(1, 10u16, idle(14.0))];
        assert!(keepalive_sweep(refreshed, idle(16.0), 1.5).is_empty());
        // zero keepalive never expires
        assert!(keepalive_sweep([(2, 0u16, t0)], idle(1e6), 1.5).is_empty());
    }
}
