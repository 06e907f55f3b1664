#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;

use pqtt::codec::{
    ConnAck, Connect, ConnectReturnCode, Packet, PacketType, Publish, QoS, SubAck, SubAckCode, Subscribe,
    Unsubscribe,
};

pub const ALL_TYPES: [PacketType; 14] = [
    PacketType::Connect,
    PacketType::ConnAck,
    PacketType::Publish,
    PacketType::PubAck,
    PacketType::PubRec,
    PacketType::PubRel,
    PacketType::PubComp,
    PacketType::Subscribe,
    PacketType::SubAck,
    PacketType::Unsubscribe,
    PacketType::UnsubAck,
    PacketType::PingReq,
    PacketType::PingResp,
    PacketType::Disconnect,
];

const CHARS: &[char] = &['a', 'b', 'z', '0', '-', '_', 'é', '€', '水', ' '];

fn text<R: Rng>(rng: &mut R, max: usize) -> String {
    let n = rng.gen_range(0..=max);
    (0..n).map(|_| *CHARS.choose(rng).unwrap()).collect()
}

fn level<R: Rng>(rng: &mut R) -> String {
    text(rng, 6)
}

pub fn random_topic<R: Rng>(rng: &mut R) -> String {
    loop {
        let n = rng.gen_range(1..=5);
        let t = (0..n).map(|_| level(rng)).collect::<Vec<_>>().join("/");
        if !t.is_empty() {
            return t;
        }
    }
}

pub fn random_filter<R: Rng>(rng: &mut R) -> String {
    let n = rng.gen_range(1..=5);
    let mut levels: Vec<String> = (0..n)
        .map(|_| match rng.gen_range(0..4) {
            0 => "+".to_owned(),
            _ => level(rng),
        })
        .collect();
    if rng.gen_bool(0.3) {
        levels.push("#".into());
    }
    let f = levels.join("/");
    if f.is_empty() {
        "#".into()
    } else {
        f
    }
}

fn qos<R: Rng>(rng: &mut R) -> QoS {
    QoS::from_u8(rng.gen_range(0..3)).unwrap()
}

fn id<R: Rng>(rng: &mut R) -> u16 {
    rng.gen_range(1..=u16::MAX)
}

fn bytes<R: Rng>(rng: &mut R, max: usize) -> Vec<u8> {
    let n = if rng.gen_bool(0.05) { rng.gen_range(0..=max) } else { rng.gen_range(0..=max.min(300)) };
    (0..n).map(|_| rng.gen()).collect()
}

/// A well-formed packet of the given type with randomized fields.
pub fn random_packet_of<R: Rng>(rng: &mut R, kind: PacketType) -> Packet {
    match kind {
        PacketType::Connect => Packet::Connect(Connect {
            client_id: text(rng, 23),
            keep_alive: rng.gen(),
            clean_session: rng.gen(),
            credential: rng.gen_bool(0.7).then(|| bytes(rng, 4000)),
        }),
        PacketType::ConnAck => {
            let code = ConnectReturnCode::from_u8(rng.gen_range(0..6)).unwrap();
            Packet::ConnAck(ConnAck {
                session_present: code == ConnectReturnCode::Accepted && rng.gen(),
                code,
            })
        }
        PacketType::Publish => {
            let q = qos(rng);
            Packet::Publish(Publish {
                dup: q != QoS::AtMostOnce && rng.gen(),
                qos: q,
                retain: rng.gen(),
                topic: random_topic(rng),
                packet_id: (q != QoS::AtMostOnce).then(|| id(rng)),
                payload: bytes(rng, 4096),
            })
        }
        PacketType::PubAck => Packet::PubAck(id(rng)),
        PacketType::PubRec => Packet::PubRec(id(rng)),
        PacketType::PubRel => Packet::PubRel(id(rng)),
        PacketType::PubComp => Packet::PubComp(id(rng)),
        PacketType::Subscribe => Packet::Subscribe(Subscribe {
            packet_id: id(rng),
            filters: (0..rng.gen_range(1..5)).map(|_| (random_filter(rng), qos(rng))).collect(),
        }),
        PacketType::SubAck => Packet::SubAck(SubAck {
            packet_id: id(rng),
            codes: (0..rng.gen_range(1..5))
                .map(|_| {
                    if rng.gen_bool(0.2) {
                        SubAckCode::Failure
                    } else {
                        SubAckCode::Granted(qos(rng))
                    }
                })
                .collect(),
        }),
        PacketType::Unsubscribe => Packet::Unsubscribe(Unsubscribe {
            packet_id: id(rng),
            filters: (0..rng.gen_range(1..5)).map(|_| random_filter(rng)).collect(),
        }),
        PacketType::UnsubAck => Packet::UnsubAck(id(rng)),
        PacketType::PingReq => Packet::PingReq,
        PacketType::PingResp => Packet::PingResp,
        PacketType::Disconnect => Packet::Disconnect,
    }
}

pub fn random_packet<R: Rng>(rng: &mut R) -> Packet {
    let kind = *ALL_TYPES.choose(rng).unwrap();
    random_packet_of(rng, kind)
}

/// Straightforward recursive matcher used as the oracle for the trie.
pub fn naive_match(filter: &str, topic: &str) -> bool {
    if topic.starts_with('$') && (filter.starts_with('+') || filter.starts_with('#')) {
        return false;
    }
    fn go(f: &[&str], t: &[&str]) -> bool {
        match (f.first(), t.first()) {
            (Some(&"#"), _) => true,
            (Some(&"+"), Some(_)) => go(&f[1..], &t[1..]),
            (Some(lit), Some(level)) => lit == level && go(&f[1..], &t[1..]),
            (None, None) => true,
            _ => false,
        }
    }
    let f: Vec<&str> = filter.split('/').collect();
    let t: Vec<&str> = topic.split('/').collect();
    go(&f, &t)
}

/// Every filter over `{a, b}` with up to four levels, any placement of `+`,
/// and `#` in the last position.
pub fn filter_universe() -> Vec<String> {
    let mut out = Vec::new();
    let mut prefixes: Vec<Vec<&str>> = vec![vec![]];
    for _ in 0..4 {
        let mut next = Vec::new();
        for p in &prefixes {
            let mut hashed = p.clone();
            hashed.push("#");
            out.push(hashed.join("/"));
            for l in ["a", "b", "+"] {
                let mut q = p.clone();
                q.push(l);
                out.push(q.join("/"));
                next.push(q);
            }
        }
        prefixes = next;
    }
    out
}

/// Every topic over `{a, b}` with one to four levels.
pub fn topic_universe() -> Vec<String> {
    let mut out = Vec::new();
    let mut layer: Vec<String> = vec![String::new()];
    for _ in 0..4 {
        let mut next = Vec::new();
        for p in &layer {
            for l in ["a", "b"] {
                let t = if p.is_empty() { l.to_owned() } else { format!("{p}/{l}") };
                out.push(t.clone());
                next.push(t);
            }
        }
        layer = next;
    }
    out
}
