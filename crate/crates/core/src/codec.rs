//! MQTT 3.1.1 control packet encoding and decoding.
//!
//! The decoder works over a borrowed byte buffer and never consumes more than
//! one packet per call, so callers can keep an accumulating read buffer and
//! drain it packet by packet. Allocation is bounded by the declared remaining
//! length, which is itself capped by [`CodecLimits::max_packet_size`].

use std::fmt;

use thiserror::Error;

use crate::topic;

/// Protocol name carried in CONNECT.
pub const PROTOCOL_NAME: &str = "MQTT";
/// Protocol level for MQTT 3.1.1.
pub const PROTOCOL_LEVEL: u8 = 4;
/// Largest value representable by the four-byte remaining length encoding.
pub const MAX_REMAINING_LENGTH: usize = 268_435_455;
/// Default cap on a full encoded packet.
pub const DEFAULT_MAX_PACKET_SIZE: usize = 1024 * 1024;

/// Delivery guarantee of a PUBLISH or a subscription grant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum QoS {
    AtMostOnce = 0,
    AtLeastOnce = 1,
    ExactlyOnce = 2,
}

impl QoS {
    pub fn from_u8(level: u8) -> Option<QoS> {
        match level {
            0 => Some(QoS::AtMostOnce),
            1 => Some(QoS::AtLeastOnce),
            2 => Some(QoS::ExactlyOnce),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }
}

impl fmt::Display for QoS {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

/// CONNECT. The password slot carries the authentication credential blob;
/// an empty username is written alongside it because MQTT 3.1.1 forbids a
/// password without a username.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Connect {
    pub client_id: String,
    pub keep_alive: u16,
    pub clean_session: bool,
    pub credential: Option<Vec<u8>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum ConnectReturnCode {
    Accepted = 0x00,
    UnacceptableProtocolVersion = 0x01,
    IdentifierRejected = 0x02,
    ServerUnavailable = 0x03,
    BadUsernameOrPassword = 0x04,
    NotAuthorized = 0x05,
}

impl ConnectReturnCode {
    pub fn from_u8(code: u8) -> Option<Self> {
        Some(match code {
            0x00 => Self::Accepted,
            0x01 => Self::UnacceptableProtocolVersion,
            0x02 => Self::IdentifierRejected,
            0x03 => Self::ServerUnavailable,
            0x04 => Self::BadUsernameOrPassword,
            0x05 => Self::NotAuthorized,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConnAck {
    pub session_present: bool,
    pub code: ConnectReturnCode,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Publish {
    pub dup: bool,
    pub qos: QoS,
    pub retain: bool,
    pub topic: String,
    /// Present iff `qos` is above [`QoS::AtMostOnce`].
    pub packet_id: Option<u16>,
    pub payload: Vec<u8>,
}

impl Publish {
    /// A QoS 0 publish.
    pub fn at_most_once(topic: impl Into<String>, payload: impl Into<Vec<u8>>) -> Self {
        Publish {
            dup: false,
            qos: QoS::AtMostOnce,
            retain: false,
            topic: topic.into(),
            packet_id: None,
            payload: payload.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Subscribe {
    pub packet_id: u16,
    pub filters: Vec<(String, QoS)>,
}

/// One entry of a SUBACK payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubAckCode {
    Granted(QoS),
    Failure,
}

impl SubAckCode {
    pub const FAILURE: u8 = 0x80;

    pub fn as_u8(self) -> u8 {
        match self {
            SubAckCode::Granted(q) => q.as_u8(),
            SubAckCode::Failure => Self::FAILURE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubAck {
    pub packet_id: u16,
    pub codes: Vec<SubAckCode>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Unsubscribe {
    pub packet_id: u16,
    pub filters: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Packet {
    Connect(Connect),
    ConnAck(ConnAck),
    Publish(Publish),
    PubAck(u16),
    PubRec(u16),
    PubRel(u16),
    PubComp(u16),
    Subscribe(Subscribe),
    SubAck(SubAck),
    Unsubscribe(Unsubscribe),
    UnsubAck(u16),
    PingReq,
    PingResp,
    Disconnect,
}

/// Control packet type as carried in the high nibble of the fixed header.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum PacketType {
    Connect = 1,
    ConnAck = 2,
    Publish = 3,
    PubAck = 4,
    PubRec = 5,
    PubRel = 6,
    PubComp = 7,
    Subscribe = 8,
    SubAck = 9,
    Unsubscribe = 10,
    UnsubAck = 11,
    PingReq = 12,
    PingResp = 13,
    Disconnect = 14,
}

impl PacketType {
    pub fn from_u8(value: u8) -> Option<Self> {
        use PacketType::*;
        Some(match value {
            1 => Connect,
            2 => ConnAck,
            3 => Publish,
            4 => PubAck,
            5 => PubRec,
            6 => PubRel,
            7 => PubComp,
            8 => Subscribe,
            9 => SubAck,
            10 => Unsubscribe,
            11 => UnsubAck,
            12 => PingReq,
            13 => PingResp,
            14 => Disconnect,
            _ => return None,
        })
    }

    /// Fixed-header flag nibble mandated for every type except PUBLISH.
    fn required_flags(self) -> u8 {
        match self {
            PacketType::PubRel | PacketType::Subscribe | PacketType::Unsubscribe => 0b0010,
            _ => 0,
        }
    }
}

impl Packet {
    pub fn packet_type(&self) -> PacketType {
        match self {
            Packet::Connect(_) => PacketType::Connect,
            Packet::ConnAck(_) => PacketType::ConnAck,
            Packet::Publish(_) => PacketType::Publish,
            Packet::PubAck(_) => PacketType::PubAck,
            Packet::PubRec(_) => PacketType::PubRec,
            Packet::PubRel(_) => PacketType::PubRel,
            Packet::PubComp(_) => PacketType::PubComp,
            Packet::Subscribe(_) => PacketType::Subscribe,
            Packet::SubAck(_) => PacketType::SubAck,
            Packet::Unsubscribe(_) => PacketType::Unsubscribe,
            Packet::UnsubAck(_) => PacketType::UnsubAck,
            Packet::PingReq => PacketType::PingReq,
            Packet::PingResp => PacketType::PingResp,
            Packet::Disconnect => PacketType::Disconnect,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProtocolErrorKind {
    MalformedRemainingLength,
    PacketTooLarge,
    ReservedPacketType,
    InvalidFlags,
    MalformedPacket,
    InvalidUtf8,
    InvalidTopicName,
    InvalidQoS,
    ZeroPacketId,
    UnsupportedProtocol,
}

/// A violation that obliges the receiver to close the connection.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("{kind:?}: {detail}")]
pub struct ProtocolError {
    pub kind: ProtocolErrorKind,
    pub detail: String,
}

impl ProtocolError {
    fn new(kind: ProtocolErrorKind, detail: impl Into<String>) -> Self {
        ProtocolError {
            kind,
            detail: detail.into(),
        }
    }
}

fn malformed(detail: impl Into<String>) -> ProtocolError {
    ProtocolError::new(ProtocolErrorKind::MalformedPacket, detail)
}

/// Result of an incremental decode attempt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DecodeOutcome<T = Packet> {
    /// A complete value and the number of bytes it occupied.
    Complete(T, usize),
    /// At least this many further bytes are required.
    NeedMoreData(usize),
    ProtocolError(ProtocolError),
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("remaining length {0} exceeds {MAX_REMAINING_LENGTH}")]
    LengthOutOfRange(usize),
    #[error("invalid field `{field}`: {reason}")]
    InvalidField {
        field: &'static str,
        reason: String,
    },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> EncodeError {
    EncodeError::InvalidField {
        field,
        reason: reason.into(),
    }
}

/// Base-128 variable length integer, least significant group first.
pub fn encode_remaining_length(n: usize) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::with_capacity(4);
    write_remaining_length(n, &mut out)?;
    Ok(out)
}

fn write_remaining_length(mut n: usize, out: &mut Vec<u8>) -> Result<(), EncodeError> {
    if n > MAX_REMAINING_LENGTH {
        return Err(EncodeError::LengthOutOfRange(n));
    }
    loop {
        let mut byte = (n % 128) as u8;
        n /= 128;
        if n > 0 {
            byte |= 0x80;
        }
        out.push(byte);
        if n == 0 {
            return Ok(());
        }
    }
}

pub fn decode_remaining_length(buf: &[u8]) -> DecodeOutcome<usize> {
    let mut value = 0usize;
    let mut multiplier = 1usize;
    for i in 0..4 {
        let Some(&byte) = buf.get(i) else {
            return DecodeOutcome::NeedMoreData(1);
        };
        value += (byte & 0x7F) as usize * multiplier;
        if byte & 0x80 == 0 {
            return DecodeOutcome::Complete(value, i + 1);
        }
        multiplier *= 128;
    }
    DecodeOutcome::ProtocolError(ProtocolError::new(
        ProtocolErrorKind::MalformedRemainingLength,
        "continuation bit set on fourth length byte",
    ))
}

/// Decoder limits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CodecLimits {
    pub max_packet_size: usize,
}

impl Default for CodecLimits {
    fn default() -> Self {
        CodecLimits {
            max_packet_size: DEFAULT_MAX_PACKET_SIZE,
        }
    }
}

pub fn encode_packet(packet: &Packet) -> Result<Vec<u8>, EncodeError> {
    let mut body = Vec::new();
    let mut flags = packet.packet_type().required_flags();
    match packet {
        Packet::Connect(c) => encode_connect(c, &mut body)?,
        Packet::ConnAck(ack) => {
            body.push(ack.session_present as u8);
            body.push(ack.code as u8);
        }
        Packet::Publish(p) => {
            flags = encode_publish(p, &mut body)?;
        }
        Packet::PubAck(id)
        | Packet::PubRec(id)
        | Packet::PubRel(id)
        | Packet::PubComp(id)
        | Packet::UnsubAck(id) => put_packet_id(*id, &mut body)?,
        Packet::Subscribe(s) => {
            put_packet_id(s.packet_id, &mut body)?;
            if s.filters.is_empty() {
                return Err(invalid("filters", "SUBSCRIBE requires at least one filter"));
            }
            for (filter, qos) in &s.filters {
                put_str("filter", filter, &mut body)?;
                body.push(qos.as_u8());
            }
        }
        Packet::SubAck(s) => {
            put_packet_id(s.packet_id, &mut body)?;
            body.extend(s.codes.iter().map(|c| c.as_u8()));
        }
        Packet::Unsubscribe(u) => {
            put_packet_id(u.packet_id, &mut body)?;
            if u.filters.is_empty() {
                return Err(invalid("filters", "UNSUBSCRIBE requires at least one filter"));
            }
            for filter in &u.filters {
                put_str("filter", filter, &mut body)?;
            }
        }
        Packet::PingReq | Packet::PingResp | Packet::Disconnect => {}
    }

    let mut out = Vec::with_capacity(body.len() + 5);
    out.push(((packet.packet_type() as u8) << 4) | flags);
    write_remaining_length(body.len(), &mut out)?;
    out.extend_from_slice(&body);
    Ok(out)
}

fn encode_connect(c: &Connect, body: &mut Vec<u8>) -> Result<(), EncodeError> {
    put_str("protocol_name", PROTOCOL_NAME, body)?;
    body.push(PROTOCOL_LEVEL);
    let mut flags = 0u8;
    if c.clean_session {
        flags |= 0x02;
    }
    if c.credential.is_some() {
        flags |= 0x80 | 0x40;
    }
    body.push(flags);
    body.extend_from_slice(&c.keep_alive.to_be_bytes());
    put_str("client_id", &c.client_id, body)?;
    if let Some(blob) = &c.credential {
        put_str("username", "", body)?;
        put_bytes("credential", blob, body)?;
    }
    Ok(())
}

fn encode_publish(p: &Publish, body: &mut Vec<u8>) -> Result<u8, EncodeError> {
    topic::validate_topic_name(&p.topic).map_err(|e| invalid("topic", e.to_string()))?;
    put_str("topic", &p.topic, body)?;
    match (p.qos, p.packet_id) {
        (QoS::AtMostOnce, None) => {
            if p.dup {
                return Err(invalid("dup", "DUP must be clear at QoS 0"));
            }
        }
        (QoS::AtMostOnce, Some(_)) => {
            return Err(invalid("packet_id", "QoS 0 publish carries no packet id"));
        }
        (_, Some(id)) => put_packet_id(id, body)?,
        (_, None) => return Err(invalid("packet_id", "QoS > 0 publish requires a packet id")),
    }
    body.extend_from_slice(&p.payload);
    Ok(((p.dup as u8) << 3) | (p.qos.as_u8() << 1) | p.retain as u8)
}

fn put_packet_id(id: u16, out: &mut Vec<u8>) -> Result<(), EncodeError> {
    if id == 0 {
        return Err(invalid("packet_id", "packet id must be non-zero"));
    }
    out.extend_from_slice(&id.to_be_bytes());
    Ok(())
}

fn put_str(field: &'static str, s: &str, out: &mut Vec<u8>) -> Result<(), EncodeError> {
    if s.contains('\0') {
        return Err(invalid(field, "contains NUL"));
    }
    put_bytes(field, s.as_bytes(), out)
}

fn put_bytes(field: &'static str, b: &[u8], out: &mut Vec<u8>) -> Result<(), EncodeError> {
    let len = u16::try_from(b.len())
        .map_err(|_| invalid(field, format!("length {} exceeds 65535", b.len())))?;
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(b);
    Ok(())
}

/// Decodes at most one packet from the front of `buf` using default limits.
pub fn decode_packet(buf: &[u8]) -> DecodeOutcome {
    decode_packet_with(buf, &CodecLimits::default())
}

pub fn decode_packet_with(buf: &[u8], limits: &CodecLimits) -> DecodeOutcome {
    let Some(&first) = buf.first() else {
        return DecodeOutcome::NeedMoreData(2);
    };
    let Some(kind) = PacketType::from_u8(first >> 4) else {
        return DecodeOutcome::ProtocolError(ProtocolError::new(
            ProtocolErrorKind::ReservedPacketType,
            format!("packet type {}", first >> 4),
        ));
    };
    let flags = first & 0x0F;
    if kind != PacketType::Publish && flags != kind.required_flags() {
        return DecodeOutcome::ProtocolError(ProtocolError::new(
            ProtocolErrorKind::InvalidFlags,
            format!("{kind:?} with flags {flags:#06b}"),
        ));
    }
    let (remaining, len_bytes) = match decode_remaining_length(&buf[1..]) {
        DecodeOutcome::Complete(n, used) => (n, used),
        DecodeOutcome::NeedMoreData(n) => return DecodeOutcome::NeedMoreData(n),
        DecodeOutcome::ProtocolError(e) => return DecodeOutcome::ProtocolError(e),
    };
    let total = 1 + len_bytes + remaining;
    if total > limits.max_packet_size {
        return DecodeOutcome::ProtocolError(ProtocolError::new(
            ProtocolErrorKind::PacketTooLarge,
            format!("{total} bytes exceeds limit {}", limits.max_packet_size),
        ));
    }
    if buf.len() < total {
        return DecodeOutcome::NeedMoreData(total - buf.len());
    }
    let body = &buf[1 + len_bytes..total];
    match decode_body(kind, flags, body) {
        Ok(packet) => DecodeOutcome::Complete(packet, total),
        Err(e) => DecodeOutcome::ProtocolError(e),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.remaining() < n {
            return Err(malformed(format!(
                "needed {n} bytes, {} left in packet",
                self.remaining()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ProtocolError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn packet_id(&mut self) -> Result<u16, ProtocolError> {
        match self.u16()? {
            0 => Err(ProtocolError::new(
                ProtocolErrorKind::ZeroPacketId,
                "packet id must be non-zero",
            )),
            id => Ok(id),
        }
    }

    fn bytes(&mut self) -> Result<&'a [u8], ProtocolError> {
        let len = self.u16()? as usize;
        self.take(len)
    }

    fn string(&mut self) -> Result<String, ProtocolError> {
        let raw = self.bytes()?;
        let s = std::str::from_utf8(raw)
            .map_err(|e| ProtocolError::new(ProtocolErrorKind::InvalidUtf8, e.to_string()))?;
        if s.contains('\0') {
            return Err(ProtocolError::new(
                ProtocolErrorKind::InvalidUtf8,
                "string contains U+0000",
            ));
        }
        Ok(s.to_owned())
    }

    fn rest(&mut self) -> &'a [u8] {
        let out = &self.buf[self.pos..];
        self.pos = self.buf.len();
        out
    }

    fn finish(&self) -> Result<(), ProtocolError> {
        if self.remaining() != 0 {
            return Err(malformed(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

fn decode_body(kind: PacketType, flags: u8, body: &[u8]) -> Result<Packet, ProtocolError> {
    let mut r = Reader::new(body);
    let packet = match kind {
        PacketType::Connect => Packet::Connect(decode_connect(&mut r)?),
        PacketType::ConnAck => {
            let ack_flags = r.u8()?;
            if ack_flags & 0xFE != 0 {
                return Err(ProtocolError::new(
                    ProtocolErrorKind::InvalidFlags,
                    "reserved CONNACK flag bits set",
                ));
            }
            let raw = r.u8()?;
            let code = ConnectReturnCode::from_u8(raw)
                .ok_or_else(|| malformed(format!("unknown CONNACK return code {raw:#04x}")))?;
            Packet::ConnAck(ConnAck {
                session_present: ack_flags & 1 == 1,
                code,
            })
        }
        PacketType::Publish => {
            let qos = QoS::from_u8((flags >> 1) & 0b11).ok_or_else(|| {
                ProtocolError::new(ProtocolErrorKind::InvalidQoS, "PUBLISH with QoS 3")
            })?;
            let dup = flags & 0b1000 != 0;
            if qos == QoS::AtMostOnce && dup {
                return Err(ProtocolError::new(
                    ProtocolErrorKind::InvalidFlags,
                    "DUP set on QoS 0 PUBLISH",
                ));
            }
            let topic = r.string()?;
            topic::validate_topic_name(&topic).map_err(|e| {
                ProtocolError::new(ProtocolErrorKind::InvalidTopicName, e.to_string())
            })?;
            let packet_id = match qos {
                QoS::AtMostOnce => None,
                _ => Some(r.packet_id()?),
            };
            Packet::Publish(Publish {
                dup,
                qos,
                retain: flags & 1 != 0,
                topic,
                packet_id,
                payload: r.rest().to_vec(),
            })
        }
        PacketType::PubAck => Packet::PubAck(r.packet_id()?),
        PacketType::PubRec => Packet::PubRec(r.packet_id()?),
        PacketType::PubRel => Packet::PubRel(r.packet_id()?),
        PacketType::PubComp => Packet::PubComp(r.packet_id()?),
        PacketType::UnsubAck => Packet::UnsubAck(r.packet_id()?),
        PacketType::Subscribe => {
            let packet_id = r.packet_id()?;
            let mut filters = Vec::new();
            while r.remaining() > 0 {
                let filter = r.string()?;
                let raw = r.u8()?;
                if raw & 0xFC != 0 {
                    return Err(ProtocolError::new(
                        ProtocolErrorKind::InvalidFlags,
                        "reserved bits set in requested QoS",
                    ));
                }
                let qos = QoS::from_u8(raw).ok_or_else(|| {
                    ProtocolError::new(ProtocolErrorKind::InvalidQoS, "requested QoS 3")
                })?;
                filters.push((filter, qos));
            }
            if filters.is_empty() {
                return Err(malformed("SUBSCRIBE without filters"));
            }
            Packet::Subscribe(Subscribe { packet_id, filters })
        }
        PacketType::SubAck => {
            let packet_id = r.packet_id()?;
            let codes = r
                .rest()
                .iter()
                .map(|&c| match c {
                    SubAckCode::FAILURE => Ok(SubAckCode::Failure),
                    other => QoS::from_u8(other)
                        .map(SubAckCode::Granted)
                        .ok_or_else(|| malformed(format!("invalid SUBACK code {other:#04x}"))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            Packet::SubAck(SubAck { packet_id, codes })
        }
        PacketType::Unsubscribe => {
            let packet_id = r.packet_id()?;
            let mut filters = Vec::new();
            while r.remaining() > 0 {
                filters.push(r.string()?);
            }
            if filters.is_empty() {
                return Err(malformed("UNSUBSCRIBE without filters"));
            }
            Packet::Unsubscribe(Unsubscribe { packet_id, filters })
        }
        PacketType::PingReq => Packet::PingReq,
        PacketType::PingResp => Packet::PingResp,
        PacketType::Disconnect => Packet::Disconnect,
    };
    r.finish()?;
    Ok(packet)
}

fn decode_connect(r: &mut Reader<'_>) -> Result<Connect, ProtocolError> {
    let name = r.string()?;
    let level = r.u8()?;
    if name != PROTOCOL_NAME || level != PROTOCOL_LEVEL {
        return Err(ProtocolError::new(
            ProtocolErrorKind::UnsupportedProtocol,
            format!("protocol {name:?} level {level}"),
        ));
    }
    let flags = r.u8()?;
    if flags & 0x01 != 0 {
        return Err(ProtocolError::new(
            ProtocolErrorKind::InvalidFlags,
            "reserved CONNECT flag set",
        ));
    }
    let has_username = flags & 0x80 != 0;
    let has_password = flags & 0x40 != 0;
    let will = flags & 0x04 != 0;
    let will_qos = (flags >> 3) & 0b11;
    let will_retain = flags & 0x20 != 0;
    if has_password && !has_username {
        return Err(ProtocolError::new(
            ProtocolErrorKind::InvalidFlags,
            "password flag without username flag",
        ));
    }
    if !will && (will_qos != 0 || will_retain) {
        return Err(ProtocolError::new(
            ProtocolErrorKind::InvalidFlags,
            "will QoS/retain without will flag",
        ));
    }
    if will_qos == 3 {
        return Err(ProtocolError::new(
            ProtocolErrorKind::InvalidQoS,
            "will QoS 3",
        ));
    }
    let keep_alive = r.u16()?;
    let client_id = r.string()?;
    if will {
        // Will messages are not supported; the fields are skipped.
        r.string()?;
        r.bytes()?;
    }
    if has_username {
        r.string()?;
    }
    let credential = if has_password {
        Some(r.bytes()?.to_vec())
    } else {
        None
    };
    Ok(Connect {
        client_id,
        keep_alive,
        clean_session: flags & 0x02 != 0,
        credential,
    })
}
