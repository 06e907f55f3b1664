//! Signed message envelopes carried as PUBLISH payloads.
//!
//! Wire layout (big-endian):
//!
//! ```text
//! "PQEV" | version u8 | subject_len u8 | subject | sequence u64 | timestamp_ms u64
//!        | topic_len u16 | topic | payload_len u32 | payload | sig_len u16 | signature
//! ```
//!
//! The signature covers everything before `sig_len`.

use std::collections::HashMap;

use thiserror::Error;

use crate::pki::{self, verify_certificate, Certificate, KeyPair, PkiError, VerifyError};
use crate::wire::{Cursor, WireError};

pub const ENVELOPE_MAGIC: &[u8; 4] = b"PQEV";
pub const ENVELOPE_VERSION: u8 = 1;
pub const DEFAULT_FRESHNESS_WINDOW_MS: u64 = 120_000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignedEnvelope {
    pub sender_subject: String,
    pub sequence: u64,
    pub timestamp_ms: u64,
    pub topic: String,
    pub payload: Vec<u8>,
    pub signature: Vec<u8>,
}

#[derive(Debug, Error)]
pub enum EnvelopeError {
    #[error("envelope format: {0}")]
    Format(String),
    #[error("sender certificate rejected: {0}")]
    CertInvalid(VerifyError),
    #[error("sender subject does not match certificate")]
    SubjectMismatch,
    #[error("signature does not verify")]
    BadSignature,
    #[error("sequence {sequence} not above last accepted {last}")]
    Replay { sequence: u64, last: u64 },
    #[error("timestamp outside freshness window")]
    Stale,
    #[error(transparent)]
    Signing(#[from] PkiError),
}

impl From<WireError> for EnvelopeError {
    fn from(e: WireError) -> Self {
        EnvelopeError::Format(e.to_string())
    }
}

/// Canonical bytes covered by the sender's signature.
pub fn envelope_signing_bytes(
    sender_subject: &str,
    sequence: u64,
    timestamp_ms: u64,
    topic: &str,
    payload: &[u8],
) -> Result<Vec<u8>, EnvelopeError> {
    let subject_len = u8::try_from(sender_subject.len())
        .map_err(|_| EnvelopeError::Format("sender subject over 255 bytes".into()))?;
    let topic_len = u16::try_from(topic.len())
        .map_err(|_| EnvelopeError::Format("topic over 65535 bytes".into()))?;
    let payload_len = u32::try_from(payload.len())
        .map_err(|_| EnvelopeError::Format("payload over 4 GiB".into()))?;
    let mut out = Vec::with_capacity(32 + sender_subject.len() + topic.len() + payload.len());
    out.extend_from_slice(ENVELOPE_MAGIC);
    out.push(ENVELOPE_VERSION);
    out.push(subject_len);
    out.extend_from_slice(sender_subject.as_bytes());
    out.extend_from_slice(&sequence.to_be_bytes());
    out.extend_from_slice(&timestamp_ms.to_be_bytes());
    out.extend_from_slice(&topic_len.to_be_bytes());
    out.extend_from_slice(topic.as_bytes());
    out.extend_from_slice(&payload_len.to_be_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

impl SignedEnvelope {
    pub fn signing_bytes(&self) -> Result<Vec<u8>, EnvelopeError> {
        envelope_signing_bytes(
            &self.sender_subject,
            self.sequence,
            self.timestamp_ms,
            &self.topic,
            &self.payload,
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, EnvelopeError> {
        let mut out = self.signing_bytes()?;
        let sig_len = u16::try_from(self.signature.len())
            .map_err(|_| EnvelopeError::Format("signature over 65535 bytes".into()))?;
        out.extend_from_slice(&sig_len.to_be_bytes());
        out.extend_from_slice(&self.signature);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<SignedEnvelope, EnvelopeError> {
        let mut c = Cursor::new(buf);
        c.magic(ENVELOPE_MAGIC)?;
        let version = c.u8()?;
        if version != ENVELOPE_VERSION {
            return Err(WireError::Version(version).into());
        }
        let sender_subject = c.str_u8()?.to_owned();
        let sequence = c.u64()?;
        let timestamp_ms = c.u64()?;
        let topic = c.str_u16()?.to_owned();
        let payload = c.bytes_u32()?.to_vec();
        let signature = c.bytes_u16()?.to_vec();
        c.finish()?;
        Ok(SignedEnvelope {
            sender_subject,
            sequence,
            timestamp_ms,
            topic,
            payload,
            signature,
        })
    }
}

pub fn serialize_envelope(e: &SignedEnvelope) -> Result<Vec<u8>, EnvelopeError> {
    e.to_bytes()
}

pub fn deserialize_envelope(buf: &[u8]) -> Result<SignedEnvelope, EnvelopeError> {
    SignedEnvelope::from_bytes(buf)
}

/// Signs a payload for `topic` as `sender_subject`.
pub fn seal(
    keypair: &KeyPair,
    sender_subject: &str,
    sequence: u64,
    topic: &str,
    payload: &[u8],
    timestamp_ms: u64,
) -> Result<SignedEnvelope, EnvelopeError> {
    let bytes = envelope_signing_bytes(sender_subject, sequence, timestamp_ms, topic, payload)?;
    let signature = keypair.sign(&bytes)?;
    Ok(SignedEnvelope {
        sender_subject: sender_subject.to_owned(),
        sequence,
        timestamp_ms,
        topic: topic.to_owned(),
        payload: payload.to_vec(),
        signature,
    })
}

/// Per-sender replay bookkeeping for one receiver.
#[derive(Clone, Debug)]
pub struct ReplayState {
    last_accepted: HashMap<String, u64>,
    window_ms: u64,
}

impl Default for ReplayState {
    fn default() -> Self {
        Self::new(DEFAULT_FRESHNESS_WINDOW_MS)
    }
}

impl ReplayState {
    pub fn new(window_ms: u64) -> Self {
        ReplayState {
            last_accepted: HashMap::new(),
            window_ms,
        }
    }

    pub fn window_ms(&self) -> u64 {
        self.window_ms
    }

    pub fn last_accepted(&self, subject: &str) -> Option<u64> {
        self.last_accepted.get(subject).copied()
    }

    fn check(&self, e: &SignedEnvelope, now_ms: u64) -> Result<(), EnvelopeError> {
        let last = self.last_accepted(&e.sender_subject).unwrap_or(0);
        if e.sequence <= last {
            return Err(EnvelopeError::Replay {
                sequence: e.sequence,
                last,
            });
        }
        if now_ms.abs_diff(e.timestamp_ms) > self.window_ms {
            return Err(EnvelopeError::Stale);
        }
        Ok(())
    }
}

/// Verifies an envelope and records its sequence.
///
/// Checks run in order: sender certificate against the trust root, subject
/// binding, signature, sequence, freshness. State changes only on success.
pub fn open(
    envelope: &SignedEnvelope,
    sender_cert: &Certificate,
    trust_root: &Certificate,
    state: &mut ReplayState,
    now_ms: u64,
) -> Result<Vec<u8>, EnvelopeError> {
    verify_certificate(sender_cert, trust_root, now_ms / 1000).map_err(EnvelopeError::CertInvalid)?;
    if envelope.sender_subject != sender_cert.subject {
        return Err(EnvelopeError::SubjectMismatch);
    }
    let signed = envelope.signing_bytes()?;
    if !pki::verify(
        sender_cert.scheme,
        &sender_cert.public_key,
        &signed,
        &envelope.signature,
    ) {
        return Err(EnvelopeError::BadSignature);
    }
    state.check(envelope, now_ms)?;
    state
        .last_accepted
        .insert(envelope.sender_subject.clone(), envelope.sequence);
    Ok(envelope.payload.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pki::{
        issue_certificate, self_signed_ca, test_keypair, CertificateRequest, Role, FALCON_1024,
    };

    const NOW_MS: u64 = 1_700_000_000_000;

    struct Fixture {
        ca: Certificate,
        sender: KeyPair,
        sender_cert: Certificate,
    }

    fn fixture() -> Fixture {
        let ca_kp = test_keypair(FALCON_1024, 11);
        let ca = self_signed_ca(&ca_kp, "pqtt-ca", 0, u64::MAX / 2, 1).unwrap();
        let sender = test_keypair(FALCON_1024, 12);
        let sender_cert = issue_certificate(
            &ca_kp,
            &ca,
            &CertificateRequest {
                subject: "pub-01",
                role: Role::Publisher,
                scheme: FALCON_1024,
                public_key: sender.public_key(),
                not_before: 0,
                not_after: u64::MAX / 2,
                serial: 2,
            },
        )
        .unwrap();
        Fixture {
            ca,
            sender,
            sender_cert,
        }
    }

    #[test]
    fn signing_bytes_layout_length() {
        // magic 4 + version 1 + subject_len 1 + "pub-01" 6 + sequence 8
        // + timestamp 8 + topic_len 2 + "motion-sensor" 13 + payload_len 4
        let bytes = envelope_signing_bytes("pub-01", 1, 0, "motion-sensor", &[]).unwrap();
        assert_eq!(bytes.len(), 4 + 1 + 1 + 6 + 8 + 8 + 2 + 13 + 4);
        assert_eq!(
            bytes,
            envelope_signing_bytes("pub-01", 1, 0, "motion-sensor", &[]).unwrap()
        );
        assert_ne!(
            envelope_signing_bytes("pub-01", 1, 0, "a", &[]).unwrap(),
            envelope_signing_bytes("pub-01", 1, 0, "b", &[]).unwrap()
        );
        assert!(envelope_signing_bytes(&"s".repeat(256), 1, 0, "a", &[]).is_err());
    }

    #[test]
    fn seal_open_round_trip_and_replay() {
        let fx = fixture();
        let mut state = ReplayState::default();
        let e = seal(&fx.sender, "pub-01", 1, "motion-sensor", b"hello", NOW_MS).unwrap();
        let payload = open(&e, &fx.sender_cert, &fx.ca, &mut state, NOW_MS).unwrap();
        assert_eq!(payload, b"hello");
        assert_eq!(state.last_accepted("pub-01"), Some(1));
        assert!(matches!(
            open(&e, &fx.sender_cert, &fx.ca, &mut state, NOW_MS),
            Err(EnvelopeError::Replay { sequence: 1, last: 1 })
        ));
    }

    #[test]
    fn equal_sequence_is_replay() {
        let fx = fixture();
        let mut state = ReplayState::default();
        let five = seal(&fx.sender, "pub-01", 5, "t", b"a", NOW_MS).unwrap();
        open(&five, &fx.sender_cert, &fx.ca, &mut state, NOW_MS).unwrap();
        let again = seal(&fx.sender, "pub-01", 5, "t", b"b", NOW_MS).unwrap();
        assert!(matches!(
            open(&again, &fx.sender_cert, &fx.ca, &mut state, NOW_MS),
            Err(EnvelopeError::Replay { .. })
        ));
    }

    #[test]
    fn mutated_payload_is_bad_signature() {
        let fx = fixture();
        let mut e = seal(&fx.sender, "pub-01", 1, "t", b"payload", NOW_MS).unwrap();
        e.payload[0] ^= 0x01;
        let mut state = ReplayState::default();
        assert!(matches!(
            open(&e, &fx.sender_cert, &fx.ca, &mut state, NOW_MS),
            Err(EnvelopeError::BadSignature)
        ));
        assert_eq!(state.last_accepted("pub-01"), None);
    }

    #[test]
    fn freshness_window_boundary() {
        let fx = fixture();
        let window = DEFAULT_FRESHNESS_WINDOW_MS;
        let e = seal(&fx.sender, "pub-01", 1, "t", b"x", NOW_MS).unwrap();
        let mut state = ReplayState::default();
        assert!(matches!(
            open(&e, &fx.sender_cert, &fx.ca, &mut state, NOW_MS + window + 1),
            Err(EnvelopeError::Stale)
        ));
        assert!(open(&e, &fx.sender_cert, &fx.ca, &mut state, NOW_MS + window).is_ok());
    }

    #[test]
    fn subject_must_match_certificate() {
        let fx = fixture();
        let e = seal(&fx.sender, "pub-02", 1, "t", b"x", NOW_MS).unwrap();
        assert!(matches!(
            open(&e, &fx.sender_cert, &fx.ca, &mut ReplayState::default(), NOW_MS),
            Err(EnvelopeError::SubjectMismatch)
        ));
    }

    #[test]
    fn expired_sender_certificate() {
        let fx = fixture();
        let mut cert = fx.sender_cert.clone();
        cert.not_after = 10;
        let e = seal(&fx.sender, "pub-01", 1, "t", b"x", NOW_MS).unwrap();
        // re-signing is skipped, so the chain check reports the signature first
        assert!(matches!(
            open(&e, &cert, &fx.ca, &mut ReplayState::default(), NOW_MS),
            Err(EnvelopeError::CertInvalid(VerifyError::BadSignature))
        ));
    }

    #[test]
    fn serialization_round_trip_and_errors() {
        let fx = fixture();
        let e = seal(&fx.sender, "pub-01", 3, "motion-sensor", b"{}", NOW_MS).unwrap();
        let bytes = serialize_envelope(&e).unwrap();
        assert_eq!(deserialize_envelope(&bytes).unwrap(), e);
        assert!(deserialize_envelope(&[]).is_err());
        assert!(deserialize_envelope(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(deserialize_envelope(&bad).is_err());
    }
}
