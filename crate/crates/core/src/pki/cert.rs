//! Compact certificate format.
//!
//! Layout, all integers big-endian:
//!
//! ```text
//! "PQCT" | version u8 | serial u64 | subject_len u8 | subject | role u8 | scheme_id u8
//!        | not_before u64 | not_after u64 | issuer_len u8 | issuer_subject
//!        | pubkey_len u32 | public_key | sig_len u16 | signature
//! ```
//!
//! The to-be-signed bytes run from the magic through the public key.

use std::fmt;
use std::str::FromStr;

use super::scheme::{registry, SchemeId};
use super::{KeyPair, PkiError, VerifyError};
use crate::wire::{Cursor, WireError};

pub const CERT_MAGIC: &[u8; 4] = b"PQCT";
pub const CERT_VERSION: u8 = 1;
pub const MAX_SUBJECT_LEN: usize = 64;

/// Default validity of device certificates.
pub const DEVICE_VALIDITY_SECS: u64 = 365 * 86_400;
/// Default validity of CA certificates.
pub const CA_VALIDITY_SECS: u64 = 3650 * 86_400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Role {
    Ca = 0,
    Broker = 1,
    Publisher = 2,
    Subscriber = 3,
}

impl Role {
    pub fn from_u8(v: u8) -> Option<Role> {
        match v {
            0 => Some(Role::Ca),
            1 => Some(Role::Broker),
            2 => Some(Role::Publisher),
            3 => Some(Role::Subscriber),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Ca => "ca",
            Role::Broker => "broker",
            Role::Publisher => "publisher",
            Role::Subscriber => "subscriber",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = PkiError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ca" => Ok(Role::Ca),
            "broker" => Ok(Role::Broker),
            "publisher" => Ok(Role::Publisher),
            "subscriber" => Ok(Role::Subscriber),
            other => Err(PkiError::Format(format!("unknown role {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Certificate {
    pub version: u8,
    pub serial: u64,
    pub subject: String,
    pub role: Role,
    pub scheme: SchemeId,
    pub public_key: Vec<u8>,
    pub not_before: u64,
    pub not_after: u64,
    pub issuer_subject: String,
    pub signature: Vec<u8>,
}

fn short_str(field: &str, s: &str, out: &mut Vec<u8>) -> Result<(), PkiError> {
    if s.len() > MAX_SUBJECT_LEN {
        return Err(PkiError::Format(format!(
            "{field} is {} bytes, limit {MAX_SUBJECT_LEN}",
            s.len()
        )));
    }
    out.push(s.len() as u8);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

impl Certificate {
    /// Canonical to-be-signed serialization. The signature field is ignored.
    pub fn tbs_bytes(&self) -> Result<Vec<u8>, PkiError> {
        let mut out = Vec::with_capacity(64 + self.public_key.len());
        out.extend_from_slice(CERT_MAGIC);
        out.push(self.version);
        out.extend_from_slice(&self.serial.to_be_bytes());
        short_str("subject", &self.subject, &mut out)?;
        out.push(self.role as u8);
        out.push(self.scheme.0);
        out.extend_from_slice(&self.not_before.to_be_bytes());
        out.extend_from_slice(&self.not_after.to_be_bytes());
        short_str("issuer_subject", &self.issuer_subject, &mut out)?;
        let pk_len = u32::try_from(self.public_key.len())
            .map_err(|_| PkiError::Format("public key too long".into()))?;
        out.extend_from_slice(&pk_len.to_be_bytes());
        out.extend_from_slice(&self.public_key);
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, PkiError> {
        let mut out = self.tbs_bytes()?;
        let sig_len = u16::try_from(self.signature.len())
            .map_err(|_| PkiError::Format("signature too long".into()))?;
        out.extend_from_slice(&sig_len.to_be_bytes());
        out.extend_from_slice(&self.signature);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Certificate, PkiError> {
        Self::parse(buf).map_err(|e| PkiError::Format(format!("certificate: {e}")))
    }

    fn parse(buf: &[u8]) -> Result<Certificate, WireError> {
        let mut c = Cursor::new(buf);
        c.magic(CERT_MAGIC)?;
        let version = c.u8()?;
        if version != CERT_VERSION {
            return Err(WireError::Version(version));
        }
        let serial = c.u64()?;
        let subject = c.str_u8()?;
        let role_raw = c.u8()?;
        let role = Role::from_u8(role_raw).ok_or(WireError::Invalid("role"))?;
        let scheme = SchemeId(c.u8()?);
        let not_before = c.u64()?;
        let not_after = c.u64()?;
        let issuer_subject = c.str_u8()?;
        let public_key = c.bytes_u32()?.to_vec();
        let signature = c.bytes_u16()?.to_vec();
        c.finish()?;
        Ok(Certificate {
            version,
            serial,
            subject: subject.to_owned(),
            role,
            scheme,
            public_key,
            not_before,
            not_after,
            issuer_subject: issuer_subject.to_owned(),
            signature,
        })
    }

    pub fn is_self_signed(&self) -> bool {
        self.issuer_subject == self.subject
    }
}

/// Parameters for a certificate about to be signed.
#[derive(Clone, Debug)]
pub struct CertificateRequest<'a> {
    pub subject: &'a str,
    pub role: Role,
    pub scheme: SchemeId,
    pub public_key: &'a [u8],
    pub not_before: u64,
    pub not_after: u64,
    pub serial: u64,
}

fn sign_tbs(mut cert: Certificate, signer: &KeyPair) -> Result<Certificate, PkiError> {
    if cert.not_before >= cert.not_after {
        return Err(PkiError::Format(format!(
            "validity window inverted: not_before {} >= not_after {}",
            cert.not_before, cert.not_after
        )));
    }
    let tbs = cert.tbs_bytes()?;
    cert.signature = signer.sign(&tbs)?;
    Ok(cert)
}

/// Builds the self-signed root certificate for `keypair`.
pub fn self_signed_ca(
    keypair: &KeyPair,
    subject: &str,
    not_before: u64,
    not_after: u64,
    serial: u64,
) -> Result<Certificate, PkiError> {
    let cert = Certificate {
        version: CERT_VERSION,
        serial,
        subject: subject.to_owned(),
        role: Role::Ca,
        scheme: keypair.scheme(),
        public_key: keypair.public_key().to_vec(),
        not_before,
        not_after,
        issuer_subject: subject.to_owned(),
        signature: Vec::new(),
    };
    sign_tbs(cert, keypair)
}

/// Signs a device certificate under a CA.
pub fn issue_certificate(
    ca_keypair: &KeyPair,
    ca_cert: &Certificate,
    request: &CertificateRequest<'_>,
) -> Result<Certificate, PkiError> {
    if ca_cert.role != Role::Ca {
        return Err(PkiError::Verify(VerifyError::RoleViolation));
    }
    if ca_keypair.scheme() != ca_cert.scheme || ca_keypair.public_key() != ca_cert.public_key {
        return Err(PkiError::KeyMismatch);
    }
    registry().get(request.scheme)?;
    let cert = Certificate {
        version: CERT_VERSION,
        serial: request.serial,
        subject: request.subject.to_owned(),
        role: request.role,
        scheme: request.scheme,
        public_key: request.public_key.to_vec(),
        not_before: request.not_before,
        not_after: request.not_after,
        issuer_subject: ca_cert.subject.clone(),
        signature: Vec::new(),
    };
    sign_tbs(cert, ca_keypair)
}

/// Checks `cert` against the trust root at time `now` (epoch seconds).
///
/// Failures are reported in a fixed precedence: role of the root, unknown
/// scheme, issuer mismatch, bad signature, not yet valid, expired.
pub fn verify_certificate(
    cert: &Certificate,
    trust_root: &Certificate,
    now: u64,
) -> Result<(), VerifyError> {
    if trust_root.role != Role::Ca {
        return Err(VerifyError::RoleViolation);
    }
    let reg = registry();
    let root_scheme = reg
        .get(trust_root.scheme)
        .map_err(|_| VerifyError::UnknownScheme)?;
    reg.get(cert.scheme).map_err(|_| VerifyError::UnknownScheme)?;
    if cert.issuer_subject != trust_root.subject {
        return Err(VerifyError::IssuerMismatch);
    }
    let tbs = cert.tbs_bytes().map_err(|_| VerifyError::BadSignature)?;
    if !root_scheme.verify(&trust_root.public_key, &tbs, &cert.signature) {
        return Err(VerifyError::BadSignature);
    }
    if now < cert.not_before {
        return Err(VerifyError::NotYetValid);
    }
    if now > cert.not_after {
        return Err(VerifyError::Expired);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pki::{test_keypair, FALCON_1024, RSA_2048};

    fn sample(serial: u64) -> Certificate {
        Certificate {
            version: CERT_VERSION,
            serial,
            subject: "pub-01".into(),
            role: Role::Publisher,
            scheme: FALCON_1024,
            public_key: vec![7; 10],
            not_before: 100,
            not_after: 200,
            issuer_subject: "pqtt-ca".into(),
            signature: vec![],
        }
    }

    #[test]
    fn tbs_is_deterministic_and_ignores_signature() {
        let a = sample(1);
        let mut b = sample(1);
        b.signature = vec![1, 2, 3];
        assert_eq!(a.tbs_bytes().unwrap(), b.tbs_bytes().unwrap());
        let mut c = sample(1);
        c.subject = "pub-02".into();
        assert_ne!(a.tbs_bytes().unwrap(), c.tbs_bytes().unwrap());
    }

    #[test]
    fn minimal_tbs_length_is_sum_of_fixed_fields() {
        // magic 4 + version 1 + serial 8 + subject_len 1 + role 1 + scheme 1
        // + not_before 8 + not_after 8 + issuer_len 1 + pubkey_len 4
        let expected = 4 + 1 + 8 + 1 + 1 + 1 + 8 + 8 + 1 + 4;
        let cert = Certificate {
            subject: String::new(),
            issuer_subject: String::new(),
            public_key: vec![],
            ..sample(0)
        };
        assert_eq!(cert.tbs_bytes().unwrap().len(), expected);
        assert_eq!(cert.to_bytes().unwrap().len(), expected + 2);
    }

    #[test]
    fn over_long_subject_is_a_format_error() {
        let mut cert = sample(0);
        cert.subject = "s".repeat(65);
        assert!(matches!(cert.tbs_bytes(), Err(PkiError::Format(_))));
    }

    #[test]
    fn parse_rejects_bad_input() {
        let mut cert = sample(3);
        cert.signature = vec![9; 5];
        let bytes = cert.to_bytes().unwrap();
        assert_eq!(Certificate::from_bytes(&bytes).unwrap(), cert);
        assert!(Certificate::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(Certificate::from_bytes(&bad_magic).is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(Certificate::from_bytes(&trailing).is_err());
        assert!(Certificate::from_bytes(&[]).is_err());
    }

    #[test]
    fn issue_and_verify_boundaries() {
        let ca_kp = test_keypair(FALCON_1024, 1);
        let ca = self_signed_ca(&ca_kp, "pqtt-ca", 0, CA_VALIDITY_SECS, 1).unwrap();
        assert_eq!(verify_certificate(&ca, &ca, 10), Ok(()));

        let dev_kp = test_keypair(RSA_2048, 2);
        let req = CertificateRequest {
            subject: "pub-01",
            role: Role::Publisher,
            scheme: RSA_2048,
            public_key: dev_kp.public_key(),
            not_before: 1_000,
            not_after: 2_000,
            serial: 2,
        };
        let cert = issue_certificate(&ca_kp, &ca, &req).unwrap();
        assert_eq!(verify_certificate(&cert, &ca, 1_000), Ok(()));
        assert_eq!(verify_certificate(&cert, &ca, 2_000), Ok(()));
        assert_eq!(verify_certificate(&cert, &ca, 999), Err(VerifyError::NotYetValid));
        assert_eq!(verify_certificate(&cert, &ca, 2_001), Err(VerifyError::Expired));

        let mut tampered = cert.clone();
        tampered.public_key[5] ^= 0x01;
        assert_eq!(verify_certificate(&tampered, &ca, 1_500), Err(VerifyError::BadSignature));

        let inverted = CertificateRequest {
            not_before: 2_000,
            not_after: 1_000,
            ..req.clone()
        };
        assert!(matches!(
            issue_certificate(&ca_kp, &ca, &inverted),
            Err(PkiError::Format(_))
        ));

        // a device certificate cannot act as issuer or trust root
        assert!(matches!(
            issue_certificate(&dev_kp, &cert, &req),
            Err(PkiError::Verify(VerifyError::RoleViolation))
        ));
        assert_eq!(verify_certificate(&cert, &cert, 1_500), Err(VerifyError::RoleViolation));
    }

    #[test]
    fn unknown_scheme_takes_precedence() {
        let ca_kp = test_keypair(FALCON_1024, 1);
        let ca = self_signed_ca(&ca_kp, "pqtt-ca", 0, 10, 1).unwrap();
        let mut cert = ca.clone();
        cert.scheme = SchemeId(200);
        cert.issuer_subject = "other".into();
        assert_eq!(verify_certificate(&cert, &ca, 5), Err(VerifyError::UnknownScheme));
        cert.scheme = FALCON_1024;
        assert_eq!(verify_certificate(&cert, &ca, 5), Err(VerifyError::IssuerMismatch));
    }
}
