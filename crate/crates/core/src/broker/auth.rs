//! Certificate credentials carried in the CONNECT password slot.
//!
//! Layout: `"PQCC" | version u8 | timestamp_ms u64 | cert_len u32 | certificate
//! | sig_len u16 | proof_signature`. The proof is the client's signature over
//! `client_id || timestamp_ms` (u64 big-endian).

use thiserror::Error;

use crate::codec::Connect;
use crate::pki::{self, verify_certificate, Certificate, KeyPair, PkiError, Role, VerifyError};
use crate::wire::{Cursor, WireError};

pub const CREDENTIAL_MAGIC: &[u8; 4] = b"PQCC";
const CREDENTIAL_VERSION: u8 = 1;
pub const DEFAULT_CREDENTIAL_WINDOW_MS: u64 = 60_000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConnectCredential {
    pub certificate: Certificate,
    pub timestamp_ms: u64,
    pub proof_signature: Vec<u8>,
}

pub fn proof_message(client_id: &str, timestamp_ms: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(client_id.len() + 8);
    out.extend_from_slice(client_id.as_bytes());
    out.extend_from_slice(&timestamp_ms.to_be_bytes());
    out
}

impl ConnectCredential {
    pub fn create(
        keypair: &KeyPair,
        certificate: &Certificate,
        client_id: &str,
        timestamp_ms: u64,
    ) -> Result<Self, PkiError> {
        if !keypair.matches(certificate) {
            return Err(PkiError::KeyMismatch);
        }
        Ok(ConnectCredential {
            certificate: certificate.clone(),
            timestamp_ms,
            proof_signature: keypair.sign(&proof_message(client_id, timestamp_ms))?,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, PkiError> {
        let cert = self.certificate.to_bytes()?;
        let mut out = Vec::with_capacity(cert.len() + self.proof_signature.len() + 19);
        out.extend_from_slice(CREDENTIAL_MAGIC);
        out.push(CREDENTIAL_VERSION);
        out.extend_from_slice(&self.timestamp_ms.to_be_bytes());
        out.extend_from_slice(&(cert.len() as u32).to_be_bytes());
        out.extend_from_slice(&cert);
        let sig_len = u16::try_from(self.proof_signature.len())
            .map_err(|_| PkiError::Format("proof signature too long".into()))?;
        out.extend_from_slice(&sig_len.to_be_bytes());
        out.extend_from_slice(&self.proof_signature);
        if out.len() > u16::MAX as usize {
            return Err(PkiError::Format(format!(
                "credential is {} bytes, password slot holds 65535",
                out.len()
            )));
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, PkiError> {
        let parse = || -> Result<_, WireError> {
            let mut c = Cursor::new(buf);
            c.magic(CREDENTIAL_MAGIC)?;
            let version = c.u8()?;
            if version != CREDENTIAL_VERSION {
                return Err(WireError::Version(version));
            }
            let timestamp_ms = c.u64()?;
            let cert = c.bytes_u32()?;
            let proof = c.bytes_u16()?.to_vec();
            c.finish()?;
            Ok((timestamp_ms, cert, proof))
        };
        let (timestamp_ms, cert, proof_signature) =
            parse().map_err(|e| PkiError::Format(format!("credential: {e}")))?;
        Ok(ConnectCredential {
            certificate: Certificate::from_bytes(cert)?,
            timestamp_ms,
            proof_signature,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum AuthError {
    #[error("no credential in CONNECT")]
    Missing,
    #[error("credential malformed: {0}")]
    Malformed(String),
    #[error("certificate rejected: {0}")]
    Certificate(VerifyError),
    #[error("role {0} may not connect as a client")]
    Role(Role),
    #[error("proof signature does not verify")]
    BadProof,
    #[error("credential timestamp outside freshness window")]
    Stale,
}

/// Accepts a CONNECT iff the credential parses, its certificate chains to
/// `trust_root`, the role is publisher or subscriber, the proof verifies and
/// the proof timestamp is within `window_ms` of `now_ms`.
pub fn authenticate(
    connect: &Connect,
    trust_root: &Certificate,
    now_ms: u64,
    window_ms: u64,
) -> Result<Certificate, AuthError> {
    let blob = connect.credential.as_deref().ok_or(AuthError::Missing)?;
    let cred = ConnectCredential::from_bytes(blob).map_err(|e| AuthError::Malformed(e.to_string()))?;
    let cert = cred.certificate;
    verify_certificate(&cert, trust_root, now_ms / 1000).map_err(AuthError::Certificate)?;
    if !matches!(cert.role, Role::Publisher | Role::Subscriber) {
        return Err(AuthError::Role(cert.role));
    }
    let message = proof_message(&connect.client_id, cred.timestamp_ms);
    if !pki::verify(cert.scheme, &cert.public_key, &message, &cred.proof_signature) {
        return Err(AuthError::BadProof);
    }
    if now_ms.abs_diff(cred.timestamp_ms) > window_ms {
        return Err(AuthError::Stale);
    }
    Ok(cert)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pki::{
        issue_certificate, self_signed_ca, test_keypair, CertificateRequest, FALCON_1024,
    };

    const NOW: u64 = 1_700_000_000_000;

    fn setup(role: Role) -> (Certificate, KeyPair, Certificate) {
        let ca_kp = test_keypair(FALCON_1024, 21);
        let ca = self_signed_ca(&ca_kp, "pqtt-ca", 0, u64::MAX / 2, 1).unwrap();
        let kp = test_keypair(FALCON_1024, 22);
        let cert = issue_certificate(
            &ca_kp,
            &ca,
            &CertificateRequest {
                subject: "pub-01",
                role,
                scheme: FALCON_1024,
                public_key: kp.public_key(),
                not_before: 0,
                not_after: NOW / 1000 + 10,
                serial: 5,
            },
        )
        .unwrap();
        (ca, kp, cert)
    }

    fn connect(cred: &ConnectCredential, client_id: &str) -> Connect {
        Connect {
            client_id: client_id.into(),
            keep_alive: 30,
            clean_session: true,
            credential: Some(cred.to_bytes().unwrap()),
        }
    }

    #[test]
    fn valid_credential_is_accepted() {
        let (ca, kp, cert) = setup(Role::Publisher);
        let cred = ConnectCredential::create(&kp, &cert, "pub-01", NOW).unwrap();
        assert_eq!(ConnectCredential::from_bytes(&cred.to_bytes().unwrap()).unwrap(), cred);
        let got = authenticate(&connect(&cred, "pub-01"), &ca, NOW, DEFAULT_CREDENTIAL_WINDOW_MS);
        assert_eq!(got.unwrap().subject, "pub-01");
    }

    #[test]
    fn stale_timestamp_boundary() {
        let (ca, kp, cert) = setup(Role::Publisher);
        let window = DEFAULT_CREDENTIAL_WINDOW_MS;
        let cred = ConnectCredential::create(&kp, &cert, "pub-01", NOW - window).unwrap();
        assert!(authenticate(&connect(&cred, "pub-01"), &ca, NOW, window).is_ok());
        let cred = ConnectCredential::create(&kp, &cert, "pub-01", NOW - window - 1).unwrap();
        assert_eq!(
            authenticate(&connect(&cred, "pub-01"), &ca, NOW, window),
            Err(AuthError::Stale)
        );
    }

    #[test]
    fn proof_is_bound_to_client_id() {
        let (ca, kp, cert) = setup(Role::Publisher);
        let cred = ConnectCredential::create(&kp, &cert, "pub-01", NOW).unwrap();
        assert_eq!(
            authenticate(&connect(&cred, "intruder"), &ca, NOW, DEFAULT_CREDENTIAL_WINDOW_MS),
            Err(AuthError::BadProof)
        );
    }

    #[test]
    fn rejects_missing_expired_and_wrong_role() {
        let (ca, kp, cert) = setup(Role::Publisher);
        let mut bare = connect(&ConnectCredential::create(&kp, &cert, "p", NOW).unwrap(), "p");
        bare.credential = None;
        assert_eq!(authenticate(&bare, &ca, NOW, 1000), Err(AuthError::Missing));

        bare.credential = Some(vec![1, 2, 3]);
        assert!(matches!(authenticate(&bare, &ca, NOW, 1000), Err(AuthError::Malformed(_))));

        let cred = ConnectCredential::create(&kp, &cert, "pub-01", NOW + 20_000).unwrap();
        assert_eq!(
            authenticate(&connect(&cred, "pub-01"), &ca, NOW + 20_000, 1000),
            Err(AuthError::Certificate(VerifyError::Expired))
        );

        let (ca, kp, cert) = setup(Role::Broker);
        let cred = ConnectCredential::create(&kp, &cert, "b", NOW).unwrap();
        assert_eq!(
            authenticate(&connect(&cred, "b"), &ca, NOW, 1000),
            Err(AuthError::Role(Role::Broker))
        );
    }
}
