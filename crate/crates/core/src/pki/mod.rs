//! Signature schemes, key pairs and certificates.

mod cert;
mod falcon;
mod keyfile;
mod rsa;
mod scheme;

use std::fmt;

use thiserror::Error;

pub use cert::{
    issue_certificate, self_signed_ca, verify_certificate, Certificate, CertificateRequest, Role,
    CA_VALIDITY_SECS, CERT_MAGIC, CERT_VERSION, DEVICE_VALIDITY_SECS, MAX_SUBJECT_LEN,
};
pub use falcon::Falcon1024;
pub use keyfile::{
    export_secret_key, import_secret_key, read_certificate, write_certificate, SECRET_KEY_MAGIC,
};
pub use rsa::Rsa2048;
pub use scheme::{
    registry, scheme_by_name, GeneratedKeys, KeyLength, SchemeDescriptor, SchemeId,
    SchemeRegistry, SignatureProvider, FALCON_1024, RSA_2048,
};

/// Why a certificate failed to verify.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Error)]
pub enum VerifyError {
    #[error("signature does not verify")]
    BadSignature,
    #[error("certificate expired")]
    Expired,
    #[error("certificate not yet valid")]
    NotYetValid,
    #[error("issuer does not match trust root")]
    IssuerMismatch,
    #[error("unknown signature scheme")]
    UnknownScheme,
    #[error("role not permitted here")]
    RoleViolation,
}

#[derive(Debug, Error)]
pub enum PkiError {
    #[error("unknown signature scheme {0}")]
    UnknownScheme(String),
    #[error("scheme {0} registered twice")]
    DuplicateScheme(String),
    #[error("{scheme}: provider failure: {message}")]
    Provider {
        scheme: &'static str,
        message: String,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("key pair does not match certificate")]
    KeyMismatch,
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Secret key bytes, wiped on drop and hidden from `Debug`.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey(Vec<u8>);

impl SecretKey {
    pub fn new(bytes: Vec<u8>) -> Self {
        SecretKey(bytes)
    }

    pub fn expose(&self) -> &[u8] {
        &self.0
    }
}

impl Drop for SecretKey {
    fn drop(&mut self) {
        for b in self.0.iter_mut() {
            // volatile so the wipe is not elided
            unsafe { std::ptr::write_volatile(b, 0) };
        }
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SecretKey({} bytes)", self.0.len())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyPair {
    scheme: SchemeId,
    public_key: Vec<u8>,
    secret_key: SecretKey,
}

impl KeyPair {
    /// Rebuilds a key pair from an encoded secret key.
    pub fn from_secret(scheme: SchemeId, secret_key: Vec<u8>) -> Result<Self, PkiError> {
        let provider = registry().get(scheme)?;
        let public_key = provider.public_key_from_secret(&secret_key)?;
        Ok(KeyPair {
            scheme,
            public_key,
            secret_key: SecretKey(secret_key),
        })
    }

    pub fn scheme(&self) -> SchemeId {
        self.scheme
    }

    pub fn public_key(&self) -> &[u8] {
        &self.public_key
    }

    pub fn secret_key(&self) -> &SecretKey {
        &self.secret_key
    }

    pub fn sign(&self, message: &[u8]) -> Result<Vec<u8>, PkiError> {
        registry()
            .get(self.scheme)?
            .sign(self.secret_key.expose(), message)
    }

    /// True when `cert` carries this key pair's public key.
    pub fn matches(&self, cert: &Certificate) -> bool {
        cert.scheme == self.scheme && cert.public_key == self.public_key
    }
}

/// Generates a key pair under the named scheme. Seeded generation is meant
/// for tests and reproducible fixtures.
pub fn generate_keypair(scheme_name: &str, seed: Option<[u8; 32]>) -> Result<KeyPair, PkiError> {
    let provider = registry().by_name(scheme_name)?;
    generate_with(provider.as_ref(), seed)
}

pub fn generate_keypair_by_id(scheme: SchemeId, seed: Option<[u8; 32]>) -> Result<KeyPair, PkiError> {
    generate_with(registry().get(scheme)?.as_ref(), seed)
}

fn generate_with(
    provider: &dyn SignatureProvider,
    seed: Option<[u8; 32]>,
) -> Result<KeyPair, PkiError> {
    let keys = provider.generate(seed)?;
    let d = provider.descriptor();
    if !d.public_key_len.admits(keys.public_key.len()) {
        return Err(PkiError::Provider {
            scheme: d.name,
            message: format!("public key of {} bytes", keys.public_key.len()),
        });
    }
    Ok(KeyPair {
        scheme: d.id,
        public_key: keys.public_key,
        secret_key: SecretKey(keys.secret_key),
    })
}

/// Signs `message` with `keypair`.
pub fn sign(keypair: &KeyPair, message: &[u8]) -> Result<Vec<u8>, PkiError> {
    keypair.sign(message)
}

/// Verifies a detached signature. Unknown schemes and malformed lengths
/// verify as false.
pub fn verify(scheme: SchemeId, public_key: &[u8], message: &[u8], signature: &[u8]) -> bool {
    registry()
        .get(scheme)
        .map(|p| p.verify(public_key, message, signature))
        .unwrap_or(false)
}

#[cfg(test)]
pub(crate) fn test_keypair(scheme: SchemeId, seed: u8) -> KeyPair {
    generate_keypair_by_id(scheme, Some([seed; 32])).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn falcon_public_key_matches_descriptor() {
        let kp = generate_keypair("falcon-1024", None).unwrap();
        let d = registry().get(FALCON_1024).unwrap().descriptor();
        assert_eq!(d.public_key_len, KeyLength::Exact(kp.public_key().len()));
        assert_eq!(kp.public_key().len(), fn_dsa::vrfy_key_size(fn_dsa::FN_DSA_LOGN_1024));
    }

    #[test]
    fn rsa_signs_and_verifies_its_own_message() {
        let kp = test_keypair(RSA_2048, 4);
        let sig = sign(&kp, b"self test").unwrap();
        assert!(verify(RSA_2048, kp.public_key(), b"self test", &sig));
    }

    #[test]
    fn unknown_scheme_name() {
        assert!(matches!(
            generate_keypair("sphincs", None),
            Err(PkiError::UnknownScheme(_))
        ));
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        for scheme in [FALCON_1024, RSA_2048] {
            let a = test_keypair(scheme, 9);
            let b = test_keypair(scheme, 9);
            let c = test_keypair(scheme, 10);
            assert_eq!(a, b);
            assert_ne!(a.public_key(), c.public_key());
        }
    }

    #[test]
    fn empty_message_round_trip_and_key_mismatch() {
        for scheme in [FALCON_1024, RSA_2048] {
            let kp = test_keypair(scheme, 1);
            let other = test_keypair(scheme, 2);
            let sig = sign(&kp, b"").unwrap();
            assert!(verify(scheme, kp.public_key(), b"", &sig));
            assert!(!verify(scheme, other.public_key(), b"", &sig));
        }
    }

    #[test]
    fn length_violations_fail_before_provider() {
        let kp = test_keypair(FALCON_1024, 1);
        let sig = sign(&kp, b"m").unwrap();
        assert!(!verify(FALCON_1024, &kp.public_key()[1..], b"m", &sig));
        let mut long = sig.clone();
        long.resize(5000, 0);
        assert!(!verify(FALCON_1024, kp.public_key(), b"m", &long));
        assert!(!verify(FALCON_1024, kp.public_key(), b"m", &[]));
        assert!(!verify(SchemeId(77), kp.public_key(), b"m", &sig));
    }

    #[test]
    fn keypair_round_trips_through_secret() {
        for scheme in [FALCON_1024, RSA_2048] {
            let kp = test_keypair(scheme, 3);
            let rebuilt = KeyPair::from_secret(scheme, kp.secret_key().expose().to_vec()).unwrap();
            assert_eq!(rebuilt, kp);
        }
    }

    #[test]
    fn secret_is_not_debug_printed() {
        let kp = test_keypair(FALCON_1024, 1);
        let shown = format!("{kp:?}");
        assert!(shown.contains("SecretKey(2369 bytes)"), "{shown}");
    }
}
