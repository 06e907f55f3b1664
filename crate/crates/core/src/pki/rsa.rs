//! RSA-2048 baseline backed by the `rsa` crate: PKCS#1 v1.5 signatures over
//! SHA-256, keys encoded as PKCS#1 DER.

use rand::rngs::OsRng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rsa::pkcs1::{DecodeRsaPrivateKey, DecodeRsaPublicKey, EncodeRsaPrivateKey, EncodeRsaPublicKey};
use rsa::pkcs1v15::{Signature, SigningKey, VerifyingKey};
use rsa::signature::{SignatureEncoding, Signer, Verifier};
use rsa::{RsaPrivateKey, RsaPublicKey};
use rsa::sha2::Sha256;

use super::scheme::{GeneratedKeys, KeyLength, SchemeDescriptor, SignatureProvider, RSA_2048};
use super::PkiError;

const BITS: usize = 2048;
/// DER length of a PKCS#1 public key with a 2048-bit modulus and e = 65537.
const PUBLIC_KEY_DER_LEN: usize = 270;

static DESCRIPTOR: SchemeDescriptor = SchemeDescriptor {
    id: RSA_2048,
    name: "rsa-2048",
    public_key_len: KeyLength::Exact(PUBLIC_KEY_DER_LEN),
    signature_max_len: BITS / 8,
    provider_hint: "rsa (RustCrypto), PKCS#1 v1.5 / SHA-256",
};

#[derive(Clone, Copy, Debug, Default)]
pub struct Rsa2048;

fn provider_err(message: impl ToString) -> PkiError {
    PkiError::Provider {
        scheme: DESCRIPTOR.name,
        message: message.to_string(),
    }
}

fn encode_public(key: &RsaPublicKey) -> Result<Vec<u8>, PkiError> {
    Ok(key.to_pkcs1_der().map_err(provider_err)?.as_bytes().to_vec())
}

impl SignatureProvider for Rsa2048 {
    fn descriptor(&self) -> &SchemeDescriptor {
        &DESCRIPTOR
    }

    fn generate(&self, seed: Option<[u8; 32]>) -> Result<GeneratedKeys, PkiError> {
        let key = match seed {
            Some(s) => RsaPrivateKey::new(&mut ChaCha8Rng::from_seed(s), BITS),
            None => RsaPrivateKey::new(&mut OsRng, BITS),
        }
        .map_err(provider_err)?;
        let secret_key = key.to_pkcs1_der().map_err(provider_err)?.as_bytes().to_vec();
        Ok(GeneratedKeys {
            public_key: encode_public(&key.to_public_key())?,
            secret_key,
        })
    }

    fn public_key_from_secret(&self, secret_key: &[u8]) -> Result<Vec<u8>, PkiError> {
        let key = RsaPrivateKey::from_pkcs1_der(secret_key).map_err(provider_err)?;
        encode_public(&key.to_public_key())
    }

    fn sign(&self, secret_key: &[u8], message: &[u8]) -> Result<Vec<u8>, PkiError> {
        let key = RsaPrivateKey::from_pkcs1_der(secret_key).map_err(provider_err)?;
        let signer = SigningKey::<Sha256>::new(key);
        let sig = signer.try_sign(message).map_err(provider_err)?;
        Ok(sig.to_vec())
    }

    fn verify_raw(&self, public_key: &[u8], message: &[u8], signature: &[u8]) -> bool {
        let Ok(key) = RsaPublicKey::from_pkcs1_der(public_key) else {
            return false;
        };
        let Ok(sig) = Signature::try_from(signature) else {
            return false;
        };
        VerifyingKey::<Sha256>::new(key).verify(message, &sig).is_ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_generation_is_reproducible_and_self_consistent() {
        let a = Rsa2048.generate(Some([3; 32])).unwrap();
        let b = Rsa2048.generate(Some([3; 32])).unwrap();
        assert_eq!(a.public_key, b.public_key);
        assert_eq!(a.public_key.len(), PUBLIC_KEY_DER_LEN);
        assert_eq!(Rsa2048.public_key_from_secret(&a.secret_key).unwrap(), a.public_key);
        let sig = Rsa2048.sign(&a.secret_key, b"m").unwrap();
        assert_eq!(sig.len(), 256);
        assert!(Rsa2048.verify(&a.public_key, b"m", &sig));
        assert!(!Rsa2048.verify(&a.public_key, b"n", &sig));
        assert!(!Rsa2048.verify(&a.public_key[1..], b"m", &sig));
        assert!(!Rsa2048.verify_raw(b"junk", b"m", &sig));
    }
}
