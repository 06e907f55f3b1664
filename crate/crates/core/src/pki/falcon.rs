//! Falcon-1024 backed by the `fn-dsa` crate. Messages are signed raw (no
//! pre-hash) with an empty domain context.

use fn_dsa::{
    sign_key_size, signature_size, vrfy_key_size, KeyPairGenerator, KeyPairGeneratorStandard,
    SigningKey, SigningKeyStandard, VerifyingKey, VerifyingKeyStandard, DOMAIN_NONE,
    FN_DSA_LOGN_1024, HASH_ID_RAW,
};
use rand::rngs::OsRng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::scheme::{GeneratedKeys, KeyLength, SchemeDescriptor, SignatureProvider, FALCON_1024};
use super::PkiError;

const LOGN: u32 = FN_DSA_LOGN_1024;

static DESCRIPTOR: SchemeDescriptor = SchemeDescriptor {
    id: FALCON_1024,
    name: "falcon-1024",
    public_key_len: KeyLength::Exact(1793),
    signature_max_len: 1280,
    provider_hint: "fn-dsa (FN-DSA / Falcon, logn=10)",
};

#[derive(Clone, Copy, Debug, Default)]
pub struct Falcon1024;

fn provider_err(message: impl Into<String>) -> PkiError {
    PkiError::Provider {
        scheme: DESCRIPTOR.name,
        message: message.into(),
    }
}

fn decode_signing_key(secret_key: &[u8]) -> Result<SigningKeyStandard, PkiError> {
    if secret_key.len() != sign_key_size(LOGN) {
        return Err(provider_err(format!(
            "secret key is {} bytes, expected {}",
            secret_key.len(),
            sign_key_size(LOGN)
        )));
    }
    SigningKeyStandard::decode(secret_key).ok_or_else(|| provider_err("malformed secret key"))
}

impl SignatureProvider for Falcon1024 {
    fn descriptor(&self) -> &SchemeDescriptor {
        &DESCRIPTOR
    }

    fn generate(&self, seed: Option<[u8; 32]>) -> Result<GeneratedKeys, PkiError> {
        let mut secret_key = vec![0u8; sign_key_size(LOGN)];
        let mut public_key = vec![0u8; vrfy_key_size(LOGN)];
        let mut kg = KeyPairGeneratorStandard::default();
        match seed {
            Some(s) => kg.keygen(LOGN, &mut ChaCha8Rng::from_seed(s), &mut secret_key, &mut public_key),
            None => kg.keygen(LOGN, &mut OsRng, &mut secret_key, &mut public_key),
        }
        Ok(GeneratedKeys {
            public_key,
            secret_key,
        })
    }

    fn public_key_from_secret(&self, secret_key: &[u8]) -> Result<Vec<u8>, PkiError> {
        let sk = decode_signing_key(secret_key)?;
        let mut public_key = vec![0u8; vrfy_key_size(LOGN)];
        sk.to_verifying_key(&mut public_key);
        Ok(public_key)
    }

    fn sign(&self, secret_key: &[u8], message: &[u8]) -> Result<Vec<u8>, PkiError> {
        let mut sk = decode_signing_key(secret_key)?;
        let mut sig = vec![0u8; signature_size(LOGN)];
        sk.sign(&mut OsRng, &DOMAIN_NONE, &HASH_ID_RAW, message, &mut sig);
        Ok(sig)
    }

    fn verify_raw(&self, public_key: &[u8], message: &[u8], signature: &[u8]) -> bool {
        if public_key.len() != vrfy_key_size(LOGN) || signature.len() != signature_size(LOGN) {
            return false;
        }
        match VerifyingKeyStandard::decode(public_key) {
            Some(vk) => vk.verify(signature, &DOMAIN_NONE, &HASH_ID_RAW, message),
            None => false,
        }
    }
}
