//! Signature scheme registry.
//!
//! Every scheme is a [`SignatureProvider`] keyed by a one-byte identifier and
//! a canonical name. The two required schemes are registered when the global
//! registry is first touched; additional schemes can be added to a custom
//! [`SchemeRegistry`] without touching the certificate or envelope code.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, OnceLock};

use super::PkiError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SchemeId(pub u8);

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub const FALCON_1024: SchemeId = SchemeId(1);
pub const RSA_2048: SchemeId = SchemeId(2);

/// Whether a key length is fixed or an upper bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyLength {
    Exact(usize),
    AtMost(usize),
}

impl KeyLength {
    pub fn admits(self, len: usize) -> bool {
        match self {
            KeyLength::Exact(n) => len == n,
            KeyLength::AtMost(n) => len <= n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SchemeDescriptor {
    pub id: SchemeId,
    pub name: &'static str,
    pub public_key_len: KeyLength,
    pub signature_max_len: usize,
    pub provider_hint: &'static str,
}

/// Raw key material as produced by a provider.
pub struct GeneratedKeys {
    pub public_key: Vec<u8>,
    pub secret_key: Vec<u8>,
}

/// Boundary to an external signature implementation.
pub trait SignatureProvider: Send + Sync {
    fn descriptor(&self) -> &SchemeDescriptor;

    /// Generates a key pair; a seed makes generation reproducible.
    fn generate(&self, seed: Option<[u8; 32]>) -> Result<GeneratedKeys, PkiError>;

    /// Recomputes the public key from an encoded secret key.
    fn public_key_from_secret(&self, secret_key: &[u8]) -> Result<Vec<u8>, PkiError>;

    fn sign(&self, secret_key: &[u8], message: &[u8]) -> Result<Vec<u8>, PkiError>;

    /// Must return false, never panic, on malformed keys or signatures.
    fn verify_raw(&self, public_key: &[u8], message: &[u8], signature: &[u8]) -> bool;

    /// Length checks happen here, before the provider sees the input.
    fn verify(&self, public_key: &[u8], message: &[u8], signature: &[u8]) -> bool {
        let d = self.descriptor();
        if !d.public_key_len.admits(public_key.len())
            || signature.is_empty()
            || signature.len() > d.signature_max_len
        {
            return false;
        }
        self.verify_raw(public_key, message, signature)
    }
}

#[derive(Clone, Default)]
pub struct SchemeRegistry {
    by_id: HashMap<SchemeId, Arc<dyn SignatureProvider>>,
    by_name: HashMap<&'static str, SchemeId>,
}

impl fmt::Debug for SchemeRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries(self.descriptors().map(|d| d.name))
            .finish()
    }
}

impl SchemeRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Registry holding falcon-1024 and rsa-2048.
    pub fn with_defaults() -> Self {
        let mut reg = Self::empty();
        reg.register(Arc::new(super::falcon::Falcon1024))
            .expect("falcon-1024 registers");
        reg.register(Arc::new(super::rsa::Rsa2048))
            .expect("rsa-2048 registers");
        reg
    }

    pub fn register(&mut self, provider: Arc<dyn SignatureProvider>) -> Result<(), PkiError> {
        let d = provider.descriptor().clone();
        if self.by_id.contains_key(&d.id) || self.by_name.contains_key(d.name) {
            return Err(PkiError::DuplicateScheme(d.name.to_owned()));
        }
        self.by_name.insert(d.name, d.id);
        self.by_id.insert(d.id, provider);
        Ok(())
    }

    pub fn get(&self, id: SchemeId) -> Result<&Arc<dyn SignatureProvider>, PkiError> {
        self.by_id
            .get(&id)
            .ok_or_else(|| PkiError::UnknownScheme(format!("id {id}")))
    }

    pub fn by_name(&self, name: &str) -> Result<&Arc<dyn SignatureProvider>, PkiError> {
        self.by_name
            .get(name)
            .and_then(|id| self.by_id.get(id))
            .ok_or_else(|| PkiError::UnknownScheme(name.to_owned()))
    }

    pub fn descriptors(&self) -> impl Iterator<Item = &SchemeDescriptor> {
        let mut ids: Vec<_> = self.by_id.keys().copied().collect();
        ids.sort();
        ids.into_iter().map(|id| self.by_id[&id].descriptor())
    }
}

/// Process-wide registry used by certificates and envelopes.
pub fn registry() -> &'static SchemeRegistry {
    static REGISTRY: OnceLock<SchemeRegistry> = OnceLock::new();
    REGISTRY.get_or_init(SchemeRegistry::with_defaults)
}

/// Looks up a scheme id by canonical name in the global registry.
pub fn scheme_by_name(name: &str) -> Result<SchemeId, PkiError> {
    Ok(registry().by_name(name)?.descriptor().id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn required_schemes_resolve_by_name_and_id() {
        let reg = registry();
        assert_eq!(reg.by_name("falcon-1024").unwrap().descriptor().id, FALCON_1024);
        assert_eq!(reg.by_name("rsa-2048").unwrap().descriptor().id, RSA_2048);
        assert_eq!(reg.get(FALCON_1024).unwrap().descriptor().name, "falcon-1024");
        assert_eq!(reg.get(RSA_2048).unwrap().descriptor().name, "rsa-2048");
        assert!(matches!(reg.by_name("dilithium"), Err(PkiError::UnknownScheme(_))));
        assert!(matches!(reg.get(SchemeId(99)), Err(PkiError::UnknownScheme(_))));
    }

    #[test]
    fn duplicate_registration_is_refused() {
        let mut reg = SchemeRegistry::with_defaults();
        assert!(matches!(
            reg.register(Arc::new(crate::pki::falcon::Falcon1024)),
            Err(PkiError::DuplicateScheme(_))
        ));
        assert_eq!(reg.descriptors().count(), 2);
    }
}
