//! Salted password hashes and constant-time comparison.

use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::Sha256;

/// PBKDF2-HMAC-SHA256 iteration count. Stored hashes do not record it, so
/// changing it invalidates existing databases.
pub const PBKDF2_ROUNDS: u32 = 10_000;

const SALT_LEN: usize = 16;
const HASH_LEN: usize = 32;

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PasswordHash {
    #[serde(with = "hex_bytes")]
    pub hash: Vec<u8>,
    #[serde(with = "hex_bytes")]
    pub salt: Vec<u8>,
}

impl fmt::Debug for PasswordHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PasswordHash")
            .field("salt", &hex::encode(&self.salt))
            .finish_non_exhaustive()
    }
}

impl PasswordHash {
    /// Hashes `password` under a fresh random salt.
    pub fn create(password: &str) -> Self {
        let mut salt = vec![0u8; SALT_LEN];
        rand::rng().fill_bytes(&mut salt);
        Self::with_salt(password, salt)
    }

    pub fn with_salt(password: &str, salt: Vec<u8>) -> Self {
        let hash = derive(password, &salt);
        PasswordHash { hash, salt }
    }

    pub fn verify(&self, password: &str) -> bool {
        constant_time_eq(&derive(password, &self.salt), &self.hash)
    }
}

fn derive(password: &str, salt: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; HASH_LEN];
    pbkdf2::pbkdf2_hmac::<Sha256>(password.as_bytes(), salt, PBKDF2_ROUNDS, &mut out);
    out
}

/// Compares two byte strings in time independent of where they differ.
pub fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

pub(crate) mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verify_roundtrip() {
        let h = PasswordHash::create("s3cret");
        assert!(h.verify("s3cret"));
        assert!(!h.verify("s3cret "));
        assert_eq!(h.salt.len(), SALT_LEN);
        assert_eq!(h.hash.len(), HASH_LEN);
    }

    #[test]
    fn salts_differ() {
        let a = PasswordHash::create("pw");
        let b = PasswordHash::create("pw");
        assert_ne!(a.salt, b.salt);
        assert_ne!(a.hash, b.hash);
    }

    #[test]
    fn debug_hides_hash() {
        let h = PasswordHash::with_salt("pw", vec![1, 2]);
        let s = format!("{h:?}");
        assert!(!s.contains(&hex::encode(&h.hash)));
    }

    #[test]
    fn ct_eq() {
        assert!(constant_time_eq(b"abc", b"abc"));
        assert!(!constant_time_eq(b"abc", b"abd"));
        assert!(!constant_time_eq(b"abc", b"ab"));
    }
}
