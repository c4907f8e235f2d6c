// SPDX-License-Identifier: Apache-2.0

//! SHA-256 and HMAC-SHA256 helpers.

use hmac::{Hmac, Mac};
use sha2::{Digest as _, Sha256};

pub type Digest = [u8; 32];

/// Pre-shared 256-bit MAC key.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Key(pub [u8; 32]);

impl std::fmt::Debug for Key {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Key(..)")
    }
}

impl Key {
    /// Deterministic key for simulations, derived from a seed.
    pub fn from_seed(seed: u64) -> Key {
        Key(sha256(&seed.to_be_bytes()))
    }
}

pub fn sha256(data: &[u8]) -> Digest {
    Sha256::digest(data).into()
}

fn mac_over(key: &Key, parts: &[&[u8]]) -> Hmac<Sha256> {
    let mut mac = Hmac::<Sha256>::new_from_slice(&key.0).expect("any key length is valid");
    for p in parts {
        mac.update(p);
    }
    mac
}

/// HMAC-SHA256 over the concatenation of `parts`.
pub fn hmac_sha256(key: &Key, parts: &[&[u8]]) -> Digest {
    mac_over(key, parts).finalize().into_bytes().into()
}

/// Constant-time tag check.
pub fn hmac_verify(key: &Key, parts: &[&[u8]], tag: &[u8]) -> bool {
    mac_over(key, parts).verify_slice(tag).is_ok()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
