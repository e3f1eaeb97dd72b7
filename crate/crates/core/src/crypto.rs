//! Key material, addresses and signatures.
//!
//! Ed25519 is deterministic, so fixed seeds give reproducible signatures
//! and therefore reproducible transaction bytes across runs.

use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::types::{Address, PublicKey};

pub const SIGNATURE_SCHEME: &str = "ed25519";
pub const HASH_SCHEME: &str = "sha256";

const ADDRESS_DOMAIN: &[u8] = b"gridtrade/address/v1";

pub fn sha256(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

/// Address of a verification key.
pub fn fingerprint(key: &PublicKey) -> Address {
    Address(sha256(&[ADDRESS_DOMAIN, &key.0]))
}

#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
}

impl KeyPair {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        KeyPair { signing: SigningKey::from_bytes(&seed) }
    }

    pub fn generate<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self::from_seed(seed)
    }

    pub fn seed(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    pub fn public(&self) -> PublicKey {
        PublicKey(self.signing.verifying_key().to_bytes())
    }

    pub fn address(&self) -> Address {
        fingerprint(&self.public())
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        Signature {
            key: self.public(),
            bytes: self.signing.sign(message).to_bytes().to_vec(),
        }
    }
}

impl std::fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "KeyPair({})", self.address().short())
    }
}

// Seeds are serialized only into simulator-private artifacts.
impl Serialize for KeyPair {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        hex_bytes::serialize(&self.seed(), s)
    }
}

impl<'de> Deserialize<'de> for KeyPair {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = hex_bytes::deserialize(d)?;
        let seed = <[u8; 32]>::try_from(v.as_slice())
            .map_err(|_| serde::de::Error::custom("key seed must be 32 bytes"))?;
        Ok(KeyPair::from_seed(seed))
    }
}

/// Fresh keypair plus its address.
pub fn new_address<R: RngCore + ?Sized>(rng: &mut R) -> (KeyPair, Address) {
    let kp = KeyPair::generate(rng);
    let addr = kp.address();
    (kp, addr)
}

/// A signature together with the verification key that produced it, so a
/// verifier holding only an address can check it.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Signature {
    pub key: PublicKey,
    #[serde(with = "hex_bytes")]
    pub bytes: Vec<u8>,
}

impl Signature {
    /// Placeholder used for signature fields while computing signing payloads.
    pub fn zeroed() -> Self {
        Signature { key: PublicKey([0; 32]), bytes: vec![0; 64] }
    }

    /// True iff this is a valid signature over `message` by `key`.
    pub fn verify_key(&self, key: &PublicKey, message: &[u8]) -> bool {
        if &self.key != key {
            return false;
        }
        let Ok(sig_bytes) = <[u8; 64]>::try_from(self.bytes.as_slice()) else {
            return false;
        };
        let Ok(vk) = VerifyingKey::from_bytes(&key.0) else {
            return false;
        };
        let sig = ed25519_dalek::Signature::from_bytes(&sig_bytes);
        vk.verify_strict(message, &sig).is_ok()
    }

    /// True iff the embedded key hashes to `address` and signed `message`.
    pub fn verify_address(&self, address: &Address, message: &[u8]) -> bool {
        fingerprint(&self.key) == *address && self.verify_key(&self.key, message)
    }
}

impl std::fmt::Debug for Signature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Signature({}, {}b)", self.key.short(), self.bytes.len())
    }
}

pub fn verify(address: &Address, message: &[u8], sig: &Signature) -> bool {
    sig.verify_address(address, message)
}

pub(crate) mod hex_bytes {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        if s.is_human_readable() {
            s.serialize_str(&hex::encode(v))
        } else {
            v.serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        if d.is_human_readable() {
            let s = String::deserialize(d)?;
            hex::decode(s).map_err(D::Error::custom)
        } else {
            Vec::<u8>::deserialize(d)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::collections::HashSet;

    #[test]
    fn same_seed_same_address() {
        let a = new_address(&mut ChaCha20Rng::seed_from_u64(7)).1;
        let b = new_address(&mut ChaCha20Rng::seed_from_u64(7)).1;
        assert_eq!(a, b);
    }

    #[test]
    fn ten_thousand_addresses_do_not_collide() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut seen = HashSet::new();
        for _ in 0..10_000 {
            assert!(seen.insert(new_address(&mut rng).1));
        }
    }

    #[test]
    fn sign_verify_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let (k, addr) = new_address(&mut rng);
        let (_, other) = new_address(&mut rng);
        let sig = k.sign(b"abc");
        assert!(verify(&addr, b"abc", &sig));
        assert!(!verify(&addr, b"abd", &sig));
        assert!(!verify(&other, b"abc", &sig));
    }

    #[test]
    fn malformed_signature_is_false_not_panic() {
        let k = KeyPair::from_seed([3; 32]);
        let mut sig = k.sign(b"m");
        sig.bytes.truncate(10);
        assert!(!verify(&k.address(), b"m", &sig));
        sig.bytes = vec![0xff; 64];
        assert!(!verify(&k.address(), b"m", &sig));
        let mut sig = k.sign(b"m");
        sig.key = PublicKey([0xff; 32]);
        assert!(!sig.verify_key(&sig.key.clone(), b"m"));
    }

    #[test]
    fn signature_text_round_trip() {
        let sig = KeyPair::from_seed([4; 32]).sign(b"x");
        let json = serde_json::to_string(&sig).unwrap();
        let back: Signature = serde_json::from_str(&json).unwrap();
        assert_eq!(back, sig);
    }
}
