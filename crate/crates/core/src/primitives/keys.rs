//! Device identity keys and Ed25519 signatures.
//!
//! Ed25519 is deterministic and uses 32-byte keys, so every signature in
//! a simulation is a pure function of (secret, message).

use std::fmt;
use std::str::FromStr;

use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::digest::{parse_hex32, HexError};
use super::rng::SeededRng;

/// A device's 32-byte public identity key.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct PublicKey(pub [u8; 32]);

impl PublicKey {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Display for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", self.short())
    }
}

impl FromStr for PublicKey {
    type Err = HexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_hex32(s).map(PublicKey)
    }
}

impl Serialize for PublicKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for PublicKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// 32-byte signing seed. Never printed.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey(pub [u8; 32]);

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

#[derive(Clone)]
pub struct KeyPair {
    pub public_key: PublicKey,
    pub secret_key: SecretKey,
    signing: SigningKey,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("public_key", &self.public_key).finish()
    }
}

impl KeyPair {
    pub fn from_secret(secret: SecretKey) -> Self {
        let signing = SigningKey::from_bytes(&secret.0);
        let public_key = PublicKey(signing.verifying_key().to_bytes());
        Self {
            public_key,
            secret_key: secret,
            signing,
        }
    }

    pub fn generate(rng: &mut SeededRng) -> Self {
        let mut seed = [0u8; 32];
        rng.fill(&mut seed);
        Self::from_secret(SecretKey(seed))
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        Signature {
            bytes: self.signing.sign(message).to_bytes(),
            signer: self.public_key,
        }
    }
}

/// A 64-byte Ed25519 signature tagged with its claimed signer.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature {
    pub bytes: [u8; 64],
    pub signer: PublicKey,
}

impl Signature {
    pub fn to_hex(&self) -> String {
        hex::encode(self.bytes)
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}.. by {})", &self.to_hex()[..12], self.signer.short())
    }
}

#[derive(Serialize, Deserialize)]
struct SignatureRepr {
    bytes: String,
    signer: PublicKey,
}

impl Serialize for Signature {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        SignatureRepr {
            bytes: self.to_hex(),
            signer: self.signer,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Signature {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = SignatureRepr::deserialize(d)?;
        let raw = hex::decode(&repr.bytes).map_err(serde::de::Error::custom)?;
        let bytes: [u8; 64] = raw
            .try_into()
            .map_err(|_| serde::de::Error::custom("signature must be 64 bytes"))?;
        Ok(Signature {
            bytes,
            signer: repr.signer,
        })
    }
}

pub fn sign(secret: &SecretKey, message: &[u8]) -> Signature {
    KeyPair::from_secret(secret.clone()).sign(message)
}

pub fn verify(public: &PublicKey, message: &[u8], sig: &Signature) -> bool {
    if sig.signer != *public {
        return false;
    }
    let Ok(key) = VerifyingKey::from_bytes(&public.0) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&sig.bytes);
    key.verify(message, &sig).is_ok()
}
