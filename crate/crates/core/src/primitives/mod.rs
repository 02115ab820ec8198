//! Deterministic cryptographic and randomness substrate.

mod digest;
mod keys;
mod rng;
mod sampling;

pub use digest::{digest, digest_parts, CanonicalHasher, Digest, HexError, DIGEST_LEN};
pub use keys::{sign, verify, KeyPair, PublicKey, SecretKey, Signature};
pub use rng::SeededRng;
pub use sampling::{sample_without_replacement, weighted_order, SamplingError};
