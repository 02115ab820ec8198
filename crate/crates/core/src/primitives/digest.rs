//! SHA-256 digests with lowercase-hex serialization.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

pub const DIGEST_LEN: usize = 32;

/// A 32-byte SHA-256 value.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; DIGEST_LEN]);

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Number of leading zero bits, used by the proposer puzzle.
    pub fn leading_zero_bits(&self) -> u32 {
        let mut bits = 0;
        for b in self.0 {
            if b == 0 {
                bits += 8;
            } else {
                bits += b.leading_zeros();
                break;
            }
        }
        bits
    }

    /// First eight bytes as a big-endian integer.
    pub fn prefix_u64(&self) -> u64 {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&self.0[..8]);
        u64::from_be_bytes(buf)
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("invalid 32-byte hex value: {0}")]
pub struct HexError(pub String);

pub(crate) fn parse_hex32(s: &str) -> Result<[u8; 32], HexError> {
    let bytes = hex::decode(s).map_err(|_| HexError(s.to_string()))?;
    bytes.try_into().map_err(|_| HexError(s.to_string()))
}

impl FromStr for Digest {
    type Err = HexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_hex32(s).map(Digest)
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// SHA-256 of `data`.
pub fn digest(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// SHA-256 over the plain concatenation of `parts`.
pub fn digest_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

/// Incremental canonical encoder. Variable-length fields carry a u64
/// little-endian length prefix so distinct field splits never collide.
#[derive(Default)]
pub struct CanonicalHasher {
    inner: Sha256,
}

impl CanonicalHasher {
    pub fn new(domain: &str) -> Self {
        let mut h = Self::default();
        h.bytes(domain.as_bytes());
        h
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.inner.update(v.to_le_bytes());
        self
    }

    pub fn fixed(&mut self, v: &[u8]) -> &mut Self {
        self.inner.update(v);
        self
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.u64(v.len() as u64);
        self.inner.update(v);
        self
    }

    pub fn digests(&mut self, ds: &[Digest]) -> &mut Self {
        self.u64(ds.len() as u64);
        for d in ds {
            self.inner.update(d.0);
        }
        self
    }

    pub fn finish(self) -> Digest {
        Digest(self.inner.finalize().into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_deterministic() {
        assert_eq!(digest(b"gdp"), digest(b"gdp"));
        assert_ne!(digest(b"gdp"), digest(b"gdq"));
    }

    #[test]
    fn parts_equal_concatenation() {
        assert_eq!(digest_parts(&[b"ab", b"cd"]), digest(b"abcd"));
    }

    #[test]
    fn canonical_prefix_separates_splits() {
        let mut a = CanonicalHasher::new("t");
        a.bytes(b"ab").bytes(b"c");
        let mut b = CanonicalHasher::new("t");
        b.bytes(b"a").bytes(b"bc");
        assert_ne!(a.finish(), b.finish());
    }

    #[test]
    fn hex_round_trip_and_rejects_bad_input() {
        let d = digest(b"x");
        let s = d.to_hex();
        assert_eq!(s, s.to_lowercase());
        assert_eq!(s.parse::<Digest>().unwrap(), d);
        assert!("zz".parse::<Digest>().is_err());
        assert!("00".parse::<Digest>().is_err());
    }

    #[test]
    fn leading_zero_bits_counts_across_bytes() {
        let mut b = [0xffu8; 32];
        b[0] = 0;
        b[1] = 0x1f;
        assert_eq!(Digest(b).leading_zero_bits(), 11);
        assert_eq!(Digest::ZERO.leading_zero_bits(), 256);
    }
}
