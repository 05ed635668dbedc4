//! Fixed-length binary payloads.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_contract, Error, Result};

/// A fixed-length string of bits.
///
/// Watermark messages, identity payloads and RSC codewords all use this type.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BitMessage {
    bits: Vec<u8>,
}

impl BitMessage {
    /// Accepts only 0/1 entries.
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        ensure_contract(bits.iter().all(|&b| b <= 1), || {
            "bit messages may only contain 0 and 1".into()
        })?;
        Ok(Self { bits })
    }

    pub fn from_bools(bits: impl IntoIterator<Item = bool>) -> Self {
        Self {
            bits: bits.into_iter().map(u8::from).collect(),
        }
    }

    pub fn zeros(len: usize) -> Self {
        Self { bits: vec![0; len] }
    }

    pub fn random<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        Self {
            bits: (0..len).map(|_| rng.random_range(0..=1u8)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn bit(&self, i: usize) -> bool {
        self.bits[i] == 1
    }

    pub fn flip(&mut self, i: usize) {
        self.bits[i] ^= 1;
    }

    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| b ^ 1).collect(),
        }
    }

    pub fn xor(&self, other: &Self) -> Result<Self> {
        self.check_len(other)?;
        Ok(Self {
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| a ^ b).collect(),
        })
    }

    pub fn hamming(&self, other: &Self) -> Result<usize> {
        self.check_len(other)?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(a, b)| a != b).count())
    }

    fn check_len(&self, other: &Self) -> Result<()> {
        ensure_contract(self.len() == other.len(), || {
            format!("bit lengths differ: {} vs {}", self.len(), other.len())
        })
    }

    /// Integer value of up to 64 bits, most significant first.
    pub fn from_u64(value: u64, len: usize) -> Self {
        Self {
            bits: (0..len).rev().map(|i| ((value >> i) & 1) as u8).collect(),
        }
    }

    /// Bits packed most-significant-first, zero-padded to a whole byte.
    pub fn to_hex(&self) -> String {
        let mut out = String::with_capacity(self.len().div_ceil(8) * 2);
        for chunk in self.bits.chunks(8) {
            let mut byte = 0u8;
            for (i, &b) in chunk.iter().enumerate() {
                byte |= b << (7 - i);
            }
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }

    pub fn from_hex(hex: &str, len: usize) -> Result<Self> {
        let hex = hex.trim();
        if hex.len() != len.div_ceil(8) * 2 {
            return Err(Error::Format(format!(
                "hex string of {} digits cannot hold exactly {len} bits",
                hex.len()
            )));
        }
        let mut bits = Vec::with_capacity(len);
        for i in 0..hex.len() / 2 {
            let byte = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
                .map_err(|e| Error::Format(format!("bad hex digit: {e}")))?;
            for j in 0..8 {
                if bits.len() < len {
                    bits.push((byte >> (7 - j)) & 1);
                } else if (byte >> (7 - j)) & 1 == 1 {
                    return Err(Error::Format("non-zero padding bits in hex payload".into()));
                }
            }
        }
        Ok(Self { bits })
    }

    /// `+1.0` for set bits, `-1.0` for clear bits.
    pub fn signs(&self) -> impl Iterator<Item = f64> + '_ {
        self.bits.iter().map(|&b| if b == 1 { 1.0 } else { -1.0 })
    }
}

impl fmt::Display for BitMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b == 1 { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for BitMessage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(Error::Format(format!("`{other}` is not a bit"))),
            })
            .collect::<Result<Vec<u8>>>()
            .map(|bits| Self { bits })
    }
}

/// Interchange form: explicit bit count plus big-endian hex.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HexBits {
    pub bits: usize,
    pub hex: String,
}

impl From<&BitMessage> for HexBits {
    fn from(m: &BitMessage) -> Self {
        Self {
            bits: m.len(),
            hex: m.to_hex(),
        }
    }
}

impl TryFrom<&HexBits> for BitMessage {
    type Error = Error;

    fn try_from(h: &HexBits) -> Result<Self> {
        BitMessage::from_hex(&h.hex, h.bits)
    }
}

impl Serialize for BitMessage {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        HexBits::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for BitMessage {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let h = HexBits::deserialize(d)?;
        BitMessage::try_from(&h).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hex_is_big_endian_and_padded() {
        let m: BitMessage = "1011000011".parse().unwrap();
        assert_eq!(m.to_hex(), "b0c0");
        assert_eq!(BitMessage::from_hex("b0c0", 10).unwrap(), m);
        assert!(BitMessage::from_hex("b0c1", 10).is_err());
        assert!(BitMessage::from_hex("b0", 10).is_err());
    }

    #[test]
    fn rejects_non_bits() {
        assert!(BitMessage::new(vec![0, 2]).is_err());
        assert!("01x".parse::<BitMessage>().is_err());
    }

    proptest! {
        #[test]
        fn hex_roundtrip(bits in proptest::collection::vec(0u8..=1, 0..70)) {
            let m = BitMessage::new(bits).unwrap();
            prop_assert_eq!(BitMessage::from_hex(&m.to_hex(), m.len()).unwrap(), m.clone());
            let json = serde_json::to_string(&m).unwrap();
            prop_assert_eq!(serde_json::from_str::<BitMessage>(&json).unwrap(), m);
        }
    }
}
