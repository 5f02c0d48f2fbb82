//! Exact decimal encoding of `f64` arrays inside JSON documents.
//!
//! Values are written with 17 significant digits, which is always enough for
//! an exact round-trip, and the output is byte-stable for identical inputs.

use serde::ser::{SerializeSeq, Serializer};
use serde::Serialize;
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};

pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Serializes a slice of floats as a JSON array of 17-digit decimals.
pub struct Dec17<'a>(pub &'a [f64]);

impl Serialize for Dec17<'_> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(self.0.len()))?;
        for &x in self.0 {
            let raw = RawValue::from_string(fmt17(x)).map_err(serde::ser::Error::custom)?;
            seq.serialize_element(&raw)?;
        }
        seq.end()
    }
}

/// Nested arrays (one row per inner slice).
pub struct Dec17Rows<'a>(pub &'a [Vec<f64>]);

impl Serialize for Dec17Rows<'_> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(self.0.len()))?;
        for row in self.0 {
            seq.serialize_element(&Dec17(row))?;
        }
        seq.end()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
