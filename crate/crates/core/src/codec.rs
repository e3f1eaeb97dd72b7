//! Canonical encodings.
//!
//! Binary: little-endian fixed-width integers, `u64` length prefixes for
//! sequences, fields in declaration order, enum variants as `u32` tags.
//! Text: JSON with decimals as strings and byte strings as hex.

use bincode::Options;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

pub const ENCODING_SCHEME: &str = "bincode1-fixint-le";

/// Upper bound on a single decoded object.
const DECODE_LIMIT: u64 = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("binary decode failed: {0}")]
    Binary(#[from] bincode::Error),
    #[error("text decode failed: {0}")]
    Text(#[from] serde_json::Error),
}

fn options() -> impl Options {
    bincode::DefaultOptions::new()
        .with_fixint_encoding()
        .with_little_endian()
        .reject_trailing_bytes()
        .with_limit(DECODE_LIMIT)
}

pub fn encode<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    options().serialize(value).expect("in-memory encoding cannot fail")
}

pub fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, CodecError> {
    Ok(options().deserialize(bytes)?)
}

pub fn to_text<T: Serialize + ?Sized>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("in-memory encoding cannot fail")
}

pub fn from_text<T: DeserializeOwned>(text: &str) -> Result<T, CodecError> {
    Ok(serde_json::from_str(text)?)
}
