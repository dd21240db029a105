//! Tagged textual containers.
//!
//! Every file written by this crate starts with a single format-tag line
//! (for example `trajcast-ds/1`) followed by the payload. Readers refuse a
//! file whose first line is not the tag they expect.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const DATASET_TAG: &str = "trajcast-ds/1";
pub const GROUND_TRUTH_TAG: &str = "trajcast-gt/1";
pub const PARAMS_TAG: &str = "trajcast-params/1";
pub const MODEL_TAG: &str = "trajcast-model/1";
pub const ENSEMBLE_TAG: &str = "trajcast-ens/1";

/// Splits `text` into its tag line and the remaining payload.
pub fn split_tag(text: &str) -> (&str, &str) {
    match text.split_once('\n') {
        Some((tag, body)) => (tag.trim_end_matches('\r'), body),
        None => (text.trim_end_matches('\r'), ""),
    }
}

/// Returns the payload if `text` carries `expected` as its tag.
pub fn expect_tag<'a>(text: &'a str, expected: &str) -> Result<&'a str> {
    let (tag, body) = split_tag(text);
    if tag != expected {
        return Err(Error::Format {
            expected: expected.to_string(),
            found: tag.chars().take(64).collect(),
        });
    }
    Ok(body)
}

pub fn encode_json<T: Serialize>(tag: &str, value: &T) -> Result<String> {
    let body =
        serde_json::to_string_pretty(value).map_err(|e| Error::Container(format!("{tag}: {e}")))?;
    Ok(format!("{tag}\n{body}\n"))
}

pub fn decode_json<T: DeserializeOwned>(tag: &str, text: &str) -> Result<T> {
    let body = expect_tag(text, tag)?;
    serde_json::from_str(body).map_err(|e| Error::Container(format!("{tag}: {e}")))
}

pub fn write_json<T: Serialize>(path: &Path, tag: &str, value: &T) -> Result<()> {
    fs::write(path, encode_json(tag, value)?)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path, tag: &str) -> Result<T> {
    let text = fs::read_to_string(path)?;
    decode_json(tag, &text)
}

/// Reads only the tag line of a file.
pub fn peek_tag(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path)?;
    Ok(split_tag(&text).0.to_string())
}
