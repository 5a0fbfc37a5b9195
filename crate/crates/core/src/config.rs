//! `key=value` config/manifest files and the CRC-32 used for integrity
//! checks.
//!
//! The text format is one `key = value` pair per line; `#` starts a comment
//! and blank lines are ignored. Keys are unique; later duplicates are a parse
//! error so silent overrides cannot hide typos.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Parsed key=value file with typed, error-reporting accessors.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
    source: String,
}

impl KvMap {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::parse(
                    source,
                    format!("line {}: expected `key = value`, got `{raw}`", line_no + 1),
                ));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(Error::parse(source, format!("line {}: empty key", line_no + 1)));
            }
            if entries.insert(key.clone(), value).is_some() {
                return Err(Error::parse(
                    source,
                    format!("line {}: duplicate key `{key}`", line_no + 1),
                ));
            }
        }
        Ok(Self {
            entries,
            source: source.to_string(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| {
            Error::parse(&self.source, format!("missing required key `{key}`"))
        })
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        self.parse_with(key, |v| v.parse::<f64>().ok())
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        self.parse_with(key, |v| v.parse::<usize>().ok())
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        self.parse_with(key, |v| v.parse::<u64>().ok())
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        self.parse_with(key, |v| match v {
            "true" | "1" => Some(true),
            "false" | "0" => Some(false),
            _ => None,
        })
    }

    /// Comma-separated triple, e.g. `bbox_min = -1.0,-1.0,-0.5`.
    pub fn get_vec3(&self, key: &str) -> Result<Option<[f64; 3]>> {
        self.parse_with(key, |v| {
            let parts: Vec<f64> = v
                .split(',')
                .map(|t| t.trim().parse::<f64>().ok())
                .collect::<Option<_>>()?;
            <[f64; 3]>::try_from(parts).ok()
        })
    }

    fn parse_with<T>(&self, key: &str, f: impl Fn(&str) -> Option<T>) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => f(v).map(Some).ok_or_else(|| {
                Error::parse(
                    &self.source,
                    format!("key `{key}`: cannot interpret value `{v}`"),
                )
            }),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

/// Serializes ordered pairs as `key = value` lines.
pub fn format_kv(pairs: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}

/// Writes ordered pairs to a file.
pub fn write_kv(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    std::fs::write(path, format_kv(pairs))?;
    Ok(())
}

/// CRC-32 (IEEE 802.3, reflected polynomial 0xEDB88320), the checksum used
/// for checkpoint trailers and config fingerprints.
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &byte in bytes {
        crc ^= byte as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}
