//! Run reports: the canonical JSON record of one invocation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use lungbench_core::TabularError;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Bumped whenever the report layout changes incompatibly.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Arguments after the program name, as given.
    pub args: Vec<String>,
    pub inputs: BTreeMap<String, InputDigest>,
    pub config: Value,
    pub results: Value,
    /// RFC 3339 time of the run; `null` under `--deterministic`.
    pub timestamp: Option<String>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }
}

/// A failed run: exit code 2 for bad input, 3 for a broken internal invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub type Outcome<T> = Result<T, Failure>;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn tabular_failure(path: &Path, e: &TabularError) -> Failure {
    if e.column.is_empty() {
        Failure::input(format!("{}:{}: {}", path.display(), e.line, e.message))
    } else {
        Failure::input(format!("{}:{}: column `{}`: {}", path.display(), e.line, e.column, e.message))
    }
}

/// Reads inputs and records their digests.
#[derive(Debug, Default)]
pub struct Inputs {
    pub digests: BTreeMap<String, InputDigest>,
}

impl Inputs {
    pub fn bytes(&mut self, key: &str, path: &Path) -> Outcome<Vec<u8>> {
        let data = std::fs::read(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        self.digests.insert(
            key.to_string(),
            InputDigest { path: path.display().to_string(), bytes: data.len() as u64, sha256: sha256_hex(&data) },
        );
        Ok(data)
    }

    pub fn text(&mut self, key: &str, path: &Path) -> Outcome<String> {
        let data = self.bytes(key, path)?;
        String::from_utf8(data).map_err(|_| Failure::input(format!("{}: not valid UTF-8", path.display())))
    }

    /// Reads and parses a table, reporting parse errors as `file:line`.
    pub fn table<T>(
        &mut self,
        key: &str,
        path: &Path,
        parse: impl FnOnce(&str) -> Result<T, TabularError>,
    ) -> Outcome<T> {
        let text = self.text(key, path)?;
        parse(&text).map_err(|e| tabular_failure(path, &e))
    }
}
