//! `latest-build.txt`: one deployment status line per (challenge, backend).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::ids::NodeId;
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DeployState {
    Pending,
    Deployed,
    Failed,
}

impl DeployState {
    pub fn as_str(self) -> &'static str {
        match self {
            DeployState::Pending => "pending",
            DeployState::Deployed => "deployed",
            DeployState::Failed => "failed",
        }
    }
}

impl fmt::Display for DeployState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DeployState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pending" => Ok(DeployState::Pending),
            "deployed" => Ok(DeployState::Deployed),
            "failed" => Ok(DeployState::Failed),
            _ => Err(format!("invalid state {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StatusRecord {
    pub challenge: String,
    pub backend: NodeId,
    pub version: String,
    pub state: DeployState,
    pub timestamp: Timestamp,
}

impl fmt::Display for StatusRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "challenge={} backend={} version={} state={} ts={}",
            self.challenge,
            self.backend,
            self.version,
            self.state,
            self.timestamp.to_iso8601()
        )
    }
}

const FIELDS: [&str; 5] = ["challenge", "backend", "version", "state", "ts"];

impl FromStr for StatusRecord {
    type Err = String;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != FIELDS.len() {
            return Err(format!("expected {} fields, found {}", FIELDS.len(), tokens.len()));
        }
        let mut values = [""; 5];
        for (i, (tok, key)) in tokens.iter().zip(FIELDS).enumerate() {
            match tok.split_once('=') {
                Some((k, v)) if k == key && !v.is_empty() => values[i] = v,
                _ => return Err(format!("expected {key}=<value>, found {tok:?}")),
            }
        }
        Ok(StatusRecord {
            challenge: values[0].to_string(),
            backend: NodeId::new(values[1]),
            version: values[2].to_string(),
            state: values[3].parse()?,
            timestamp: Timestamp::parse_iso8601(values[4])
                .ok_or_else(|| format!("invalid timestamp {:?}", values[4]))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StatusRead {
    pub records: Vec<StatusRecord>,
    /// `(line number, reason)` for every line that did not parse.
    pub skipped: Vec<(usize, String)>,
}

pub fn parse_status(text: &str) -> StatusRead {
    let mut out = StatusRead::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match line.parse() {
            Ok(r) => out.records.push(r),
            Err(e) => out.skipped.push((i + 1, e)),
        }
    }
    out
}

/// Missing file reads as empty.
pub fn read_status(path: &Path) -> std::io::Result<StatusRead> {
    Ok(crate::fsutil::read_optional(path)?
        .map(|t| parse_status(&t))
        .unwrap_or_default())
}

/// Upserts `records` into the file. Per (challenge, backend) the record
/// with the latest timestamp is kept; lines are sorted by key.
pub fn write_status(path: &Path, records: &[StatusRecord]) -> std::io::Result<()> {
    let mut merged: BTreeMap<(String, NodeId), StatusRecord> = BTreeMap::new();
    let existing = read_status(path)?;
    for r in existing.records.into_iter().chain(records.iter().cloned()) {
        let key = (r.challenge.clone(), r.backend.clone());
        match merged.get(&key) {
            Some(old) if old.timestamp > r.timestamp => {}
            _ => {
                merged.insert(key, r);
            }
        }
    }
    let mut text = String::new();
    for r in merged.values() {
        text.push_str(&r.to_string());
        text.push('\n');
    }
    crate::fsutil::write_atomic(path, text.as_bytes())
}
