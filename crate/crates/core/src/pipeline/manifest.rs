//! The `manifest` member of a bundle and the `challenge.meta` file it is
//! built from. Both are `key=value` lines; the value is everything after
//! the first `=`, so run commands need no quoting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::ids::NodeId;
use crate::model::{ChallengeSpec, ProbeSpec, Violation};
use crate::time::Timestamp;

pub const MANIFEST_KEYS: [&str; 9] = [
    "challenge",
    "version",
    "created_at",
    "checksum",
    "replicas",
    "internal_port",
    "external_port",
    "run",
    "probe",
];

/// Keys a `challenge.meta` must declare. `created_at` is optional there
/// (packaging time is used) and `checksum` is always computed.
pub const META_KEYS: [&str; 7] = [
    "challenge",
    "version",
    "replicas",
    "internal_port",
    "external_port",
    "run",
    "probe",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ManifestError {
    #[error("line {line}: expected key=value")]
    BadLine { line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("key {0:?} given twice")]
    DuplicateKey(String),
    #[error("missing mandatory key {0:?}")]
    MissingKey(&'static str),
    #[error("invalid {key}: {message}")]
    BadValue { key: &'static str, message: String },
    #[error(transparent)]
    Invalid(#[from] Violation),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactManifest {
    pub challenge: String,
    pub version: String,
    pub created_at: Timestamp,
    /// Hex SHA-256 of the payload members.
    pub checksum: String,
    pub replicas: u32,
    pub internal_port: u16,
    pub external_port: u16,
    pub run: String,
    pub probe: ProbeSpec,
}

fn pairs(text: &str, allowed: &[&str]) -> Result<BTreeMap<String, String>, ManifestError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ManifestError::BadLine { line: i + 1 })?;
        let k = k.trim();
        if !allowed.contains(&k) {
            return Err(ManifestError::UnknownKey {
                line: i + 1,
                key: k.to_string(),
            });
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(ManifestError::DuplicateKey(k.to_string()));
        }
    }
    Ok(out)
}

struct Fields(BTreeMap<String, String>);

impl Fields {
    fn raw(&self, key: &'static str) -> Result<&str, ManifestError> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or(ManifestError::MissingKey(key))
    }

    fn parsed<T: std::str::FromStr>(&self, key: &'static str) -> Result<T, ManifestError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key)?;
        v.parse().map_err(|e: T::Err| ManifestError::BadValue {
            key,
            message: format!("{v:?}: {e}"),
        })
    }

    fn timestamp(&self, key: &'static str) -> Result<Timestamp, ManifestError> {
        let v = self.raw(key)?;
        Timestamp::parse_iso8601(v).ok_or_else(|| ManifestError::BadValue {
            key,
            message: format!("{v:?} is not an ISO-8601 timestamp"),
        })
    }
}

fn is_sha256_hex(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

impl ArtifactManifest {
    pub fn parse(text: &str) -> Result<ArtifactManifest, ManifestError> {
        let f = Fields(pairs(text, &MANIFEST_KEYS)?);
        let checksum = f.raw("checksum")?.to_string();
        if !is_sha256_hex(&checksum) {
            return Err(ManifestError::BadValue {
                key: "checksum",
                message: format!("{checksum:?} is not a SHA-256 hex digest"),
            });
        }
        let m = ArtifactManifest {
            challenge: f.raw("challenge")?.to_string(),
            version: f.raw("version")?.to_string(),
            created_at: f.timestamp("created_at")?,
            checksum,
            replicas: f.parsed("replicas")?,
            internal_port: f.parsed("internal_port")?,
            external_port: f.parsed("external_port")?,
            run: f.raw("run")?.to_string(),
            probe: f.parsed("probe")?,
        };
        m.spec_on("-").validate()?;
        Ok(m)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let values = [
            self.challenge.clone(),
            self.version.clone(),
            self.created_at.to_iso8601(),
            self.checksum.clone(),
            self.replicas.to_string(),
            self.internal_port.to_string(),
            self.external_port.to_string(),
            self.run.clone(),
            self.probe.to_string(),
        ];
        for (k, v) in MANIFEST_KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// The challenge as it would run on `backend`.
    pub fn spec_on(&self, backend: impl Into<NodeId>) -> ChallengeSpec {
        ChallengeSpec {
            name: self.challenge.clone(),
            version: self.version.clone(),
            replicas: self.replicas,
            internal_port: self.internal_port,
            external_port: self.external_port,
            backend: backend.into(),
            run: self.run.clone(),
            probe: self.probe.clone(),
            network: ChallengeSpec::default_network(&self.challenge),
        }
    }
}

/// Parsed `challenge.meta`: a manifest minus the checksum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChallengeMeta {
    pub created_at: Option<Timestamp>,
    pub manifest: ArtifactManifest,
}

impl ChallengeMeta {
    pub fn parse(text: &str) -> Result<ChallengeMeta, ManifestError> {
        let mut allowed = META_KEYS.to_vec();
        allowed.push("created_at");
        let f = Fields(pairs(text, &allowed)?);
        for k in META_KEYS {
            f.raw(k)?;
        }
        let created_at = match f.0.contains_key("created_at") {
            true => Some(f.timestamp("created_at")?),
            false => None,
        };
        let manifest = ArtifactManifest {
            challenge: f.raw("challenge")?.to_string(),
            version: f.raw("version")?.to_string(),
            created_at: created_at.unwrap_or_default(),
            checksum: String::new(),
            replicas: f.parsed("replicas")?,
            internal_port: f.parsed("internal_port")?,
            external_port: f.parsed("external_port")?,
            run: f.raw("run")?.to_string(),
            probe: f.parsed("probe")?,
        };
        manifest.spec_on("-").validate()?;
        Ok(ChallengeMeta { created_at, manifest })
    }
}
