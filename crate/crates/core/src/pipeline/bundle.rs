//! Bundle files: a ustar archive whose first member is `manifest`, followed
//! by the payload files of the challenge source directory.

use std::io::Read;
use std::path::{Component, Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

use super::manifest::{ArtifactManifest, ChallengeMeta, ManifestError};
use crate::time::Timestamp;

pub const META_FILE: &str = "challenge.meta";
pub const MANIFEST_MEMBER: &str = "manifest";
const BLOCK: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PayloadFile {
    /// Relative `/`-separated path.
    pub path: String,
    pub mode: u32,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bundle {
    pub manifest: ArtifactManifest,
    pub payload: Vec<PayloadFile>,
}

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("{}: {error}", .path.display())]
    Meta { path: PathBuf, error: ManifestError },
    #[error("bad manifest: {0}")]
    Manifest(ManifestError),
    #[error("truncated archive ({0} bytes)")]
    Truncated(u64),
    #[error("first member is {0:?}, expected \"manifest\"")]
    NoManifest(String),
    #[error("unsafe member path {0:?}")]
    UnsafePath(String),
    #[error("unsupported member {0:?}")]
    Unsupported(String),
    #[error("checksum mismatch: manifest says {expected}, payload hashes to {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("version {version} already exists with different checksum")]
    VersionExists { version: String },
    #[error("archive: {0}")]
    Archive(std::io::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn bundle_file_name(challenge: &str, version: &str) -> String {
    format!("{challenge}-{version}.bundle")
}

/// SHA-256 over the payload members in archive order. Each member
/// contributes its path, a NUL, its length as a big-endian u64 and its
/// bytes, so renames and content moves between files change the digest.
pub fn payload_checksum(payload: &[PayloadFile]) -> String {
    let mut h = Sha256::new();
    for f in payload {
        h.update(f.path.as_bytes());
        h.update([0u8]);
        h.update((f.data.len() as u64).to_be_bytes());
        h.update(&f.data);
    }
    hex::encode(h.finalize())
}

fn safe_relative(path: &str) -> bool {
    !path.is_empty() && Path::new(path).components().all(|c| matches!(c, Component::Normal(_)))
}

/// Regular files under `dir`, sorted by path.
fn collect_payload(dir: &Path) -> Result<Vec<PayloadFile>, BundleError> {
    let mut out = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| BundleError::Io(e.into()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(dir).expect("walkdir stays under its root");
        let path = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        use std::os::unix::fs::PermissionsExt;
        let mode = entry
            .metadata()
            .map_err(|e| BundleError::Io(e.into()))?
            .permissions()
            .mode()
            & 0o777;
        out.push(PayloadFile {
            path,
            mode,
            data: std::fs::read(entry.path())?,
        });
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

fn append(builder: &mut tar::Builder<Vec<u8>>, path: &str, mode: u32, data: &[u8]) -> std::io::Result<()> {
    let mut header = tar::Header::new_ustar();
    header.set_path(path)?;
    header.set_size(data.len() as u64);
    header.set_mode(mode);
    header.set_mtime(0);
    header.set_entry_type(tar::EntryType::Regular);
    header.set_cksum();
    builder.append(&header, data)
}

/// Serializes a bundle; identical inputs give identical bytes.
pub fn encode_bundle(bundle: &Bundle) -> Result<Vec<u8>, BundleError> {
    let mut builder = tar::Builder::new(Vec::new());
    append(
        &mut builder,
        MANIFEST_MEMBER,
        0o644,
        bundle.manifest.serialize().as_bytes(),
    )
    .map_err(BundleError::Archive)?;
    for f in &bundle.payload {
        append(&mut builder, &f.path, f.mode, &f.data).map_err(BundleError::Archive)?;
    }
    builder.into_inner().map_err(BundleError::Archive)
}

/// Parses and verifies bundle bytes.
pub fn decode_bundle(bytes: &[u8]) -> Result<Bundle, BundleError> {
    // A complete archive is whole blocks ending in two zero blocks.
    if !bytes.len().is_multiple_of(BLOCK)
        || bytes.len() < 3 * BLOCK
        || bytes[bytes.len() - 2 * BLOCK..].iter().any(|&b| b != 0)
    {
        return Err(BundleError::Truncated(bytes.len() as u64));
    }
    let mut archive = tar::Archive::new(bytes);
    let mut manifest = None;
    let mut payload = Vec::new();
    for entry in archive.entries().map_err(BundleError::Archive)? {
        let mut entry = entry.map_err(BundleError::Archive)?;
        let path = entry
            .path()
            .map_err(BundleError::Archive)?
            .to_string_lossy()
            .into_owned();
        if !entry.header().entry_type().is_file() {
            return Err(BundleError::Unsupported(path));
        }
        let mut data = Vec::new();
        entry.read_to_end(&mut data).map_err(BundleError::Archive)?;
        if manifest.is_none() {
            if path != MANIFEST_MEMBER {
                return Err(BundleError::NoManifest(path));
            }
            let text = String::from_utf8_lossy(&data);
            manifest = Some(ArtifactManifest::parse(&text).map_err(BundleError::Manifest)?);
            continue;
        }
        if !safe_relative(&path) {
            return Err(BundleError::UnsafePath(path));
        }
        let mode = entry.header().mode().map_err(BundleError::Archive)? & 0o777;
        payload.push(PayloadFile { path, mode, data });
    }
    let manifest = manifest.ok_or_else(|| BundleError::NoManifest(String::new()))?;
    let actual = payload_checksum(&payload);
    if actual != manifest.checksum {
        return Err(BundleError::ChecksumMismatch {
            expected: manifest.checksum,
            actual,
        });
    }
    Ok(Bundle { manifest, payload })
}

pub fn read_bundle(path: &Path) -> Result<Bundle, BundleError> {
    decode_bundle(&std::fs::read(path)?)
}

/// Writes the payload under `dir`, which is replaced if it exists.
pub fn extract(bundle: &Bundle, dir: &Path) -> Result<(), BundleError> {
    use std::os::unix::fs::PermissionsExt;
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::create_dir_all(dir)?;
    for f in &bundle.payload {
        if !safe_relative(&f.path) {
            return Err(BundleError::UnsafePath(f.path.clone()));
        }
        let target = dir.join(&f.path);
        if let Some(parent) = target.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&target, &f.data)?;
        std::fs::set_permissions(&target, std::fs::Permissions::from_mode(f.mode))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packaged {
    pub path: PathBuf,
    pub manifest: ArtifactManifest,
    /// False when an identical bundle was already in the store.
    pub created: bool,
}

/// Builds `<challenge>-<version>.bundle` in `store` from `source_dir`.
/// Versions are immutable: an existing bundle for the same version must
/// carry the same checksum.
pub fn package_artifact(source_dir: &Path, store: &Path, now: Timestamp) -> Result<Packaged, BundleError> {
    let meta_path = source_dir.join(META_FILE);
    let text = std::fs::read_to_string(&meta_path)?;
    let meta = ChallengeMeta::parse(&text).map_err(|error| BundleError::Meta {
        path: meta_path.clone(),
        error,
    })?;
    let payload = collect_payload(source_dir)?;
    let mut manifest = meta.manifest;
    manifest.created_at = meta.created_at.unwrap_or(now);
    manifest.checksum = payload_checksum(&payload);

    let path = store.join(bundle_file_name(&manifest.challenge, &manifest.version));
    if path.exists() {
        let existing = read_bundle(&path)?;
        if existing.manifest.checksum != manifest.checksum {
            return Err(BundleError::VersionExists {
                version: manifest.version,
            });
        }
        return Ok(Packaged {
            path,
            manifest: existing.manifest,
            created: false,
        });
    }
    let bytes = encode_bundle(&Bundle {
        manifest: manifest.clone(),
        payload,
    })?;
    crate::fsutil::write_atomic(&path, &bytes)?;
    Ok(Packaged {
        path,
        manifest,
        created: true,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredArtifact {
    pub path: PathBuf,
    pub manifest: ArtifactManifest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedBundle {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StoreScan {
    /// Ordered by challenge, then creation time.
    pub artifacts: Vec<StoredArtifact>,
    pub skipped: Vec<SkippedBundle>,
}

/// Reads every `*.bundle` in `store`. Unreadable bundles are skipped and
/// reported; a missing store is empty.
pub fn scan_store(store: &Path) -> StoreScan {
    let mut scan = StoreScan::default();
    let Ok(entries) = std::fs::read_dir(store) else {
        return scan;
    };
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "bundle"))
        .collect();
    paths.sort();
    for path in paths {
        match read_bundle(&path) {
            Ok(b) => scan.artifacts.push(StoredArtifact {
                path,
                manifest: b.manifest,
            }),
            Err(e) => scan.skipped.push(SkippedBundle {
                path,
                reason: e.to_string(),
            }),
        }
    }
    scan.artifacts.sort_by(|a, b| {
        let key = |m: &ArtifactManifest| (m.challenge.clone(), m.created_at, m.checksum.clone());
        key(&a.manifest).cmp(&key(&b.manifest))
    });
    scan
}
