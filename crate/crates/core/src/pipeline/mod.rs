//! Artifact pipeline: package sources into immutable bundles, find what is
//! newer than what runs, roll it out, and record the result.

mod bundle;
mod manifest;
mod status;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::time::Duration;

use thiserror::Error;
use tracing::{info, warn};

pub use bundle::{
    bundle_file_name, decode_bundle, encode_bundle, extract, package_artifact, payload_checksum, read_bundle,
    scan_store, Bundle, BundleError, Packaged, PayloadFile, SkippedBundle, StoreScan, StoredArtifact, MANIFEST_MEMBER,
    META_FILE,
};
pub use manifest::{ArtifactManifest, ChallengeMeta, ManifestError, MANIFEST_KEYS, META_KEYS};
pub use status::{parse_status, read_status, write_status, DeployState, StatusRead, StatusRecord};

use crate::ids::NodeId;
use crate::platform::Platform;
use crate::supervisor::StepOutcome;

/// What currently runs for one challenge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Deployed {
    pub backend: NodeId,
    pub version: String,
    /// Artifact checksum, `None` for services started from the topology.
    pub checksum: Option<String>,
    /// Every replica runs the service's current version and artifact.
    pub uniform: bool,
}

pub type DeployedView = BTreeMap<String, Deployed>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decision {
    pub challenge: String,
    pub target: ArtifactManifest,
}

/// Newest manifest per challenge: latest `created_at`, ties broken by the
/// lexicographically greater checksum.
pub fn newest(manifests: &[ArtifactManifest]) -> BTreeMap<String, &ArtifactManifest> {
    let mut out: BTreeMap<String, &ArtifactManifest> = BTreeMap::new();
    for m in manifests {
        match out.get(&m.challenge) {
            Some(cur) if (cur.created_at, &cur.checksum) >= (m.created_at, &m.checksum) => {}
            _ => {
                out.insert(m.challenge.clone(), m);
            }
        }
    }
    out
}

/// Challenges whose newest artifact differs from what runs. Challenges not
/// running anywhere are included only when `include_undeployed` is set.
pub fn decide_updates(
    manifests: &[ArtifactManifest],
    deployed: &DeployedView,
    include_undeployed: bool,
) -> Vec<Decision> {
    newest(manifests)
        .into_iter()
        .filter(|(name, target)| match deployed.get(name) {
            None => include_undeployed,
            Some(d) => {
                !d.uniform
                    || match &d.checksum {
                        Some(c) => c != &target.checksum,
                        None => d.version != target.version,
                    }
            }
        })
        .map(|(challenge, target)| Decision {
            challenge,
            target: target.clone(),
        })
        .collect()
}

/// Live view of the services hosted by `platform`.
pub fn deployed_view(platform: &Platform) -> DeployedView {
    let mut view = DeployedView::new();
    for b in platform.backends() {
        for svc in b.supervisor().services() {
            let uniform = svc
                .instances
                .iter()
                .all(|i| i.workload.version == svc.spec.version && i.artifact == svc.artifact);
            view.insert(
                svc.spec.name.clone(),
                Deployed {
                    backend: b.node().id.clone(),
                    version: svc.spec.version.clone(),
                    checksum: svc.artifact.clone(),
                    uniform,
                },
            );
        }
    }
    view
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Rolling updates of services that already run.
    Dev,
    /// Provision exactly the selected challenges.
    Deploy,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dev" => Ok(Mode::Dev),
            "deploy" => Ok(Mode::Deploy),
            _ => Err(format!("invalid mode {s:?} (expected dev or deploy)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineContext {
    pub store: PathBuf,
    /// Bundles are unpacked under here, one directory per artifact.
    pub work_dir: PathBuf,
    pub status_file: PathBuf,
    /// Backend for challenges the topology does not place.
    pub default_backend: Option<NodeId>,
    /// How long a fresh deployment may take to become healthy.
    pub deploy_wait: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChallengeResult {
    Updated,
    Deployed,
    Unchanged,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChallengeOutcome {
    pub challenge: String,
    pub backend: Option<NodeId>,
    pub from: Option<String>,
    pub to: String,
    pub result: ChallengeResult,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineReport {
    pub mode: Mode,
    pub outcomes: Vec<ChallengeOutcome>,
    pub skipped: Vec<SkippedBundle>,
    /// Status lines rewritten to match what already runs.
    pub repaired: Vec<String>,
}

impl PipelineReport {
    /// Rollouts attempted in this run.
    pub fn updates(&self) -> usize {
        self.outcomes
            .iter()
            .filter(|o| o.result != ChallengeResult::Unchanged)
            .count()
    }

    pub fn failed(&self) -> usize {
        self.outcomes
            .iter()
            .filter(|o| matches!(o.result, ChallengeResult::Failed(_)))
            .count()
    }
}

impl fmt::Display for PipelineReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.updates();
        writeln!(f, "{n} update{}", if n == 1 { "" } else { "s" })?;
        for o in &self.outcomes {
            let backend = o.backend.as_ref().map(|b| b.as_str()).unwrap_or("-");
            let from = o.from.as_deref().unwrap_or("-");
            let result = match &o.result {
                ChallengeResult::Updated => "updated".to_string(),
                ChallengeResult::Deployed => "deployed".to_string(),
                ChallengeResult::Unchanged => "unchanged".to_string(),
                ChallengeResult::Failed(e) => format!("failed: {e}"),
            };
            writeln!(f, "  {} {backend} {from} -> {} {result}", o.challenge, o.to)?;
        }
        for s in &self.skipped {
            writeln!(f, "  skipped {}: {}", s.path.display(), s.reason)?;
        }
        for r in &self.repaired {
            writeln!(f, "  status repaired for {r}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("deploy mode needs a non-empty --select")]
    EmptySelection,
    #[error("no backend is hosted here")]
    NoBackend,
    #[error("status file: {0}")]
    Status(std::io::Error),
}

fn work_dir_for(ctx: &PipelineContext, m: &ArtifactManifest) -> PathBuf {
    ctx.work_dir
        .join(format!("{}-{}-{}", m.challenge, m.version, &m.checksum[..12]))
}

fn unpack(ctx: &PipelineContext, path: &std::path::Path, m: &ArtifactManifest) -> Result<PathBuf, String> {
    let dir = work_dir_for(ctx, m);
    if dir.is_dir() {
        return Ok(dir);
    }
    let bundle = read_bundle(path).map_err(|e| e.to_string())?;
    if bundle.manifest.checksum != m.checksum {
        return Err("bundle changed since the store was scanned".into());
    }
    let tmp = dir.with_extension("partial");
    extract(&bundle, &tmp).map_err(|e| e.to_string())?;
    std::fs::rename(&tmp, &dir).map_err(|e| e.to_string())?;
    Ok(dir)
}

/// Every replica of `challenge` on `backend` runs `version`.
fn runs_version(platform: &Platform, backend: &NodeId, challenge: &str, version: &str) -> bool {
    platform
        .backend(backend.as_str())
        .and_then(|b| b.supervisor().service(challenge))
        .is_some_and(|svc| {
            svc.instances.len() as u32 == svc.desired && svc.instances.iter().all(|i| i.workload.version == version)
        })
}

fn pick_backend(platform: &Platform, ctx: &PipelineContext, challenge: &str) -> Option<NodeId> {
    let hosted = |id: &NodeId| platform.backend(id.as_str()).is_some();
    platform
        .topology()
        .challenge(challenge)
        .map(|c| c.backend.clone())
        .filter(hosted)
        .or_else(|| ctx.default_backend.clone().filter(hosted))
        .or_else(|| platform.backends().next().map(|b| b.node().id.clone()))
}

/// One pass over the store. Per-challenge failures are recorded as
/// `state=failed` and do not stop the run.
pub async fn run_pipeline(
    platform: &mut Platform,
    ctx: &PipelineContext,
    mode: Mode,
    selection: Option<&[String]>,
) -> Result<PipelineReport, PipelineError> {
    if mode == Mode::Deploy && selection.is_none_or(|s| s.is_empty()) {
        return Err(PipelineError::EmptySelection);
    }
    if platform.backends().next().is_none() {
        return Err(PipelineError::NoBackend);
    }
    let selected = |name: &str| selection.is_none_or(|s| s.iter().any(|x| x == name));
    let scan = scan_store(&ctx.store);
    for s in &scan.skipped {
        warn!(bundle = %s.path.display(), reason = %s.reason, "skipping bundle");
    }
    let paths: BTreeMap<(String, String), PathBuf> = scan
        .artifacts
        .iter()
        .map(|a| {
            (
                (a.manifest.challenge.clone(), a.manifest.checksum.clone()),
                a.path.clone(),
            )
        })
        .collect();
    let manifests: Vec<ArtifactManifest> = scan
        .artifacts
        .iter()
        .map(|a| a.manifest.clone())
        .filter(|m| selected(&m.challenge))
        .collect();
    let deployed = deployed_view(platform);
    let decisions = decide_updates(&manifests, &deployed, mode == Mode::Deploy);
    let clock = platform.clock().clone();

    let mut report = PipelineReport {
        mode,
        outcomes: Vec::new(),
        skipped: scan.skipped.clone(),
        repaired: Vec::new(),
    };

    if mode == Mode::Deploy {
        let in_store = newest(&manifests);
        for name in selection.unwrap_or_default() {
            if !in_store.contains_key(name) {
                report.outcomes.push(ChallengeOutcome {
                    challenge: name.clone(),
                    backend: None,
                    from: None,
                    to: "-".into(),
                    result: ChallengeResult::Failed("no bundle in the store".into()),
                });
            } else if !decisions.iter().any(|d| &d.challenge == name) {
                let d = &deployed[name];
                report.outcomes.push(ChallengeOutcome {
                    challenge: name.clone(),
                    backend: Some(d.backend.clone()),
                    from: Some(d.version.clone()),
                    to: d.version.clone(),
                    result: ChallengeResult::Unchanged,
                });
            }
        }
    }

    for d in &decisions {
        let current = deployed.get(&d.challenge);
        let Some(backend) = current
            .map(|c| c.backend.clone())
            .or_else(|| pick_backend(platform, ctx, &d.challenge))
        else {
            continue;
        };
        let target = &d.target;
        let record = |state: DeployState| StatusRecord {
            challenge: d.challenge.clone(),
            backend: backend.clone(),
            version: target.version.clone(),
            state,
            timestamp: clock.now(),
        };
        write_status(&ctx.status_file, &[record(DeployState::Pending)]).map_err(PipelineError::Status)?;
        info!(challenge = %d.challenge, %backend, version = %target.version, "rolling out");

        let path = &paths[&(target.challenge.clone(), target.checksum.clone())];
        let result = match unpack(ctx, path, target) {
            Err(e) => ChallengeResult::Failed(format!("unpack: {e}")),
            Ok(workdir) => {
                let artifact = Some((target.checksum.clone(), workdir));
                match current {
                    Some(_) => {
                        let svc = platform
                            .backend(backend.as_str())
                            .and_then(|b| b.supervisor().service(&d.challenge))
                            .expect("deployed view lists hosted services");
                        let spec = crate::model::ChallengeSpec {
                            replicas: svc.desired,
                            network: svc.spec.network.clone(),
                            ..target.spec_on(backend.clone())
                        };
                        match platform.rolling_update(backend.as_str(), spec, artifact).await {
                            Err(e) => ChallengeResult::Failed(e.to_string()),
                            Ok(r) if r.partial => {
                                let why = r
                                    .steps
                                    .iter()
                                    .find_map(|s| match &s.outcome {
                                        StepOutcome::Failed { error, .. } => Some(error.clone()),
                                        _ => None,
                                    })
                                    .unwrap_or_else(|| "update aborted".into());
                                ChallengeResult::Failed(why)
                            }
                            Ok(_) => ChallengeResult::Updated,
                        }
                    }
                    None => {
                        let spec = target.spec_on(backend.clone());
                        match platform.deploy(backend.as_str(), spec, artifact, ctx.deploy_wait).await {
                            Err(e) => ChallengeResult::Failed(e.to_string()),
                            Ok(false) => ChallengeResult::Failed("replicas did not become healthy".into()),
                            Ok(true) => ChallengeResult::Deployed,
                        }
                    }
                }
            }
        };
        let result = match result {
            ChallengeResult::Updated | ChallengeResult::Deployed
                if !runs_version(platform, &backend, &d.challenge, &target.version) =>
            {
                ChallengeResult::Failed(format!("not every replica runs {}", target.version))
            }
            other => other,
        };
        let state = match result {
            ChallengeResult::Failed(_) => DeployState::Failed,
            _ => DeployState::Deployed,
        };
        write_status(&ctx.status_file, &[record(state)]).map_err(PipelineError::Status)?;
        report.outcomes.push(ChallengeOutcome {
            challenge: d.challenge.clone(),
            backend: Some(backend),
            from: current.map(|c| c.version.clone()),
            to: target.version.clone(),
            result,
        });
    }

    // A run interrupted after rolling out but before recording it leaves
    // the status file behind what runs; bring it up to date.
    let recorded = read_status(&ctx.status_file).map_err(PipelineError::Status)?;
    let mut repairs = Vec::new();
    for (name, dep) in deployed_view(platform) {
        if dep.checksum.is_none()
            || !dep.uniform
            || !selected(&name)
            || decisions.iter().any(|d| d.challenge == name)
            || !runs_version(platform, &dep.backend, &name, &dep.version)
        {
            continue;
        }
        let current = recorded
            .records
            .iter()
            .find(|r| r.challenge == name && r.backend == dep.backend);
        if current.is_some_and(|r| r.state == DeployState::Deployed && r.version == dep.version) {
            continue;
        }
        report.repaired.push(format!("{name} on {}", dep.backend));
        repairs.push(StatusRecord {
            challenge: name,
            backend: dep.backend,
            version: dep.version,
            state: DeployState::Deployed,
            timestamp: clock.now(),
        });
    }
    if !repairs.is_empty() {
        write_status(&ctx.status_file, &repairs).map_err(PipelineError::Status)?;
    }
    Ok(report)
}
