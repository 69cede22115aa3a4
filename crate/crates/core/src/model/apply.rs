use std::collections::BTreeSet;
use std::fmt;

use crate::ids::NodeId;
use crate::model::plan::{Action, ChangeSet, ObservedState, ServiceKey};
use crate::model::topology::Topology;

/// Something a [`ChangeSet`] can be executed against.
#[allow(async_fn_in_trait)]
pub trait ConvergeTarget {
    fn observe(&self) -> ObservedState;

    async fn execute(&mut self, action: &Action, desired: &Topology) -> Result<(), String>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Done,
    Failed(String),
    /// Not attempted because something it depends on failed.
    Skipped(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ApplyReport {
    pub entries: Vec<(Action, Outcome)>,
}

impl ApplyReport {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn succeeded(&self) -> bool {
        self.entries.iter().all(|(_, o)| *o == Outcome::Done)
    }

    pub fn count(&self, kind: &str) -> usize {
        self.entries.iter().filter(|(a, _)| a.kind() == kind).count()
    }

    pub fn failures(&self) -> impl Iterator<Item = &(Action, Outcome)> {
        self.entries.iter().filter(|(_, o)| *o != Outcome::Done)
    }
}

impl fmt::Display for ApplyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (action, outcome) in &self.entries {
            match outcome {
                Outcome::Done => writeln!(f, "ok      {action}")?,
                Outcome::Failed(e) => writeln!(f, "FAILED  {action}: {e}")?,
                Outcome::Skipped(why) => writeln!(f, "skipped {action}: {why}")?,
            }
        }
        let failed = self.failures().count();
        write!(f, "{} changes", self.entries.len())?;
        if failed > 0 {
            write!(f, ", {failed} not applied")?;
        }
        Ok(())
    }
}

/// Executes `changeset` in order. A failed network or replica start
/// poisons its service, so the later ingress bind is skipped rather than
/// exposing a port with nothing behind it; a failed balancer update does
/// the same for every service on that backend.
pub async fn apply<T: ConvergeTarget>(changeset: &ChangeSet, desired: &Topology, target: &mut T) -> ApplyReport {
    let mut report = ApplyReport::default();
    let mut broken_services: BTreeSet<ServiceKey> = BTreeSet::new();
    let mut broken_backends: BTreeSet<NodeId> = BTreeSet::new();

    for action in &changeset.actions {
        let blocked = match action {
            Action::StartReplica { service } => broken_services
                .contains(service)
                .then(|| format!("{service} has no network")),
            Action::BindIngress { service, .. } => {
                if broken_services.contains(service) {
                    Some(format!("{service} failed to start"))
                } else if broken_backends.contains(&service.backend) {
                    Some(format!("balancer on {} not configured", service.backend))
                } else {
                    None
                }
            }
            _ => None,
        };
        if let Some(why) = blocked {
            report.entries.push((action.clone(), Outcome::Skipped(why)));
            continue;
        }
        let outcome = match target.execute(action, desired).await {
            Ok(()) => Outcome::Done,
            Err(e) => {
                match action {
                    Action::CreateNetwork { service, .. } | Action::StartReplica { service } => {
                        broken_services.insert(service.clone());
                    }
                    Action::UpdateBalancerConfig { backend } => {
                        broken_backends.insert(backend.clone());
                    }
                    _ => {}
                }
                Outcome::Failed(e)
            }
        };
        report.entries.push((action.clone(), outcome));
    }
    report
}

/// observe → diff → apply.
pub async fn converge<T: ConvergeTarget>(desired: &Topology, target: &mut T) -> ApplyReport {
    let changes = crate::model::plan::diff(desired, &target.observe());
    apply(&changes, desired, target).await
}
