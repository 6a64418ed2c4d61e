//! Scenario files and the deployments built from them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cm::{generate_all, CdId, CmError, CoordinationModel};
use crate::delegate::{DelegateConfig, Fault, Priority};
use crate::model::{Cefm, ModelError, StateId};
use crate::participants::{
    check_script, enactment_bootstrap, BootstrapError, ParticipantScript, ScriptError,
};
use crate::predicate::Environment;
use crate::sim::Policy;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed scenario: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cm(#[from] CmError),
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error(transparent)]
    Bootstrap(#[from] BootstrapError),
    #[error("bad delegate key: {0}")]
    Key(String),
    #[error("environment does not bind `{0}`")]
    Unbound(String),
    #[error("environment binds `{var}` to {value}, outside its domain")]
    OutOfDomain { var: String, value: String },
    #[error("priorities must be distinct, {0} and {1} share one")]
    DuplicatePriority(CdId, CdId),
}

/// On-disk scenario.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioFile {
    /// Model path, relative to the scenario file.
    pub cefm: PathBuf,
    pub environment: Environment,
    /// Keyed by `initiator,receiver`.
    #[serde(default)]
    pub priorities: BTreeMap<String, u32>,
    pub participants: Vec<ParticipantScript>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub policy: Policy,
    #[serde(default)]
    pub faults: BTreeMap<String, Fault>,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub model: Cefm,
    pub environment: Environment,
    pub priorities: BTreeMap<CdId, Priority>,
    pub participants: Vec<ParticipantScript>,
    pub seed: u64,
    pub policy: Policy,
    pub faults: BTreeMap<CdId, Fault>,
}

fn parse_keyed<V: Clone>(map: &BTreeMap<String, V>) -> Result<BTreeMap<CdId, V>, ScenarioError> {
    map.iter()
        .map(|(k, v)| Ok((k.parse::<CdId>().map_err(ScenarioError::Key)?, v.clone())))
        .collect()
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let file: ScenarioFile = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let model = Cefm::load(base.join(&file.cefm))?;
        Self::from_file(file, model)
    }

    pub fn from_file(file: ScenarioFile, model: Cefm) -> Result<Self, ScenarioError> {
        Ok(Scenario {
            model,
            environment: file.environment,
            priorities: parse_keyed(&file.priorities)?
                .into_iter()
                .map(|(k, v)| (k, Priority(v)))
                .collect(),
            participants: file.participants,
            seed: file.seed,
            policy: file.policy,
            faults: parse_keyed(&file.faults)?,
        })
    }

    /// A scenario with default priorities, no faults, seed 0, round robin.
    pub fn new(
        model: Cefm,
        environment: Environment,
        participants: Vec<ParticipantScript>,
    ) -> Self {
        Scenario {
            model,
            environment,
            priorities: BTreeMap::new(),
            participants,
            seed: 0,
            policy: Policy::RoundRobin,
            faults: BTreeMap::new(),
        }
    }

    pub fn with_fault(mut self, cd: CdId, fault: Fault) -> Self {
        self.faults.insert(cd, fault);
        self
    }
}

/// Everything needed to start simulations of one scenario.
#[derive(Debug)]
pub struct Deployment {
    pub model: Arc<Cefm>,
    pub environment: Environment,
    pub cms: BTreeMap<CdId, CoordinationModel>,
    pub configs: BTreeMap<CdId, Arc<DelegateConfig>>,
    pub bootstrap: Vec<(CdId, StateId)>,
    pub participants: Vec<ParticipantScript>,
}

/// Default rank: position of the pair in lexicographic order, so the
/// lexicographically last pair has the highest priority.
pub fn default_priorities(cds: impl IntoIterator<Item = CdId>) -> BTreeMap<CdId, Priority> {
    let mut cds: Vec<CdId> = cds.into_iter().collect();
    cds.sort();
    cds.dedup();
    cds.into_iter()
        .enumerate()
        .map(|(i, cd)| (cd, Priority(i as u32)))
        .collect()
}

impl Deployment {
    pub fn new(scenario: &Scenario) -> Result<Self, ScenarioError> {
        let model = &scenario.model;
        for (var, domain) in model.variables() {
            let value = scenario
                .environment
                .get(var)
                .map_err(|_| ScenarioError::Unbound(var.clone()))?;
            if !domain.contains(&value) {
                return Err(ScenarioError::OutOfDomain {
                    var: var.clone(),
                    value: value.to_string(),
                });
            }
        }
        for script in &scenario.participants {
            check_script(model, script)?;
        }
        let cms = generate_all(model)?;
        let mut priorities = default_priorities(cms.keys().cloned());
        for (cd, p) in &scenario.priorities {
            priorities.insert(cd.clone(), *p);
        }
        let mut by_rank: BTreeMap<Priority, CdId> = BTreeMap::new();
        for (cd, p) in &priorities {
            if let Some(other) = by_rank.insert(*p, cd.clone()) {
                return Err(ScenarioError::DuplicatePriority(other, cd.clone()));
            }
        }
        let configs = cms
            .iter()
            .map(|(cd, cm)| {
                let peers = priorities
                    .iter()
                    .filter(|(k, _)| *k != cd)
                    .map(|(k, v)| (k.clone(), *v))
                    .collect();
                let config = DelegateConfig::new(
                    model,
                    cm.clone(),
                    priorities[cd],
                    peers,
                    scenario.environment.clone(),
                    scenario.faults.get(cd).copied(),
                );
                (cd.clone(), Arc::new(config))
            })
            .collect();
        let bootstrap = enactment_bootstrap(model, &cms)?;
        Ok(Deployment {
            model: Arc::new(model.clone()),
            environment: scenario.environment.clone(),
            cms,
            configs,
            bootstrap,
            participants: scenario.participants.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_priority_is_lexicographic_rank() {
        let p = default_priorities([CdId::new("SPS", "NMU"), CdId::new("SPS", "NMF")]);
        assert!(p[&CdId::new("SPS", "NMU")] > p[&CdId::new("SPS", "NMF")]);
    }
}
