//! CeFM: a typed state graph whose flows carry operations, guards or ε.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::predicate::{Expr, Value};

macro_rules! name_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                Self(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
    };
}

name_type!(
    /// State identifier, unique within one model.
    StateId
);
name_type!(Role);
name_type!(TaskName);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateKind {
    Plain,
    Alternative,
    Loop,
    Fork,
    Join,
    Initial,
    Final,
}

/// A business interaction `initiator.task.receiver`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Operation {
    #[serde(rename = "from")]
    pub initiator: Role,
    pub task: TaskName,
    #[serde(rename = "to")]
    pub receiver: Role,
}

impl Operation {
    pub fn new(initiator: &str, task: &str, receiver: &str) -> Self {
        Operation {
            initiator: Role::new(initiator),
            task: TaskName::new(task),
            receiver: Role::new(receiver),
        }
    }
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.initiator, self.task, self.receiver)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowLabel {
    Op(Operation),
    Guard(Expr),
    Eps,
}

impl FlowLabel {
    pub fn is_eps(&self) -> bool {
        matches!(self, FlowLabel::Eps)
    }

    pub fn operation(&self) -> Option<&Operation> {
        match self {
            FlowLabel::Op(op) => Some(op),
            _ => None,
        }
    }

    pub fn guard(&self) -> Option<&Expr> {
        match self {
            FlowLabel::Guard(g) => Some(g),
            _ => None,
        }
    }
}

impl fmt::Display for FlowLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FlowLabel::Op(op) => write!(f, "{op}"),
            FlowLabel::Guard(g) => write!(f, "[{g}]"),
            FlowLabel::Eps => f.write_str("ε"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Flow {
    pub from: StateId,
    pub to: StateId,
    pub label: FlowLabel,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("flow endpoint `{0}` is not a declared state")]
    UnknownState(StateId),
    #[error("`{0}` is declared as {1:?} but the model names it as its {2} state")]
    KindMismatch(StateId, StateKind, &'static str),
    #[error("{0:?} state must occur exactly once, found {1}")]
    Singleton(StateKind, usize),
    #[error("cannot read {path}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed model: {0}")]
    Json(#[from] serde_json::Error),
}

/// On-disk shape of a model.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct CefmFile {
    states: BTreeMap<StateId, StateKind>,
    initial: StateId,
    #[serde(rename = "final")]
    final_state: StateId,
    roles: BTreeSet<Role>,
    #[serde(default)]
    variables: BTreeMap<String, Vec<Value>>,
    flows: Vec<Flow>,
}

/// A Choreography explicit-Flow Model.
///
/// Flows are kept sorted and deduplicated so that serialization is canonical.
/// Adjacency indexes are built once at construction.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "CefmFile", into = "CefmFile")]
pub struct Cefm {
    states: BTreeMap<StateId, StateKind>,
    initial: StateId,
    final_state: StateId,
    roles: BTreeSet<Role>,
    variables: BTreeMap<String, Vec<Value>>,
    flows: Vec<Flow>,
    out: BTreeMap<StateId, Vec<usize>>,
    inc: BTreeMap<StateId, Vec<usize>>,
}

impl PartialEq for Cefm {
    fn eq(&self, other: &Self) -> bool {
        self.states == other.states
            && self.initial == other.initial
            && self.final_state == other.final_state
            && self.roles == other.roles
            && self.variables == other.variables
            && self.flows == other.flows
    }
}

impl Eq for Cefm {}

impl TryFrom<CefmFile> for Cefm {
    type Error = ModelError;

    fn try_from(f: CefmFile) -> Result<Self, ModelError> {
        Cefm::new(
            f.states,
            f.initial,
            f.final_state,
            f.roles,
            f.variables,
            f.flows,
        )
    }
}

impl From<Cefm> for CefmFile {
    fn from(m: Cefm) -> Self {
        CefmFile {
            states: m.states,
            initial: m.initial,
            final_state: m.final_state,
            roles: m.roles,
            variables: m.variables,
            flows: m.flows,
        }
    }
}

impl Cefm {
    /// Builds a model, checking only syntactic well-formedness: every flow
    /// endpoint exists and initial/final are declared with matching kinds.
    /// Structural properties are the validator's job.
    pub fn new(
        states: BTreeMap<StateId, StateKind>,
        initial: StateId,
        final_state: StateId,
        roles: BTreeSet<Role>,
        variables: BTreeMap<String, Vec<Value>>,
        mut flows: Vec<Flow>,
    ) -> Result<Self, ModelError> {
        for (id, want, what) in [
            (&initial, StateKind::Initial, "initial"),
            (&final_state, StateKind::Final, "final"),
        ] {
            match states.get(id) {
                None => return Err(ModelError::UnknownState(id.clone())),
                Some(k) if *k != want => {
                    return Err(ModelError::KindMismatch(id.clone(), *k, what))
                }
                _ => {}
            }
            let count = states.values().filter(|k| **k == want).count();
            if count != 1 {
                return Err(ModelError::Singleton(want, count));
            }
        }
        for f in &flows {
            for end in [&f.from, &f.to] {
                if !states.contains_key(end) {
                    return Err(ModelError::UnknownState(end.clone()));
                }
            }
        }
        flows.sort();
        flows.dedup();
        let mut out: BTreeMap<StateId, Vec<usize>> = BTreeMap::new();
        let mut inc: BTreeMap<StateId, Vec<usize>> = BTreeMap::new();
        for (i, f) in flows.iter().enumerate() {
            out.entry(f.from.clone()).or_default().push(i);
            inc.entry(f.to.clone()).or_default().push(i);
        }
        Ok(Cefm {
            states,
            initial,
            final_state,
            roles,
            variables,
            flows,
            out,
            inc,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialization cannot fail")
    }

    pub fn states(&self) -> &BTreeMap<StateId, StateKind> {
        &self.states
    }

    pub fn kind(&self, s: &StateId) -> Option<StateKind> {
        self.states.get(s).copied()
    }

    pub fn initial(&self) -> &StateId {
        &self.initial
    }

    pub fn final_state(&self) -> &StateId {
        &self.final_state
    }

    pub fn roles(&self) -> &BTreeSet<Role> {
        &self.roles
    }

    pub fn variables(&self) -> &BTreeMap<String, Vec<Value>> {
        &self.variables
    }

    pub fn flows(&self) -> &[Flow] {
        &self.flows
    }

    pub fn outgoing<'a>(&'a self, s: &StateId) -> impl Iterator<Item = &'a Flow> + 'a {
        self.out
            .get(s)
            .into_iter()
            .flatten()
            .map(move |&i| &self.flows[i])
    }

    pub fn incoming<'a>(&'a self, s: &StateId) -> impl Iterator<Item = &'a Flow> + 'a {
        self.inc
            .get(s)
            .into_iter()
            .flatten()
            .map(move |&i| &self.flows[i])
    }

    /// Operation flows in canonical order.
    pub fn operations(&self) -> impl Iterator<Item = (&Flow, &Operation)> {
        self.flows
            .iter()
            .filter_map(|f| f.label.operation().map(|op| (f, op)))
    }

    /// Distinct task labels `(initiator, task, receiver)` used by the model.
    pub fn task_labels(&self) -> BTreeSet<&Operation> {
        self.operations().map(|(_, op)| op).collect()
    }

    /// States reached by taking one flow from `s` labeled `label` and then any
    /// number of ε flows, including the first target itself.
    pub fn echain_targets(&self, s: &StateId, label: &FlowLabel) -> BTreeSet<StateId> {
        let starts = self
            .outgoing(s)
            .filter(|f| &f.label == label)
            .map(|f| f.to.clone());
        self.closure(starts, |f| f.label.is_eps())
    }

    /// States the owner of an operation flow is responsible for: the flow's
    /// target and everything reachable from it through ε and guard flows.
    pub fn owned_region(&self, op_target: &StateId) -> BTreeSet<StateId> {
        self.closure([op_target.clone()], |f| f.label.operation().is_none())
    }

    /// Every state reachable from `starts` along flows accepted by `follow`.
    pub fn closure(
        &self,
        starts: impl IntoIterator<Item = StateId>,
        follow: impl Fn(&Flow) -> bool,
    ) -> BTreeSet<StateId> {
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<StateId> = starts.into_iter().collect();
        while let Some(s) = queue.pop_front() {
            if !seen.insert(s.clone()) {
                continue;
            }
            for f in self.outgoing(&s) {
                if follow(f) && !seen.contains(&f.to) {
                    queue.push_back(f.to.clone());
                }
            }
        }
        seen
    }

    /// The guard on the entry flow of a loop state, and the exit target.
    pub fn loop_parts(&self, l: &StateId) -> Option<(&Expr, &StateId, &StateId)> {
        let entry = self
            .outgoing(l)
            .find_map(|f| f.label.guard().map(|g| (g, &f.to)))?;
        let exit = self.outgoing(l).find(|f| f.label.is_eps())?;
        Some((entry.0, entry.1, &exit.to))
    }
}

/// Small builder used by tests, fixtures and the random generator.
#[derive(Clone, Debug, Default)]
pub struct CefmBuilder {
    states: BTreeMap<StateId, StateKind>,
    roles: BTreeSet<Role>,
    variables: BTreeMap<String, Vec<Value>>,
    flows: Vec<Flow>,
}

impl CefmBuilder {
    pub fn new() -> Self {
        let mut b = Self::default();
        b.states.insert(StateId::new("Initial"), StateKind::Initial);
        b.states.insert(StateId::new("Final"), StateKind::Final);
        b
    }

    pub fn state(mut self, id: &str, kind: StateKind) -> Self {
        self.states.insert(StateId::new(id), kind);
        self
    }

    pub fn bool_var(mut self, name: &str) -> Self {
        self.variables
            .insert(name.into(), vec![Value::Bool(false), Value::Bool(true)]);
        self
    }

    pub fn int_var(mut self, name: &str, domain: impl IntoIterator<Item = i64>) -> Self {
        self.variables
            .insert(name.into(), domain.into_iter().map(Value::Int).collect());
        self
    }

    pub fn eps(mut self, from: &str, to: &str) -> Self {
        self.flows.push(Flow {
            from: from.into(),
            to: to.into(),
            label: FlowLabel::Eps,
        });
        self
    }

    pub fn guard(mut self, from: &str, guard: &str, to: &str) -> Self {
        self.flows.push(Flow {
            from: from.into(),
            to: to.into(),
            label: FlowLabel::Guard(guard.parse().expect("guard must parse")),
        });
        self
    }

    /// Adds `from --initiator.task.receiver--> to`, declaring both roles.
    pub fn op(mut self, from: &str, initiator: &str, task: &str, receiver: &str, to: &str) -> Self {
        self.roles.insert(Role::new(initiator));
        self.roles.insert(Role::new(receiver));
        self.flows.push(Flow {
            from: from.into(),
            to: to.into(),
            label: FlowLabel::Op(Operation::new(initiator, task, receiver)),
        });
        self
    }

    pub fn build(self) -> Result<Cefm, ModelError> {
        Cefm::new(
            self.states,
            StateId::new("Initial"),
            StateId::new("Final"),
            self.roles,
            self.variables,
            self.flows,
        )
    }
}
