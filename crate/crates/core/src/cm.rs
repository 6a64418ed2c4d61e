//! Coordination models: the per-pair projection of a CeFM.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Cefm, FlowLabel, Role, StateId, StateKind, TaskName};
use crate::predicate::Expr;
use crate::validate::{validate_cefm, ValidationReport};

/// Identifies the delegate sitting between an initiator and a receiver.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(Role, Role)", into = "(Role, Role)")]
pub struct CdId {
    pub initiator: Role,
    pub receiver: Role,
}

impl CdId {
    pub fn new(initiator: &str, receiver: &str) -> Self {
        CdId {
            initiator: Role::new(initiator),
            receiver: Role::new(receiver),
        }
    }
}

impl From<(Role, Role)> for CdId {
    fn from((initiator, receiver): (Role, Role)) -> Self {
        CdId {
            initiator,
            receiver,
        }
    }
}

impl From<CdId> for (Role, Role) {
    fn from(c: CdId) -> Self {
        (c.initiator, c.receiver)
    }
}

impl fmt::Display for CdId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.initiator, self.receiver)
    }
}

impl FromStr for CdId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (a, b) = s
            .split_once(',')
            .ok_or_else(|| format!("expected `initiator,receiver`, got `{s}`"))?;
        let (a, b) = (a.trim(), b.trim());
        if a.is_empty() || b.is_empty() {
            return Err(format!("empty role in `{s}`"));
        }
        Ok(CdId::new(a, b))
    }
}

/// A `[state, (h,k)]` entry of a notify or wait set.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(StateId, CdId)", into = "(StateId, CdId)")]
pub struct JoinRef {
    pub state: StateId,
    pub cd: CdId,
}

impl From<(StateId, CdId)> for JoinRef {
    fn from((state, cd): (StateId, CdId)) -> Self {
        JoinRef { state, cd }
    }
}

impl From<JoinRef> for (StateId, CdId) {
    fn from(j: JoinRef) -> Self {
        (j.state, j.cd)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CoordinationTuple {
    pub src: StateId,
    /// `None` stands for ε.
    pub op: Option<TaskName>,
    pub trg: StateId,
    #[serde(rename = "allowedService")]
    pub allowed_services: BTreeSet<CdId>,
    pub cond: Expr,
    #[serde(rename = "toBeNotified")]
    pub to_be_notified: BTreeSet<JoinRef>,
    #[serde(rename = "toBeWaited")]
    pub to_be_waited: BTreeSet<JoinRef>,
}

impl CoordinationTuple {
    pub fn is_eps(&self) -> bool {
        self.op.is_none()
    }

    pub fn enters_join(&self) -> bool {
        !self.to_be_notified.is_empty() || !self.to_be_waited.is_empty()
    }
}

impl fmt::Display for CoordinationTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let set = |s: &BTreeSet<CdId>| {
            s.iter()
                .map(|c| format!("({c})"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let refs = |s: &BTreeSet<JoinRef>| {
            s.iter()
                .map(|r| format!("[{},({})]", r.state, r.cd))
                .collect::<Vec<_>>()
                .join(",")
        };
        write!(
            f,
            "<{}, {}, {}, {{{}}}, {}, {{{}}}, {{{}}}>",
            self.src,
            self.op.as_ref().map_or("ε", |t| t.as_str()),
            self.trg,
            set(&self.allowed_services),
            self.cond,
            refs(&self.to_be_notified),
            refs(&self.to_be_waited)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CoordinationModel {
    pub owner: CdId,
    pub tuples: BTreeSet<CoordinationTuple>,
}

#[derive(Debug, Error)]
pub enum CmError {
    #[error("model is not valid: {} violation(s), first: {}", .0.violations.len(), .0.violations[0])]
    InvalidModel(ValidationReport),
    #[error("malformed coordination model: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoordinationModel {
    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn tasks(&self) -> BTreeSet<&TaskName> {
        self.tuples.iter().filter_map(|t| t.op.as_ref()).collect()
    }

    pub fn outgoing<'a>(
        &'a self,
        s: &'a StateId,
    ) -> impl Iterator<Item = &'a CoordinationTuple> + 'a {
        self.tuples.iter().filter(move |t| &t.src == s)
    }

    /// Tasks allowed at `s`.
    pub fn ops_at<'a>(&'a self, s: &'a StateId) -> BTreeSet<&'a TaskName> {
        self.outgoing(s).filter_map(|t| t.op.as_ref()).collect()
    }

    /// Join states this delegate takes part in.
    pub fn join_states(&self) -> BTreeSet<&StateId> {
        self.tuples
            .iter()
            .filter(|t| t.enters_join())
            .map(|t| &t.trg)
            .collect()
    }

    /// Canonical dump: tuples sorted by src, op, trg.
    pub fn to_json(&self) -> String {
        let tuples: Vec<&CoordinationTuple> = self.tuples.iter().collect();
        serde_json::to_string_pretty(&tuples).expect("tuple serialization cannot fail")
    }

    pub fn from_json(owner: CdId, text: &str) -> Result<Self, CmError> {
        let tuples: Vec<CoordinationTuple> = serde_json::from_str(text)?;
        Ok(CoordinationModel {
            owner,
            tuples: tuples.into_iter().collect(),
        })
    }
}

impl fmt::Display for CoordinationModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "CM_{}:", self.owner)?;
        for t in &self.tuples {
            writeln!(f, "  {t}")?;
        }
        Ok(())
    }
}

/// Derived per-model facts shared by all generated CMs.
struct Projection<'a> {
    model: &'a Cefm,
    /// For each state, the pairs whose operation chains reach it.
    owners: BTreeMap<StateId, BTreeSet<CdId>>,
}

impl<'a> Projection<'a> {
    fn new(model: &'a Cefm) -> Self {
        let mut owners: BTreeMap<StateId, BTreeSet<CdId>> = BTreeMap::new();
        for (flow, op) in model.operations() {
            let cd = CdId {
                initiator: op.initiator.clone(),
                receiver: op.receiver.clone(),
            };
            for s in model.owned_region(&flow.to) {
                owners.entry(s).or_default().insert(cd.clone());
            }
        }
        Projection { model, owners }
    }

    /// Pairs other than `owner` whose operation leaves `s` directly.
    fn successors_at(&self, s: &StateId, owner: &CdId) -> BTreeSet<CdId> {
        self.model
            .outgoing(s)
            .filter_map(|f| f.label.operation())
            .map(|op| CdId {
                initiator: op.initiator.clone(),
                receiver: op.receiver.clone(),
            })
            .filter(|cd| cd != owner)
            .collect()
    }

    fn owners_of(&self, s: &StateId) -> impl Iterator<Item = &CdId> {
        self.owners.get(s).into_iter().flatten()
    }

    fn generate(&self, owner: &CdId) -> CoordinationModel {
        let model = self.model;
        let mut tuples = BTreeSet::new();
        for (flow, op) in model.operations() {
            if op.initiator != owner.initiator || op.receiver != owner.receiver {
                continue;
            }
            tuples.insert(CoordinationTuple {
                src: flow.from.clone(),
                op: Some(op.task.clone()),
                trg: flow.to.clone(),
                allowed_services: self.successors_at(&flow.to, owner),
                cond: Expr::True,
                to_be_notified: BTreeSet::new(),
                to_be_waited: BTreeSet::new(),
            });
            for x in model.owned_region(&flow.to) {
                for g in model.outgoing(&x) {
                    let cond = match &g.label {
                        FlowLabel::Op(_) => continue,
                        FlowLabel::Guard(e) => e.clone(),
                        FlowLabel::Eps => self.eps_cond(&x),
                    };
                    let (notified, waited) = self.join_sets(&x, &g.to);
                    tuples.insert(CoordinationTuple {
                        src: x.clone(),
                        op: None,
                        trg: g.to.clone(),
                        allowed_services: self.successors_at(&g.to, owner),
                        cond,
                        to_be_notified: notified,
                        to_be_waited: waited,
                    });
                }
            }
        }
        CoordinationModel {
            owner: owner.clone(),
            tuples,
        }
    }

    /// The ε exit of a loop is taken exactly when the entry guard fails.
    fn eps_cond(&self, x: &StateId) -> Expr {
        if self.model.kind(x) == Some(StateKind::Loop) {
            if let Some((guard, _, _)) = self.model.loop_parts(x) {
                return Expr::not(guard.clone());
            }
        }
        Expr::True
    }

    /// Notify and wait sets for the flow `pred -> join`. A delegate owning
    /// several branches lists itself and synchronizes its own threads
    /// through the same messages.
    fn join_sets(&self, pred: &StateId, join: &StateId) -> (BTreeSet<JoinRef>, BTreeSet<JoinRef>) {
        let mut notified = BTreeSet::new();
        let mut waited = BTreeSet::new();
        if self.model.kind(join) != Some(StateKind::Join) {
            return (notified, waited);
        }
        for f in self.model.incoming(join) {
            if &f.from == pred {
                continue;
            }
            for cd in self.owners_of(&f.from) {
                notified.insert(JoinRef {
                    state: pred.clone(),
                    cd: cd.clone(),
                });
                waited.insert(JoinRef {
                    state: f.from.clone(),
                    cd: cd.clone(),
                });
            }
        }
        (notified, waited)
    }
}

pub fn generate_cm(model: &Cefm, owner: &CdId) -> Result<CoordinationModel, CmError> {
    let report = validate_cefm(model);
    if !report.is_valid() {
        return Err(CmError::InvalidModel(report));
    }
    Ok(Projection::new(model).generate(owner))
}

/// One CM per pair that appears on some operation flow.
pub fn generate_all(model: &Cefm) -> Result<BTreeMap<CdId, CoordinationModel>, CmError> {
    let report = validate_cefm(model);
    if !report.is_valid() {
        return Err(CmError::InvalidModel(report));
    }
    let projection = Projection::new(model);
    let pairs: BTreeSet<CdId> = model
        .operations()
        .map(|(_, op)| CdId {
            initiator: op.initiator.clone(),
            receiver: op.receiver.clone(),
        })
        .collect();
    Ok(pairs
        .into_iter()
        .map(|cd| {
            let cm = projection.generate(&cd);
            (cd, cm)
        })
        .collect())
}

/// States at which a fresh activation of the delegate can begin: sources of
/// its operation tuples that its own tuples never lead to. The walk stops at
/// join states since only the join leader continues past them.
pub fn initial_wait_states(cm: &CoordinationModel) -> BTreeSet<StateId> {
    let joins = cm.join_states();
    let mut reached: BTreeSet<&StateId> = BTreeSet::new();
    let mut stack: Vec<&StateId> = cm
        .tuples
        .iter()
        .filter(|t| !t.is_eps())
        .map(|t| &t.trg)
        .collect();
    while let Some(s) = stack.pop() {
        if !reached.insert(s) || joins.contains(s) {
            continue;
        }
        stack.extend(cm.outgoing(s).map(|t| &t.trg));
    }
    cm.tuples
        .iter()
        .filter(|t| !t.is_eps() && !reached.contains(&t.src))
        .map(|t| t.src.clone())
        .collect()
}
