//! Omniscient checks over simulated runs.
//!
//! The oracle sees every delegate's state and every message in flight. It
//! classifies each forwarded operation as allowed or as one of six kinds of
//! undesired operation, checks the forwarded sequence against the token-game
//! semantics, and counts coordination messages.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::cm::{CdId, CoordinationModel};
use crate::delegate::{CoordMessage, NotifyKey};
use crate::interp::{InterpError, Marking, TokenGame};
use crate::model::{Cefm, FlowLabel, Operation, StateId, StateKind};
use crate::predicate::Environment;
use crate::scenario::Deployment;
use crate::sim::{Event, Policy, RunOutcome, SimError, Simulation, TraceEvent, World};

/// Checked in this order; the first that applies wins.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Classification {
    Allowed,
    UndesiredTask,
    InvalidAlternative,
    InvalidLoop,
    MissedLoop,
    MissedJoin,
    DeadlockingJoin,
}

impl Classification {
    pub const UNDESIRED: [Classification; 6] = [
        Classification::UndesiredTask,
        Classification::InvalidAlternative,
        Classification::InvalidLoop,
        Classification::MissedLoop,
        Classification::MissedJoin,
        Classification::DeadlockingJoin,
    ];
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub cd: CdId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub operation: Option<Operation>,
    /// State the delegate acted from.
    pub state: Option<StateId>,
    /// The alternative, loop or join state involved.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub related: Option<StateId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guard: Option<String>,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub classification: Classification,
    pub evidence: Evidence,
    /// Trace position of the forward, absent for end-of-run findings.
    pub seq: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ThreadView {
    pub at: StateId,
    pub waiting: Option<(StateId, BTreeSet<NotifyKey>)>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DelegateView {
    pub threads: Vec<ThreadView>,
    pub lingering: Vec<NotifyKey>,
}

/// Snapshot of everything the oracle may look at.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GlobalView {
    pub env: Environment,
    pub delegates: BTreeMap<CdId, DelegateView>,
    /// NOTIFYs travelling to each delegate.
    pub in_flight: BTreeMap<CdId, Vec<NotifyKey>>,
    /// How often each join predecessor was reached.
    pub arrivals: BTreeMap<StateId, u32>,
    /// How often each join was passed.
    pub passes: BTreeMap<StateId, u32>,
}

impl GlobalView {
    pub fn capture(world: &World, env: &Environment) -> Self {
        let mut delegates = BTreeMap::new();
        let mut in_flight = BTreeMap::new();
        for (cd, d) in &world.delegates {
            let threads = d
                .state()
                .threads
                .values()
                .map(|t| ThreadView {
                    at: t.at.clone(),
                    waiting: t.wait.as_ref().map(|w| (w.join.clone(), w.awaited.clone())),
                })
                .collect();
            delegates.insert(
                cd.clone(),
                DelegateView {
                    threads,
                    lingering: d.state().lingering.clone(),
                },
            );
            let notes: Vec<NotifyKey> = world
                .in_flight_to(cd)
                .filter_map(|m| match m {
                    CoordMessage::Notify(k) => Some(k.clone()),
                    _ => None,
                })
                .collect();
            in_flight.insert(cd.clone(), notes);
        }
        GlobalView {
            env: env.clone(),
            delegates,
            in_flight,
            ..Default::default()
        }
    }

    /// The delegate still lacks NOTIFYs for `join`.
    fn lacks_notify(&self, cd: &CdId, join: &StateId) -> bool {
        self.delegates.get(cd).is_some_and(|d| {
            d.lingering.iter().any(|k| &k.join == join)
                || d.threads.iter().any(|t| {
                    t.waiting
                        .as_ref()
                        .is_some_and(|(j, awaited)| j == join && !awaited.is_empty())
                })
        })
    }

    /// The delegate has a thread at `at` waiting for `join` that no message
    /// in flight can release.
    fn stuck_at(&self, cd: &CdId, at: &StateId, join: &StateId) -> bool {
        let flying = self.in_flight.get(cd);
        self.delegates.get(cd).is_some_and(|d| {
            d.threads.iter().any(|t| {
                &t.at == at
                    && t.waiting.as_ref().is_some_and(|(j, awaited)| {
                        j == join
                            && awaited
                                .iter()
                                .any(|k| !flying.is_some_and(|f| f.contains(k)))
                    })
            })
        })
    }

    /// The join was passed more often than one of its branches arrived.
    fn join_overtaken(&self, model: &Cefm, join: &StateId) -> bool {
        let passes = self.passes.get(join).copied().unwrap_or(0);
        model
            .incoming(join)
            .any(|f| self.arrivals.get(&f.from).copied().unwrap_or(0) < passes)
    }
}

/// Classifies one forwarded operation. `current` is the state the delegate
/// claims to have acted from; `None` means it acted from no state.
pub fn classify_operation(
    model: &Cefm,
    cm: &CoordinationModel,
    current: Option<&StateId>,
    op: &Operation,
    view: &GlobalView,
) -> Verdict {
    let cd = cm.owner.clone();
    let evidence = |related: Option<&StateId>, guard: Option<String>, detail: String| Evidence {
        cd: cd.clone(),
        operation: Some(op.clone()),
        state: current.cloned(),
        related: related.cloned(),
        guard,
        detail,
    };
    let verdict = |c, e| Verdict {
        classification: c,
        evidence: e,
        seq: None,
    };
    let owned = op.initiator == cd.initiator && op.receiver == cd.receiver;
    let s = match current {
        Some(s) if owned && cm.ops_at(s).contains(&op.task) => s,
        _ => {
            return verdict(
                Classification::UndesiredTask,
                evidence(None, None, format!("`{}` is not allowed here", op.task)),
            )
        }
    };
    let holds = |g: &crate::predicate::Expr| g.eval(&view.env).unwrap_or(false);
    for f in model.incoming(s) {
        if let FlowLabel::Guard(g) = &f.label {
            if model.kind(&f.from) == Some(StateKind::Alternative) && !holds(g) {
                return verdict(
                    Classification::InvalidAlternative,
                    evidence(
                        Some(&f.from),
                        Some(g.to_string()),
                        format!("guard false at {}", view.env),
                    ),
                );
            }
        }
    }
    for f in model.incoming(s) {
        if let FlowLabel::Guard(g) = &f.label {
            if model.kind(&f.from) == Some(StateKind::Loop) && !holds(g) {
                return verdict(
                    Classification::InvalidLoop,
                    evidence(
                        Some(&f.from),
                        Some(g.to_string()),
                        format!("loop entered at {}", view.env),
                    ),
                );
            }
        }
    }
    for f in model.incoming(s) {
        if f.label.is_eps() && model.kind(&f.from) == Some(StateKind::Loop) {
            if let Some((g, _, _)) = model.loop_parts(&f.from) {
                if holds(g) {
                    return verdict(
                        Classification::MissedLoop,
                        evidence(
                            Some(&f.from),
                            Some(g.to_string()),
                            format!("loop left at {}", view.env),
                        ),
                    );
                }
            }
        }
    }
    for f in model.incoming(s) {
        let join = &f.from;
        if f.label.is_eps()
            && model.kind(join) == Some(StateKind::Join)
            && (view.lacks_notify(&cd, join) || view.join_overtaken(model, join))
        {
            return verdict(
                Classification::MissedJoin,
                evidence(
                    Some(join),
                    None,
                    "join passed before all branches arrived".into(),
                ),
            );
        }
    }
    let after: Vec<&StateId> = model
        .outgoing(s)
        .filter(|f| f.label.operation() == Some(op))
        .map(|f| &f.to)
        .collect();
    for s1 in after {
        for f in model.outgoing(s1) {
            let join = &f.to;
            if !f.label.is_eps() || model.kind(join) != Some(StateKind::Join) {
                continue;
            }
            if !view.stuck_at(&cd, s1, join) {
                continue;
            }
            let waited = cm
                .outgoing(s1)
                .filter(|t| &t.trg == join)
                .flat_map(|t| t.to_be_waited.iter());
            let mut all_stuck = true;
            let mut any = false;
            for w in waited {
                any = true;
                all_stuck &= view.stuck_at(&w.cd, &w.state, join);
            }
            if any && all_stuck {
                return verdict(
                    Classification::DeadlockingJoin,
                    evidence(
                        Some(join),
                        None,
                        format!("every branch of {join} waits forever"),
                    ),
                );
            }
        }
    }
    verdict(Classification::Allowed, evidence(None, None, String::new()))
}

/// Follows a simulation step by step and classifies every forward.
pub struct Monitor<'a> {
    model: &'a Cefm,
    cms: &'a BTreeMap<CdId, CoordinationModel>,
    env: Environment,
    join_preds: BTreeSet<StateId>,
    joins: BTreeSet<StateId>,
    arrivals: BTreeMap<StateId, u32>,
    passes: BTreeMap<StateId, u32>,
    pub verdicts: Vec<Verdict>,
}

impl<'a> Monitor<'a> {
    pub fn new(deployment: &'a Deployment) -> Self {
        let model = deployment.model.as_ref();
        let joins: BTreeSet<StateId> = model
            .states()
            .iter()
            .filter(|(_, k)| **k == StateKind::Join)
            .map(|(s, _)| s.clone())
            .collect();
        let join_preds = joins
            .iter()
            .flat_map(|j| model.incoming(j).map(|f| f.from.clone()))
            .collect();
        Monitor {
            model,
            cms: &deployment.cms,
            env: deployment.environment.clone(),
            join_preds,
            joins,
            arrivals: BTreeMap::new(),
            passes: BTreeMap::new(),
            verdicts: Vec::new(),
        }
    }

    pub fn observe(&mut self, sim: &Simulation, range: Range<usize>) {
        let events = &sim.trace()[range];
        for e in events {
            if let Event::StateChange {
                from: Some(_),
                to: Some(to),
                ..
            } = &e.event
            {
                if self.join_preds.contains(to) {
                    *self.arrivals.entry(to.clone()).or_default() += 1;
                }
                if self.joins.contains(to) {
                    *self.passes.entry(to.clone()).or_default() += 1;
                }
            }
        }
        if !events.iter().any(|e| e.event.forwarded().is_some()) {
            return;
        }
        let mut view = GlobalView::capture(sim.world(), &self.env);
        view.arrivals = self.arrivals.clone();
        view.passes = self.passes.clone();
        for e in events {
            if let Event::Forward { cd, state, .. } = &e.event {
                let op = e.event.forwarded().expect("forward event");
                let empty;
                let cm = match self.cms.get(cd) {
                    Some(cm) => cm,
                    None => {
                        empty = CoordinationModel {
                            owner: cd.clone(),
                            tuples: BTreeSet::new(),
                        };
                        &empty
                    }
                };
                let mut v = classify_operation(self.model, cm, state.as_ref(), &op, &view);
                v.seq = Some(e.seq);
                self.verdicts.push(v);
            }
        }
    }

    /// End-of-run check: a deadlock in which every branch of a join waits
    /// for the others is reported as a deadlocking join.
    pub fn finish(&mut self, sim: &Simulation, outcome: &RunOutcome) {
        let RunOutcome::Deadlocked { waiting, .. } = outcome else {
            return;
        };
        let view = GlobalView::capture(sim.world(), &self.env);
        let mut reported: BTreeSet<StateId> = self
            .verdicts
            .iter()
            .filter(|v| v.classification == Classification::DeadlockingJoin)
            .filter_map(|v| v.evidence.related.clone())
            .collect();
        for w in waiting {
            if reported.contains(&w.join) || !view.stuck_at(&w.cd, &w.state, &w.join) {
                continue;
            }
            let Some(cm) = self.cms.get(&w.cd) else {
                continue;
            };
            let others: Vec<_> = cm
                .outgoing(&w.state)
                .filter(|t| t.trg == w.join)
                .flat_map(|t| t.to_be_waited.iter())
                .collect();
            if others
                .iter()
                .all(|o| view.stuck_at(&o.cd, &o.state, &w.join))
            {
                reported.insert(w.join.clone());
                self.verdicts.push(Verdict {
                    classification: Classification::DeadlockingJoin,
                    evidence: Evidence {
                        cd: w.cd.clone(),
                        operation: None,
                        state: Some(w.state.clone()),
                        related: Some(w.join.clone()),
                        guard: None,
                        detail: "run ended with every branch of the join waiting".into(),
                    },
                    seq: None,
                });
            }
        }
    }

    pub fn undesired(&self) -> impl Iterator<Item = &Verdict> {
        self.verdicts
            .iter()
            .filter(|v| v.classification != Classification::Allowed)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Conformance {
    Conformant,
    Violation {
        /// Position in the operation sequence; equal to its length when the
        /// sequence is a valid prefix but not a complete run.
        index: usize,
        seq: Option<u64>,
        prefix: Vec<Operation>,
        reason: String,
    },
}

impl Conformance {
    pub fn is_conformant(&self) -> bool {
        matches!(self, Conformance::Conformant)
    }
}

/// Checks that the forwarded operations of `trace` form a prefix of some
/// run of the model, and a complete run when `complete` is set.
pub fn check_trace_conformance(
    trace: &[TraceEvent],
    model: &Cefm,
    env: &Environment,
    complete: bool,
) -> Result<Conformance, InterpError> {
    let ops: Vec<(Option<u64>, Operation)> = trace
        .iter()
        .filter_map(|e| e.event.forwarded().map(|op| (Some(e.seq), op)))
        .collect();
    check_sequence(&ops, model, env, complete)
}

/// Same check over a bare operation sequence.
pub fn check_operations(
    ops: &[Operation],
    model: &Cefm,
    env: &Environment,
    complete: bool,
) -> Result<Conformance, InterpError> {
    let ops: Vec<(Option<u64>, Operation)> = ops.iter().map(|o| (None, o.clone())).collect();
    check_sequence(&ops, model, env, complete)
}

fn check_sequence(
    ops: &[(Option<u64>, Operation)],
    model: &Cefm,
    env: &Environment,
    complete: bool,
) -> Result<Conformance, InterpError> {
    let game = TokenGame::new(model, env, None);
    let mut current: BTreeSet<Marking> = game.start()?.into_iter().collect();
    for (index, (seq, op)) in ops.iter().enumerate() {
        let mut next = BTreeSet::new();
        for m in &current {
            next.extend(game.fire_op(m, op)?);
        }
        if next.is_empty() {
            return Ok(Conformance::Violation {
                index,
                seq: *seq,
                prefix: ops[..=index].iter().map(|(_, o)| o.clone()).collect(),
                reason: format!("`{op}` cannot happen here"),
            });
        }
        current = next;
    }
    if complete && !current.iter().any(Marking::is_complete) {
        return Ok(Conformance::Violation {
            index: ops.len(),
            seq: None,
            prefix: ops.iter().map(|(_, o)| o.clone()).collect(),
            reason: "run ended before the choreography finished".into(),
        });
    }
    Ok(Conformance::Conformant)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overhead {
    pub updates: usize,
    pub notifies: usize,
    pub bound: usize,
}

impl Overhead {
    pub fn total(&self) -> usize {
        self.updates + self.notifies
    }

    pub fn within_bound(&self) -> bool {
        self.total() <= self.bound
    }
}

/// Counts UPDATE and NOTIFY messages sent between delegates. The bound is
/// the number of operation flows times the number of roles.
pub fn coordination_overhead(trace: &[TraceEvent], model: &Cefm) -> Overhead {
    let mut updates = 0;
    let mut notifies = 0;
    for e in trace {
        match e.event {
            Event::Update { .. } => updates += 1,
            Event::Notify { .. } => notifies += 1,
            _ => {}
        }
    }
    Overhead {
        updates,
        notifies,
        bound: model.operations().count() * model.roles().len(),
    }
}

/// A simulation run together with all oracle findings.
#[derive(Clone, Debug)]
pub struct CheckedRun {
    pub seed: u64,
    pub policy: Policy,
    pub trace: Vec<TraceEvent>,
    pub outcome: RunOutcome,
    pub verdicts: Vec<Verdict>,
    pub conformance: Conformance,
    pub overhead: Overhead,
}

impl CheckedRun {
    pub fn undesired(&self) -> impl Iterator<Item = &Verdict> {
        self.verdicts
            .iter()
            .filter(|v| v.classification != Classification::Allowed)
    }

    pub fn operations(&self) -> Vec<Operation> {
        crate::sim::forwarded_operations(&self.trace)
    }

    /// Completed, nothing undesired, and conformant.
    pub fn is_clean(&self) -> bool {
        self.outcome.is_completed()
            && self.undesired().next().is_none()
            && self.conformance.is_conformant()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Interp(#[from] InterpError),
}

pub fn run_checked(
    deployment: &Deployment,
    seed: u64,
    policy: Policy,
    max_events: u64,
) -> Result<CheckedRun, CheckError> {
    let mut sim = Simulation::new(deployment, seed, policy);
    let mut monitor = Monitor::new(deployment);
    let outcome = sim.run_observed(max_events, |s, r| monitor.observe(s, r))?;
    monitor.finish(&sim, &outcome);
    let verdicts = std::mem::take(&mut monitor.verdicts);
    let conformance = check_trace_conformance(
        sim.trace(),
        &deployment.model,
        &deployment.environment,
        outcome.is_completed(),
    )?;
    let overhead = coordination_overhead(sim.trace(), &deployment.model);
    Ok(CheckedRun {
        seed,
        policy,
        trace: sim.into_trace(),
        outcome,
        verdicts,
        conformance,
        overhead,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OverheadStats {
    pub max_total: usize,
    pub mean_total: f64,
    pub bound: usize,
    pub runs_over_bound: usize,
}

/// Aggregate over many runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub verdicts: BTreeMap<Classification, usize>,
    pub outcomes: BTreeMap<String, usize>,
    pub conformant: usize,
    pub overhead: OverheadStats,
    /// First few undesired verdicts, for diagnosis.
    pub examples: Vec<Verdict>,
}

impl Report {
    const EXAMPLES: usize = 20;

    pub fn add(&mut self, run: &CheckedRun) {
        self.runs += 1;
        if !self.seeds.contains(&run.seed) {
            self.seeds.push(run.seed);
        }
        for v in &run.verdicts {
            *self.verdicts.entry(v.classification).or_default() += 1;
            if v.classification != Classification::Allowed && self.examples.len() < Self::EXAMPLES {
                self.examples.push(v.clone());
            }
        }
        let status = match &run.outcome {
            RunOutcome::Completed => "completed",
            RunOutcome::Deadlocked { .. } => "deadlocked",
            RunOutcome::Budget => "budget",
        };
        *self.outcomes.entry(status.into()).or_default() += 1;
        if run.conformance.is_conformant() {
            self.conformant += 1;
        }
        let o = &mut self.overhead;
        let total = run.overhead.total();
        o.bound = run.overhead.bound;
        o.max_total = o.max_total.max(total);
        o.mean_total += (total as f64 - o.mean_total) / self.runs as f64;
        if !run.overhead.within_bound() {
            o.runs_over_bound += 1;
        }
    }

    pub fn undesired(&self) -> usize {
        self.verdicts
            .iter()
            .filter(|(c, _)| **c != Classification::Allowed)
            .map(|(_, n)| n)
            .sum()
    }
}
