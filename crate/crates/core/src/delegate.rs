//! Coordination delegate: the reactive proxy enforcing one coordination model.
//!
//! A delegate supervises any number of threads, one per parallel token of the
//! choreography that its model covers. Business requests fire operation
//! tuples; UPDATE messages start threads; NOTIFY messages release threads
//! waiting at joins. After every move the delegate walks ε tuples on its own
//! (step over), sending UPDATEs to the delegates that act next.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cm::{CdId, CoordinationModel, CoordinationTuple};
use crate::model::{Cefm, Role, StateId, StateKind, TaskName};
use crate::participants::SessionId;
use crate::predicate::{Environment, PredicateError};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordMessage {
    BusinessRequest { task: TaskName, from: Role },
    BusinessForward { task: TaskName, to: Role },
    Update { state: StateId },
    Notify(NotifyKey),
}

/// NOTIFY(predecessor, sender, join).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NotifyKey {
    pub predecessor: StateId,
    pub sender: CdId,
    pub join: StateId,
}

/// Larger value means higher priority.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Priority(pub u32);

/// Deliberate protocol bugs, used to check that the oracle notices them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Forwards requests even when no tuple allows them.
    ForwardWithoutCheck,
    /// At a guarded branch, takes a tuple whose condition is false.
    SkipGuardCheck,
    /// Always leaves loops, whatever the guard says.
    IgnoreLoopGuard,
    /// Never sends NOTIFY messages.
    SkipNotify,
    /// Passes joins without waiting for NOTIFY messages.
    SkipWait,
    /// Believes it has the highest priority at every join.
    WrongPriority,
}

pub type ThreadId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retire {
    Final,
    HandOff,
    JoinFollower,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reply {
    Forwarded,
    Blocked,
}

/// Observable consequences of a handler, in the order they happened.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Effect {
    Forward {
        task: TaskName,
        receiver: Role,
        state: Option<StateId>,
        session: SessionId,
    },
    Send {
        to: CdId,
        message: CoordMessage,
    },
    Moved {
        thread: ThreadId,
        from: Option<StateId>,
        to: StateId,
    },
    Retired {
        thread: ThreadId,
        at: StateId,
        reason: Retire,
    },
    Waiting {
        thread: ThreadId,
        join: StateId,
        awaiting: Vec<NotifyKey>,
    },
    Blocked {
        task: TaskName,
        session: SessionId,
    },
    Unblocked {
        task: TaskName,
        session: SessionId,
    },
    Buffered {
        message: CoordMessage,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DelegateError {
    #[error("task `{0}` does not occur in this coordination model")]
    UnknownTask(TaskName),
    #[error("no condition out of `{0}` holds")]
    NoTrueGuard(StateId),
    #[error("several conditions out of `{0}` hold")]
    AmbiguousGuard(StateId),
    #[error("condition at `{state}` cannot be evaluated: {source}")]
    Guard {
        state: StateId,
        source: PredicateError,
    },
}

/// Static part of a delegate, shared between clones.
#[derive(Debug)]
pub struct DelegateConfig {
    pub owner: CdId,
    pub cm: CoordinationModel,
    pub priority: Priority,
    pub peers: BTreeMap<CdId, Priority>,
    pub env: Environment,
    pub fault: Option<Fault>,
    final_state: StateId,
    by_src: BTreeMap<StateId, Vec<CoordinationTuple>>,
    tasks: BTreeSet<TaskName>,
    op_srcs: BTreeSet<StateId>,
    downstream: BTreeMap<StateId, BTreeSet<StateId>>,
    loop_exits: BTreeMap<StateId, StateId>,
}

impl DelegateConfig {
    pub fn new(
        model: &Cefm,
        cm: CoordinationModel,
        priority: Priority,
        peers: BTreeMap<CdId, Priority>,
        env: Environment,
        fault: Option<Fault>,
    ) -> Self {
        let mut by_src: BTreeMap<StateId, Vec<CoordinationTuple>> = BTreeMap::new();
        for t in &cm.tuples {
            by_src.entry(t.src.clone()).or_default().push(t.clone());
        }
        let tasks = cm.tasks().into_iter().cloned().collect();
        let op_srcs = cm
            .tuples
            .iter()
            .filter(|t| !t.is_eps())
            .map(|t| t.src.clone())
            .collect();
        let mut downstream = BTreeMap::new();
        for j in cm.join_states() {
            let mut seen = BTreeSet::new();
            let mut stack = vec![j.clone()];
            while let Some(s) = stack.pop() {
                if !seen.insert(s.clone()) {
                    continue;
                }
                for t in by_src.get(&s).into_iter().flatten() {
                    stack.push(t.trg.clone());
                }
            }
            downstream.insert(j.clone(), seen);
        }
        let loop_exits = model
            .states()
            .iter()
            .filter(|(_, k)| **k == StateKind::Loop)
            .filter_map(|(l, _)| {
                model
                    .loop_parts(l)
                    .map(|(_, _, exit)| (l.clone(), exit.clone()))
            })
            .collect();
        DelegateConfig {
            owner: cm.owner.clone(),
            cm,
            priority,
            peers,
            env,
            fault,
            final_state: model.final_state().clone(),
            by_src,
            tasks,
            op_srcs,
            downstream,
            loop_exits,
        }
    }

    fn outgoing(&self, s: &StateId) -> &[CoordinationTuple] {
        self.by_src.get(s).map(Vec::as_slice).unwrap_or(&[])
    }

    fn has_fault(&self, f: Fault) -> bool {
        self.fault == Some(f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct JoinWait {
    pub join: StateId,
    pub pred: StateId,
    pub awaited: BTreeSet<NotifyKey>,
    participants: BTreeSet<CdId>,
    own_preds: BTreeSet<StateId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Thread {
    pub at: StateId,
    pub wait: Option<JoinWait>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Pending {
    pub task: TaskName,
    pub session: SessionId,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct DelegateState {
    pub threads: BTreeMap<ThreadId, Thread>,
    next_thread: ThreadId,
    pub pending: VecDeque<Pending>,
    pub update_buffer: VecDeque<StateId>,
    pub notify_buffer: Vec<NotifyKey>,
    /// Waits skipped by a faulty delegate; matching NOTIFYs are absorbed.
    pub lingering: Vec<NotifyKey>,
}

/// A delegate instance. Equality and hashing look at the mutable state only.
#[derive(Clone, Debug)]
pub struct Delegate {
    config: Arc<DelegateConfig>,
    state: DelegateState,
}

impl PartialEq for Delegate {
    fn eq(&self, other: &Self) -> bool {
        self.state == other.state
    }
}

impl Eq for Delegate {}

impl std::hash::Hash for Delegate {
    fn hash<H: std::hash::Hasher>(&self, h: &mut H) {
        self.state.hash(h)
    }
}

impl Delegate {
    pub fn new(config: Arc<DelegateConfig>) -> Self {
        Delegate {
            config,
            state: DelegateState::default(),
        }
    }

    pub fn config(&self) -> &DelegateConfig {
        &self.config
    }

    pub fn owner(&self) -> &CdId {
        &self.config.owner
    }

    pub fn state(&self) -> &DelegateState {
        &self.state
    }

    /// Current states of all threads, sorted.
    pub fn active_states(&self) -> Vec<StateId> {
        let mut v: Vec<StateId> = self.state.threads.values().map(|t| t.at.clone()).collect();
        v.sort();
        v
    }

    /// NOTIFYs some thread still waits for.
    pub fn awaited_notifies(&self) -> BTreeSet<NotifyKey> {
        self.state
            .threads
            .values()
            .filter_map(|t| t.wait.as_ref())
            .flat_map(|w| w.awaited.iter().cloned())
            .collect()
    }

    pub fn is_idle(&self) -> bool {
        let s = &self.state;
        s.threads.is_empty() && s.pending.is_empty()
    }

    /// A business request from the supervised initiator.
    pub fn handle_request(
        &mut self,
        task: &TaskName,
        session: SessionId,
    ) -> Result<(Reply, Vec<Effect>), DelegateError> {
        if !self.config.tasks.contains(task) && !self.config.has_fault(Fault::ForwardWithoutCheck) {
            return Err(DelegateError::UnknownTask(task.clone()));
        }
        let mut fx = Vec::new();
        if let Some((tid, tuple)) = self.enabled(task) {
            self.fire(tid, &tuple, session, &mut fx)?;
            self.settle(&mut fx)?;
            return Ok((Reply::Forwarded, fx));
        }
        if self.config.has_fault(Fault::ForwardWithoutCheck) {
            fx.push(Effect::Forward {
                task: task.clone(),
                receiver: self.config.owner.receiver.clone(),
                state: None,
                session,
            });
            return Ok((Reply::Forwarded, fx));
        }
        self.state.pending.push_back(Pending {
            task: task.clone(),
            session,
        });
        fx.push(Effect::Blocked {
            task: task.clone(),
            session,
        });
        Ok((Reply::Blocked, fx))
    }

    /// The choreography reached `state`.
    pub fn handle_update(&mut self, state: &StateId) -> Result<Vec<Effect>, DelegateError> {
        let mut fx = Vec::new();
        if self.accepts_update(state) {
            self.activate(state, &mut fx)?;
        } else {
            self.state.update_buffer.push_back(state.clone());
            fx.push(Effect::Buffered {
                message: CoordMessage::Update {
                    state: state.clone(),
                },
            });
        }
        self.settle(&mut fx)?;
        Ok(fx)
    }

    /// A parallel branch reached a predecessor of a join.
    pub fn handle_notify(&mut self, key: &NotifyKey) -> Result<Vec<Effect>, DelegateError> {
        let mut fx = Vec::new();
        if let Some(i) = self.state.lingering.iter().position(|k| k == key) {
            self.state.lingering.remove(i);
            return Ok(fx);
        }
        let waiting = self.state.threads.iter().find_map(|(tid, t)| {
            t.wait
                .as_ref()
                .filter(|w| w.awaited.contains(key))
                .map(|_| *tid)
        });
        match waiting {
            Some(tid) => {
                let thread = self.state.threads.get_mut(&tid).expect("found above");
                let wait = thread.wait.as_mut().expect("found above");
                wait.awaited.remove(key);
                if wait.awaited.is_empty() {
                    let wait = thread.wait.take().expect("checked above");
                    if self.pass_join(tid, &wait, &mut fx) {
                        self.step_over(tid, &mut fx)?;
                    }
                }
            }
            None => {
                self.state.notify_buffer.push(key.clone());
                fx.push(Effect::Buffered {
                    message: CoordMessage::Notify(key.clone()),
                });
            }
        }
        self.settle(&mut fx)?;
        Ok(fx)
    }

    fn enabled(&self, task: &TaskName) -> Option<(ThreadId, CoordinationTuple)> {
        self.state.threads.iter().find_map(|(tid, t)| {
            if t.wait.is_some() {
                return None;
            }
            self.config
                .outgoing(&t.at)
                .iter()
                .find(|tu| tu.op.as_ref() == Some(task))
                .map(|tu| (*tid, tu.clone()))
        })
    }

    fn accepts_update(&self, s: &StateId) -> bool {
        if !self.config.op_srcs.contains(s) {
            return false;
        }
        // Hold back activations past a join this delegate is still waiting at.
        !self.state.threads.values().any(|t| {
            t.wait.as_ref().is_some_and(|w| {
                self.config
                    .downstream
                    .get(&w.join)
                    .is_some_and(|d| d.contains(s))
            })
        })
    }

    fn activate(&mut self, s: &StateId, fx: &mut Vec<Effect>) -> Result<(), DelegateError> {
        let tid = self.spawn(s.clone());
        fx.push(Effect::Moved {
            thread: tid,
            from: None,
            to: s.clone(),
        });
        self.step_over(tid, fx)
    }

    fn spawn(&mut self, at: StateId) -> ThreadId {
        let tid = self.state.next_thread;
        self.state.next_thread += 1;
        self.state.threads.insert(tid, Thread { at, wait: None });
        tid
    }

    /// Replays buffered UPDATEs and pending requests until nothing changes.
    fn settle(&mut self, fx: &mut Vec<Effect>) -> Result<(), DelegateError> {
        loop {
            if let Some(i) = self
                .state
                .update_buffer
                .iter()
                .position(|s| self.accepts_update(s))
            {
                let s = self.state.update_buffer.remove(i).expect("index in range");
                self.activate(&s, fx)?;
                continue;
            }
            let ready = self
                .state
                .pending
                .iter()
                .enumerate()
                .find_map(|(i, p)| self.enabled(&p.task).map(|e| (i, e)));
            if let Some((i, (tid, tuple))) = ready {
                let p = self.state.pending.remove(i).expect("index in range");
                fx.push(Effect::Unblocked {
                    task: p.task.clone(),
                    session: p.session,
                });
                self.fire(tid, &tuple, p.session, fx)?;
                continue;
            }
            return Ok(());
        }
    }

    fn fire(
        &mut self,
        tid: ThreadId,
        tuple: &CoordinationTuple,
        session: SessionId,
        fx: &mut Vec<Effect>,
    ) -> Result<(), DelegateError> {
        fx.push(Effect::Forward {
            task: tuple.op.clone().expect("operation tuple"),
            receiver: self.config.owner.receiver.clone(),
            state: Some(tuple.src.clone()),
            session,
        });
        self.move_thread(tid, &tuple.trg, fx);
        self.send_updates(tuple, fx);
        self.step_over(tid, fx)
    }

    fn move_thread(&mut self, tid: ThreadId, to: &StateId, fx: &mut Vec<Effect>) {
        let t = self.state.threads.get_mut(&tid).expect("live thread");
        let from = std::mem::replace(&mut t.at, to.clone());
        fx.push(Effect::Moved {
            thread: tid,
            from: Some(from),
            to: to.clone(),
        });
    }

    fn retire(&mut self, tid: ThreadId, reason: Retire, fx: &mut Vec<Effect>) {
        if let Some(t) = self.state.threads.remove(&tid) {
            fx.push(Effect::Retired {
                thread: tid,
                at: t.at,
                reason,
            });
        }
    }

    fn send_updates(&self, tuple: &CoordinationTuple, fx: &mut Vec<Effect>) {
        for cd in &tuple.allowed_services {
            fx.push(Effect::Send {
                to: cd.clone(),
                message: CoordMessage::Update {
                    state: tuple.trg.clone(),
                },
            });
        }
    }

    /// Walks ε tuples from the thread's state until it rests before an
    /// operation, waits at a join, hands off, or finishes. Several enabled
    /// ε tuples mean a fork: each extra one gets its own thread.
    fn step_over(&mut self, first: ThreadId, fx: &mut Vec<Effect>) -> Result<(), DelegateError> {
        let mut work = vec![first];
        while let Some(tid) = work.pop() {
            while let Some(at) = self.state.threads.get(&tid).map(|t| t.at.clone()) {
                if at == self.config.final_state {
                    self.retire(tid, Retire::Final, fx);
                    break;
                }
                let outs = self.config.outgoing(&at);
                if outs.is_empty() {
                    self.retire(tid, Retire::HandOff, fx);
                    break;
                }
                let eps: Vec<&CoordinationTuple> = outs.iter().filter(|t| t.is_eps()).collect();
                if eps.is_empty() {
                    break;
                }
                let chosen: Vec<CoordinationTuple> =
                    self.choose(&at, &eps)?.into_iter().cloned().collect();
                for extra in &chosen[1..] {
                    let sibling = self.spawn(at.clone());
                    if self.advance(sibling, extra, fx) {
                        work.push(sibling);
                    }
                }
                if !self.advance(tid, &chosen[0], fx) {
                    break;
                }
            }
        }
        Ok(())
    }

    fn choose<'t>(
        &self,
        at: &StateId,
        eps: &[&'t CoordinationTuple],
    ) -> Result<Vec<&'t CoordinationTuple>, DelegateError> {
        let eval = |t: &CoordinationTuple| {
            t.cond
                .eval(&self.config.env)
                .map_err(|source| DelegateError::Guard {
                    state: at.clone(),
                    source,
                })
        };
        let guarded = eps.iter().any(|t| !t.cond.is_true_literal());
        if guarded && self.config.has_fault(Fault::SkipGuardCheck) {
            for t in eps {
                if !eval(t)? {
                    return Ok(vec![*t]);
                }
            }
            return Ok(vec![eps[0]]);
        }
        if self.config.has_fault(Fault::IgnoreLoopGuard) {
            if let Some(exit) = self.config.loop_exits.get(at) {
                if let Some(t) = eps.iter().find(|t| &t.trg == exit) {
                    return Ok(vec![*t]);
                }
            }
        }
        let mut enabled = Vec::new();
        for t in eps {
            if eval(t)? {
                enabled.push(*t);
            }
        }
        if enabled.is_empty() {
            return Err(DelegateError::NoTrueGuard(at.clone()));
        }
        if enabled.len() > 1 && guarded {
            return Err(DelegateError::AmbiguousGuard(at.clone()));
        }
        Ok(enabled)
    }

    /// Takes one ε tuple. Returns whether the thread keeps walking.
    fn advance(&mut self, tid: ThreadId, tuple: &CoordinationTuple, fx: &mut Vec<Effect>) -> bool {
        if !tuple.enters_join() {
            self.move_thread(tid, &tuple.trg, fx);
            self.send_updates(tuple, fx);
            return true;
        }
        let owner = self.config.owner.clone();
        let join = tuple.trg.clone();
        if !self.config.has_fault(Fault::SkipNotify) {
            for n in &tuple.to_be_notified {
                fx.push(Effect::Send {
                    to: n.cd.clone(),
                    message: CoordMessage::Notify(NotifyKey {
                        predecessor: n.state.clone(),
                        sender: owner.clone(),
                        join: join.clone(),
                    }),
                });
            }
        }
        let mut awaited: BTreeSet<NotifyKey> = tuple
            .to_be_waited
            .iter()
            .map(|w| NotifyKey {
                predecessor: w.state.clone(),
                sender: w.cd.clone(),
                join: join.clone(),
            })
            .collect();
        awaited.retain(
            |k| match self.state.notify_buffer.iter().position(|b| b == k) {
                Some(i) => {
                    self.state.notify_buffer.remove(i);
                    false
                }
                None => true,
            },
        );
        let mut participants: BTreeSet<CdId> =
            tuple.to_be_waited.iter().map(|w| w.cd.clone()).collect();
        participants.insert(owner.clone());
        let mut own_preds: BTreeSet<StateId> = tuple
            .to_be_waited
            .iter()
            .filter(|w| w.cd == owner)
            .map(|w| w.state.clone())
            .collect();
        own_preds.insert(tuple.src.clone());
        let wait = JoinWait {
            join,
            pred: tuple.src.clone(),
            awaited,
            participants,
            own_preds,
        };
        if !wait.awaited.is_empty() {
            if self.config.has_fault(Fault::SkipWait) {
                self.state.lingering.extend(wait.awaited.iter().cloned());
            } else {
                fx.push(Effect::Waiting {
                    thread: tid,
                    join: wait.join.clone(),
                    awaiting: wait.awaited.iter().cloned().collect(),
                });
                self.state.threads.get_mut(&tid).expect("live thread").wait = Some(wait);
                return false;
            }
        }
        self.pass_join(tid, &wait, fx)
    }

    /// All NOTIFYs are in. Only the highest-priority delegate moves into the
    /// join, and within it only the thread at the smallest predecessor.
    fn pass_join(&mut self, tid: ThreadId, wait: &JoinWait, fx: &mut Vec<Effect>) -> bool {
        let me = self.config.priority;
        let leader = self.config.has_fault(Fault::WrongPriority)
            || wait
                .participants
                .iter()
                .filter(|c| **c != self.config.owner)
                .all(|c| self.config.peers.get(c).copied().unwrap_or(Priority(0)) < me);
        let designated = wait.own_preds.first() == Some(&wait.pred);
        if leader && designated {
            self.move_thread(tid, &wait.join, fx);
            true
        } else {
            self.retire(tid, Retire::JoinFollower, fx);
            false
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cm::generate_all;
    use crate::model::CefmBuilder;

    fn single_op() -> (Cefm, CoordinationModel) {
        let m = CefmBuilder::new()
            .state("s", StateKind::Plain)
            .state("u", StateKind::Plain)
            .eps("Initial", "s")
            .op("s", "A", "t", "B", "u")
            .eps("u", "Final")
            .build()
            .unwrap();
        let cm = generate_all(&m)
            .unwrap()
            .remove(&CdId::new("A", "B"))
            .unwrap();
        (m, cm)
    }

    fn delegate(m: &Cefm, cm: CoordinationModel) -> Delegate {
        Delegate::new(Arc::new(DelegateConfig::new(
            m,
            cm,
            Priority(1),
            BTreeMap::new(),
            Environment::new(),
            None,
        )))
    }

    #[test]
    fn unknown_task_is_an_error() {
        let (m, cm) = single_op();
        let mut d = delegate(&m, cm);
        let err = d.handle_request(&"nope".into(), SessionId(0)).unwrap_err();
        assert_eq!(err, DelegateError::UnknownTask("nope".into()));
    }

    #[test]
    fn request_before_update_blocks_then_forwards() {
        let (m, cm) = single_op();
        let mut d = delegate(&m, cm);
        let (reply, _) = d.handle_request(&"t".into(), SessionId(0)).unwrap();
        assert_eq!(reply, Reply::Blocked);
        assert_eq!(d.state().pending.len(), 1);
        let fx = d.handle_update(&"s".into()).unwrap();
        assert!(fx.iter().any(|e| matches!(e, Effect::Unblocked { .. })));
        assert!(fx.iter().any(|e| matches!(e, Effect::Forward { .. })));
        assert!(d.is_idle(), "thread walks to the final state and retires");
    }

    #[test]
    fn unexpected_update_is_buffered() {
        let (m, cm) = single_op();
        let mut d = delegate(&m, cm);
        let fx = d.handle_update(&"u".into()).unwrap();
        assert!(matches!(fx[..], [Effect::Buffered { .. }]));
        assert!(d.active_states().is_empty());
        assert_eq!(d.state().update_buffer.len(), 1);
    }
}
