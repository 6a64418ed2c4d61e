//! Deterministic discrete-event simulation of delegates and participants.
//!
//! Participants call their delegates synchronously; delegates talk to each
//! other over reliable FIFO channels. At every step the scheduler picks one
//! runnable session or one non-empty channel, and the target handles it
//! atomically. A run stops when nothing is deliverable.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cm::CdId;
use crate::delegate::{
    CoordMessage, Delegate, DelegateError, Effect, NotifyKey, Reply, Retire, ThreadId,
};
use crate::model::{Operation, Role, StateId, TaskName};
use crate::participants::{expand_scripts, Session, SessionId};
use crate::scenario::Deployment;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Policy {
    #[default]
    #[serde(rename = "roundrobin")]
    RoundRobin,
    #[serde(rename = "random")]
    SeededRandom,
}

impl std::str::FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "roundrobin" => Ok(Policy::RoundRobin),
            "random" => Ok(Policy::SeededRandom),
            other => Err(format!("unknown policy `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Endpoint {
    Enactment,
    Delegate(CdId),
    Session(SessionId),
}

/// One trace entry; `at` names the endpoint where it happened.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub at: String,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum Event {
    Request {
        session: String,
        cd: CdId,
        task: TaskName,
    },
    Forward {
        cd: CdId,
        task: TaskName,
        from: Role,
        to: Role,
        state: Option<StateId>,
        session: String,
    },
    Reject {
        cd: Option<CdId>,
        task: TaskName,
        session: String,
        reason: String,
    },
    Block {
        cd: CdId,
        task: TaskName,
        session: String,
    },
    Unblock {
        cd: CdId,
        task: TaskName,
        session: String,
    },
    Update {
        from: CdId,
        to: CdId,
        state: StateId,
    },
    Notify {
        from: CdId,
        to: CdId,
        predecessor: StateId,
        join: StateId,
    },
    Deliver {
        from: String,
        to: CdId,
        message: CoordMessage,
    },
    StateChange {
        cd: CdId,
        thread: ThreadId,
        from: Option<StateId>,
        to: Option<StateId>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        retired: Option<Retire>,
    },
    Wait {
        cd: CdId,
        thread: ThreadId,
        join: StateId,
        awaiting: Vec<NotifyKey>,
    },
    Buffer {
        cd: CdId,
        message: CoordMessage,
    },
}

impl Event {
    /// The business operation this event forwards, if any.
    pub fn forwarded(&self) -> Option<Operation> {
        match self {
            Event::Forward { task, from, to, .. } => Some(Operation {
                initiator: from.clone(),
                task: task.clone(),
                receiver: to.clone(),
            }),
            _ => None,
        }
    }
}

/// Operation sequence of a trace.
pub fn forwarded_operations(trace: &[TraceEvent]) -> Vec<Operation> {
    trace.iter().filter_map(|e| e.event.forwarded()).collect()
}

pub fn write_trace(trace: &[TraceEvent], mut out: impl Write) -> std::io::Result<()> {
    for e in trace {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace(input: impl BufRead) -> Result<Vec<TraceEvent>, SimError> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| SimError::Trace(format!("line {}: {e}", n + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let e = serde_json::from_str(&line)
            .map_err(|e| SimError::Trace(format!("line {}: {e}", n + 1)))?;
        out.push(e);
    }
    Ok(out)
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("delegate {cd} failed: {source}")]
    Delegate { cd: CdId, source: DelegateError },
    #[error("message for {0}, which has no delegate")]
    NoDelegate(CdId),
    #[error("state space exceeds {0} configurations")]
    StateSpace(usize),
    #[error("malformed trace: {0}")]
    Trace(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaitingThread {
    pub cd: CdId,
    pub state: StateId,
    pub join: StateId,
    pub awaiting: Vec<NotifyKey>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockedSession {
    pub session: String,
    pub cd: CdId,
    pub task: TaskName,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunOutcome {
    Completed,
    Deadlocked {
        waiting: Vec<WaitingThread>,
        blocked: Vec<BlockedSession>,
    },
    Budget,
}

impl RunOutcome {
    pub fn is_completed(&self) -> bool {
        matches!(self, RunOutcome::Completed)
    }
}

impl fmt::Display for RunOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunOutcome::Completed => f.write_str("completed"),
            RunOutcome::Budget => f.write_str("budget exhausted"),
            RunOutcome::Deadlocked { waiting, blocked } => {
                write!(f, "deadlocked")?;
                for w in waiting {
                    write!(f, "; {} waits at {} for join {}", w.cd, w.state, w.join)?;
                }
                for b in blocked {
                    write!(f, "; {} blocked on {} ({})", b.session, b.cd, b.task)?;
                }
                Ok(())
            }
        }
    }
}

/// A schedulable step.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Choice {
    Issue(SessionId),
    Deliver(Endpoint, CdId),
}

/// The complete mutable state of a simulation.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct World {
    pub delegates: BTreeMap<CdId, Delegate>,
    pub sessions: Vec<Session>,
    pub channels: BTreeMap<(Endpoint, CdId), VecDeque<CoordMessage>>,
}

impl World {
    pub fn new(deployment: &Deployment, sessions: Vec<Session>) -> Self {
        let delegates = deployment
            .configs
            .iter()
            .map(|(cd, c)| (cd.clone(), Delegate::new(Arc::clone(c))))
            .collect();
        let mut channels: BTreeMap<(Endpoint, CdId), VecDeque<CoordMessage>> = BTreeMap::new();
        for (cd, state) in &deployment.bootstrap {
            channels
                .entry((Endpoint::Enactment, cd.clone()))
                .or_default()
                .push_back(CoordMessage::Update {
                    state: state.clone(),
                });
        }
        World {
            delegates,
            sessions,
            channels,
        }
    }

    fn runnable(&self, s: &Session) -> bool {
        s.next_request().is_some()
            && s.trigger
                .is_none_or(|t| self.sessions[t.session.0 as usize].completed >= t.after)
    }

    /// Enabled steps in canonical order.
    pub fn choices(&self) -> Vec<Choice> {
        let mut out: Vec<Choice> = self
            .sessions
            .iter()
            .filter(|s| self.runnable(s))
            .map(|s| Choice::Issue(s.id))
            .collect();
        out.extend(
            self.channels
                .keys()
                .map(|(from, to)| Choice::Deliver(from.clone(), to.clone())),
        );
        out
    }

    /// Messages travelling towards `cd`.
    pub fn in_flight_to<'a>(&'a self, cd: &'a CdId) -> impl Iterator<Item = &'a CoordMessage> {
        self.channels
            .iter()
            .filter(move |((_, to), _)| to == cd)
            .flat_map(|(_, q)| q.iter())
    }

    pub fn classify(&self, names: &[String]) -> RunOutcome {
        let done = self.sessions.iter().all(Session::is_done)
            && self.delegates.values().all(Delegate::is_idle);
        if done {
            return RunOutcome::Completed;
        }
        let mut waiting = Vec::new();
        let mut blocked = Vec::new();
        for (cd, d) in &self.delegates {
            for t in d.state().threads.values() {
                if let Some(w) = &t.wait {
                    waiting.push(WaitingThread {
                        cd: cd.clone(),
                        state: t.at.clone(),
                        join: w.join.clone(),
                        awaiting: w.awaited.iter().cloned().collect(),
                    });
                }
            }
            for p in &d.state().pending {
                blocked.push(BlockedSession {
                    session: names[p.session.0 as usize].clone(),
                    cd: cd.clone(),
                    task: p.task.clone(),
                });
            }
        }
        RunOutcome::Deadlocked { waiting, blocked }
    }

    /// Applies one step, reporting events through `sink`.
    pub fn apply(
        &mut self,
        choice: &Choice,
        names: &[String],
        sink: &mut dyn FnMut(String, Event),
    ) -> Result<(), SimError> {
        match choice {
            Choice::Issue(sid) => self.issue(*sid, names, sink)?,
            Choice::Deliver(from, to) => self.deliver(from, to, names, sink)?,
        }
        self.issue_triggered(names, sink)
    }

    /// Triggered sessions issue their request in the same step that
    /// satisfied the trigger, so an early request really is early.
    fn issue_triggered(
        &mut self,
        names: &[String],
        sink: &mut dyn FnMut(String, Event),
    ) -> Result<(), SimError> {
        while let Some(sid) = self
            .sessions
            .iter()
            .find(|s| s.trigger.is_some() && self.runnable(s))
            .map(|s| s.id)
        {
            self.issue(sid, names, sink)?;
        }
        Ok(())
    }

    fn issue(
        &mut self,
        sid: SessionId,
        names: &[String],
        sink: &mut dyn FnMut(String, Event),
    ) -> Result<(), SimError> {
        let session = &self.sessions[sid.0 as usize];
        let action = session.next_request().expect("runnable session").clone();
        let name = names[sid.0 as usize].clone();
        let cd = CdId {
            initiator: session.role.clone(),
            receiver: action.target.clone(),
        };
        sink(
            name.clone(),
            Event::Request {
                session: name.clone(),
                cd: cd.clone(),
                task: action.task.clone(),
            },
        );
        let Some(d) = self.delegates.get_mut(&cd) else {
            sink(
                name.clone(),
                Event::Reject {
                    cd: None,
                    task: action.task,
                    session: name,
                    reason: "no delegate for this pair".into(),
                },
            );
            self.sessions[sid.0 as usize].complete_head();
            return Ok(());
        };
        match d.handle_request(&action.task, sid) {
            Err(DelegateError::UnknownTask(_)) => {
                sink(
                    delegate_name(&cd),
                    Event::Reject {
                        cd: Some(cd),
                        task: action.task,
                        session: name,
                        reason: "unknown task".into(),
                    },
                );
                self.sessions[sid.0 as usize].complete_head();
                Ok(())
            }
            Err(source) => Err(SimError::Delegate { cd, source }),
            Ok((reply, fx)) => {
                match reply {
                    Reply::Forwarded => self.sessions[sid.0 as usize].complete_head(),
                    Reply::Blocked => self.sessions[sid.0 as usize].blocked_on = Some(cd.clone()),
                }
                self.absorb(&cd, fx, names, sink);
                Ok(())
            }
        }
    }

    fn deliver(
        &mut self,
        from: &Endpoint,
        to: &CdId,
        names: &[String],
        sink: &mut dyn FnMut(String, Event),
    ) -> Result<(), SimError> {
        let key = (from.clone(), to.clone());
        let queue = self.channels.get_mut(&key).expect("non-empty channel");
        let message = queue.pop_front().expect("non-empty channel");
        if queue.is_empty() {
            self.channels.remove(&key);
        }
        sink(
            delegate_name(to),
            Event::Deliver {
                from: endpoint_name(from, names),
                to: to.clone(),
                message: message.clone(),
            },
        );
        let d = self
            .delegates
            .get_mut(to)
            .ok_or_else(|| SimError::NoDelegate(to.clone()))?;
        let result = match &message {
            CoordMessage::Update { state } => d.handle_update(state),
            CoordMessage::Notify(key) => d.handle_notify(key),
            CoordMessage::BusinessRequest { .. } | CoordMessage::BusinessForward { .. } => {
                Ok(Vec::new())
            }
        };
        let fx = result.map_err(|source| SimError::Delegate {
            cd: to.clone(),
            source,
        })?;
        self.absorb(to, fx, names, sink);
        Ok(())
    }

    fn absorb(
        &mut self,
        cd: &CdId,
        fx: Vec<Effect>,
        names: &[String],
        sink: &mut dyn FnMut(String, Event),
    ) {
        let at = delegate_name(cd);
        for e in fx {
            let event = match e {
                Effect::Forward {
                    task,
                    receiver,
                    state,
                    session,
                } => Event::Forward {
                    cd: cd.clone(),
                    task,
                    from: cd.initiator.clone(),
                    to: receiver,
                    state,
                    session: names[session.0 as usize].clone(),
                },
                Effect::Send { to, message } => {
                    let event = match &message {
                        CoordMessage::Update { state } => Event::Update {
                            from: cd.clone(),
                            to: to.clone(),
                            state: state.clone(),
                        },
                        CoordMessage::Notify(k) => Event::Notify {
                            from: cd.clone(),
                            to: to.clone(),
                            predecessor: k.predecessor.clone(),
                            join: k.join.clone(),
                        },
                        other => Event::Buffer {
                            cd: cd.clone(),
                            message: other.clone(),
                        },
                    };
                    self.channels
                        .entry((Endpoint::Delegate(cd.clone()), to))
                        .or_default()
                        .push_back(message);
                    event
                }
                Effect::Moved { thread, from, to } => Event::StateChange {
                    cd: cd.clone(),
                    thread,
                    from,
                    to: Some(to),
                    retired: None,
                },
                Effect::Retired { thread, at, reason } => Event::StateChange {
                    cd: cd.clone(),
                    thread,
                    from: Some(at),
                    to: None,
                    retired: Some(reason),
                },
                Effect::Waiting {
                    thread,
                    join,
                    awaiting,
                } => Event::Wait {
                    cd: cd.clone(),
                    thread,
                    join,
                    awaiting,
                },
                Effect::Blocked { task, session } => Event::Block {
                    cd: cd.clone(),
                    task,
                    session: names[session.0 as usize].clone(),
                },
                Effect::Unblocked { task, session } => {
                    self.sessions[session.0 as usize].complete_head();
                    Event::Unblock {
                        cd: cd.clone(),
                        task,
                        session: names[session.0 as usize].clone(),
                    }
                }
                Effect::Buffered { message } => Event::Buffer {
                    cd: cd.clone(),
                    message,
                },
            };
            sink(at.clone(), event);
        }
    }
}

pub fn delegate_name(cd: &CdId) -> String {
    format!("CD({cd})")
}

fn endpoint_name(e: &Endpoint, names: &[String]) -> String {
    match e {
        Endpoint::Enactment => "enactment".into(),
        Endpoint::Delegate(cd) => delegate_name(cd),
        Endpoint::Session(s) => names[s.0 as usize].clone(),
    }
}

/// A running simulation.
#[derive(Clone, Debug)]
pub struct Simulation {
    world: World,
    names: Vec<String>,
    policy: Policy,
    rng: ChaCha8Rng,
    last: Option<Choice>,
    trace: Vec<TraceEvent>,
    steps: u64,
}

impl Simulation {
    pub fn new(deployment: &Deployment, seed: u64, policy: Policy) -> Self {
        let (sessions, names) = expand_scripts(&deployment.participants, seed);
        Simulation {
            world: World::new(deployment, sessions),
            names,
            policy,
            rng: ChaCha8Rng::seed_from_u64(seed),
            last: None,
            trace: Vec::new(),
            steps: 0,
        }
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn into_trace(self) -> Vec<TraceEvent> {
        self.trace
    }

    pub fn session_names(&self) -> &[String] {
        &self.names
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn pick(&mut self, choices: &[Choice]) -> Choice {
        let picked = match self.policy {
            Policy::RoundRobin => match &self.last {
                Some(last) => choices
                    .iter()
                    .find(|c| *c > last)
                    .unwrap_or(&choices[0])
                    .clone(),
                None => choices[0].clone(),
            },
            Policy::SeededRandom => choices[self.rng.random_range(0..choices.len())].clone(),
        };
        self.last = Some(picked.clone());
        picked
    }

    /// Performs one step. Returns the range of trace events it produced, or
    /// `None` when nothing is deliverable.
    pub fn deliver_step(&mut self) -> Result<Option<Range<usize>>, SimError> {
        let choices = self.world.choices();
        if choices.is_empty() {
            return Ok(None);
        }
        let choice = self.pick(&choices);
        let start = self.trace.len();
        let trace = &mut self.trace;
        let mut sink = |at: String, event: Event| {
            let seq = trace.len() as u64;
            trace.push(TraceEvent { seq, at, event });
        };
        self.world.apply(&choice, &self.names, &mut sink)?;
        self.steps += 1;
        Ok(Some(start..self.trace.len()))
    }

    pub fn run_to_quiescence(&mut self, max_events: u64) -> Result<RunOutcome, SimError> {
        self.run_observed(max_events, |_, _| {})
    }

    /// Like `run_to_quiescence`, calling `observe` after every step.
    pub fn run_observed(
        &mut self,
        max_events: u64,
        mut observe: impl FnMut(&Simulation, Range<usize>),
    ) -> Result<RunOutcome, SimError> {
        loop {
            if self.world.choices().is_empty() {
                return Ok(self.world.classify(&self.names));
            }
            if self.steps >= max_events {
                return Ok(RunOutcome::Budget);
            }
            if let Some(range) = self.deliver_step()? {
                observe(self, range);
            }
        }
    }
}

/// Result of exploring every schedule.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Exploration {
    /// Operation sequences of schedules that end completed.
    pub completed: BTreeSet<Vec<Operation>>,
    /// Operation sequences of schedules that end quiescent but incomplete.
    pub stuck: BTreeSet<Vec<Operation>>,
    /// Distinct configurations visited.
    pub states: usize,
}

#[derive(Default)]
struct Summary {
    completed: BTreeSet<Vec<Operation>>,
    stuck: BTreeSet<Vec<Operation>>,
}

/// Explores all interleavings of one deployment by memoised depth-first
/// search over world configurations.
pub fn explore_exhaustive(
    deployment: &Deployment,
    seed: u64,
    max_states: usize,
) -> Result<Exploration, SimError> {
    let (sessions, names) = expand_scripts(&deployment.participants, seed);
    let world = World::new(deployment, sessions);
    let mut memo: HashMap<World, Arc<Summary>> = HashMap::new();
    let root = explore_from(&world, &names, &mut memo, max_states)?;
    Ok(Exploration {
        completed: root.completed.clone(),
        stuck: root.stuck.clone(),
        states: memo.len(),
    })
}

fn explore_from(
    world: &World,
    names: &[String],
    memo: &mut HashMap<World, Arc<Summary>>,
    max_states: usize,
) -> Result<Arc<Summary>, SimError> {
    if let Some(s) = memo.get(world) {
        return Ok(Arc::clone(s));
    }
    if memo.len() >= max_states {
        return Err(SimError::StateSpace(max_states));
    }
    let choices = world.choices();
    let mut summary = Summary::default();
    if choices.is_empty() {
        match world.classify(names) {
            RunOutcome::Completed => summary.completed.insert(Vec::new()),
            _ => summary.stuck.insert(Vec::new()),
        };
    }
    for choice in &choices {
        let mut next = world.clone();
        let mut ops = Vec::new();
        next.apply(choice, names, &mut |_, e| ops.extend(e.forwarded()))?;
        let child = explore_from(&next, names, memo, max_states)?;
        for (src, dst) in [
            (&child.completed, &mut summary.completed),
            (&child.stuck, &mut summary.stuck),
        ] {
            for tail in src {
                let mut seq = ops.clone();
                seq.extend(tail.iter().cloned());
                dst.insert(seq);
            }
        }
    }
    let summary = Arc::new(summary);
    memo.insert(world.clone(), Arc::clone(&summary));
    Ok(summary)
}
