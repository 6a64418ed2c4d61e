//! Token-game interpreter: the reference semantics of a CeFM.
//!
//! The initial state emits one token. Plain states move it along their flow,
//! alternatives follow the single true guard, loops enter while their guard
//! holds, forks duplicate it and joins fire once every incoming flow holds a
//! token. ε moves are confluent under a fixed environment, so a marking is
//! always kept normalized: the only choices left are which pending
//! operation fires next.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::model::{Cefm, FlowLabel, Operation, StateId, StateKind};
use crate::predicate::{Environment, PredicateError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InterpError {
    #[error("no guard out of `{0}` holds")]
    NoTrueGuard(StateId),
    #[error("guard evaluation failed at `{state}`: {source}")]
    Guard {
        state: StateId,
        source: PredicateError,
    },
    #[error("state `{0}` has no usable outgoing flow")]
    Dangling(StateId),
    #[error("ε moves do not terminate")]
    Divergent,
}

/// A normalized token distribution.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Marking {
    /// Tokens resting before an operation flow.
    ready: BTreeMap<StateId, u32>,
    /// Tokens that arrived at a join, keyed by (join, predecessor).
    join_inputs: BTreeMap<(StateId, StateId), u32>,
    loop_entries: BTreeMap<StateId, u32>,
    finished: u32,
}

impl Marking {
    /// True once every token has been consumed at the final state.
    pub fn is_complete(&self) -> bool {
        self.ready.is_empty() && self.join_inputs.is_empty() && self.finished > 0
    }

    /// States whose outgoing operation can fire now.
    pub fn ready_states(&self) -> impl Iterator<Item = &StateId> {
        self.ready.keys()
    }
}

const EPS_STEP_CAP: usize = 1_000_000;

/// Interpreter bound to one model and one environment.
pub struct TokenGame<'a> {
    model: &'a Cefm,
    env: &'a Environment,
    loop_bound: Option<u32>,
}

impl<'a> TokenGame<'a> {
    /// `loop_bound` caps how often each loop may be entered; a marking that
    /// would exceed it is reported as truncated (`Ok(None)`).
    pub fn new(model: &'a Cefm, env: &'a Environment, loop_bound: Option<u32>) -> Self {
        TokenGame {
            model,
            env,
            loop_bound,
        }
    }

    pub fn start(&self) -> Result<Option<Marking>, InterpError> {
        let m = Marking::default();
        self.settle(m, vec![(None, self.model.initial().clone())])
    }

    /// The operation that fires from a ready state.
    pub fn operation_at(&self, s: &StateId) -> Option<(&'a Operation, &'a StateId)> {
        self.model
            .outgoing(s)
            .find_map(|f| f.label.operation().map(|op| (op, &f.to)))
    }

    pub fn fire(&self, m: &Marking, s: &StateId) -> Result<Option<Marking>, InterpError> {
        let (_, to) = self
            .operation_at(s)
            .ok_or_else(|| InterpError::Dangling(s.clone()))?;
        let mut next = m.clone();
        match next.ready.get_mut(s) {
            Some(n) if *n > 1 => *n -= 1,
            Some(_) => {
                next.ready.remove(s);
            }
            None => return Err(InterpError::Dangling(s.clone())),
        }
        self.settle(next, vec![(Some(s.clone()), to.clone())])
    }

    /// Successor markings reachable by firing `op`.
    pub fn fire_op(&self, m: &Marking, op: &Operation) -> Result<Vec<Marking>, InterpError> {
        let mut out = Vec::new();
        for s in m.ready.keys() {
            if let Some((label, _)) = self.operation_at(s) {
                if label == op {
                    if let Some(next) = self.fire(m, s)? {
                        out.push(next);
                    }
                }
            }
        }
        Ok(out)
    }

    fn settle(
        &self,
        mut m: Marking,
        mut work: Vec<(Option<StateId>, StateId)>,
    ) -> Result<Option<Marking>, InterpError> {
        let mut steps = 0usize;
        while let Some((pred, s)) = work.pop() {
            steps += 1;
            if steps > EPS_STEP_CAP {
                return Err(InterpError::Divergent);
            }
            let kind = self
                .model
                .kind(&s)
                .ok_or_else(|| InterpError::Dangling(s.clone()))?;
            match kind {
                StateKind::Final => m.finished += 1,
                StateKind::Join => {
                    let pred = pred.ok_or_else(|| InterpError::Dangling(s.clone()))?;
                    *m.join_inputs.entry((s.clone(), pred)).or_default() += 1;
                    self.try_fire_join(&mut m, &s, &mut work)?;
                }
                StateKind::Fork => {
                    for f in self.model.outgoing(&s) {
                        work.push((Some(s.clone()), f.to.clone()));
                    }
                }
                StateKind::Alternative => {
                    let mut taken = None;
                    for f in self.model.outgoing(&s) {
                        if let FlowLabel::Guard(g) = &f.label {
                            if self.eval(&s, g)? {
                                taken = Some(f.to.clone());
                                break;
                            }
                        }
                    }
                    let to = taken.ok_or_else(|| InterpError::NoTrueGuard(s.clone()))?;
                    work.push((Some(s.clone()), to));
                }
                StateKind::Loop => {
                    let (guard, entry, exit) = self
                        .model
                        .loop_parts(&s)
                        .ok_or_else(|| InterpError::Dangling(s.clone()))?;
                    if self.eval(&s, guard)? {
                        if let Some(bound) = self.loop_bound {
                            let n = m.loop_entries.entry(s.clone()).or_default();
                            *n += 1;
                            if *n > bound {
                                return Ok(None);
                            }
                        }
                        work.push((Some(s.clone()), entry.clone()));
                    } else {
                        work.push((Some(s.clone()), exit.clone()));
                    }
                }
                StateKind::Initial | StateKind::Plain => {
                    let f = self
                        .model
                        .outgoing(&s)
                        .next()
                        .ok_or_else(|| InterpError::Dangling(s.clone()))?;
                    match &f.label {
                        FlowLabel::Op(_) => *m.ready.entry(s.clone()).or_default() += 1,
                        FlowLabel::Eps => work.push((Some(s.clone()), f.to.clone())),
                        FlowLabel::Guard(_) => return Err(InterpError::Dangling(s.clone())),
                    }
                }
            }
        }
        Ok(Some(m))
    }

    fn try_fire_join(
        &self,
        m: &mut Marking,
        join: &StateId,
        work: &mut Vec<(Option<StateId>, StateId)>,
    ) -> Result<(), InterpError> {
        let preds: Vec<StateId> = self.model.incoming(join).map(|f| f.from.clone()).collect();
        let all_present = preds.iter().all(|p| {
            m.join_inputs
                .get(&(join.clone(), p.clone()))
                .copied()
                .unwrap_or(0)
                > 0
        });
        if !all_present {
            return Ok(());
        }
        for p in preds {
            let key = (join.clone(), p);
            let n = m.join_inputs.get_mut(&key).expect("checked above");
            *n -= 1;
            if *n == 0 {
                m.join_inputs.remove(&key);
            }
        }
        let next = self
            .model
            .outgoing(join)
            .next()
            .ok_or_else(|| InterpError::Dangling(join.clone()))?;
        work.push((Some(join.clone()), next.to.clone()));
        Ok(())
    }

    fn eval(&self, s: &StateId, g: &crate::predicate::Expr) -> Result<bool, InterpError> {
        g.eval(self.env).map_err(|source| InterpError::Guard {
            state: s.clone(),
            source,
        })
    }
}

/// Result of exhaustive enumeration.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TraceLanguage {
    /// Operation sequences of complete runs.
    pub runs: BTreeSet<Vec<Operation>>,
    /// Set when some run was cut off by the loop bound.
    pub truncated: bool,
    /// Prefixes at which runs were cut off.
    pub truncated_prefixes: BTreeSet<Vec<Operation>>,
    /// Prefixes after which no operation can fire yet the run is incomplete.
    pub stuck: BTreeSet<Vec<Operation>>,
}

/// Enumerates every interleaving of the model's token game under `env`.
/// Each loop may be entered at most `max_steps` times per run.
pub fn reference_traces(
    model: &Cefm,
    env: &Environment,
    max_steps: u32,
) -> Result<TraceLanguage, InterpError> {
    let game = TokenGame::new(model, env, Some(max_steps));
    let mut lang = TraceLanguage::default();
    let mut prefix = Vec::new();
    match game.start()? {
        Some(m) => explore(&game, &m, &mut prefix, &mut lang)?,
        None => {
            lang.truncated = true;
            lang.truncated_prefixes.insert(Vec::new());
        }
    }
    Ok(lang)
}

fn explore(
    game: &TokenGame<'_>,
    m: &Marking,
    prefix: &mut Vec<Operation>,
    lang: &mut TraceLanguage,
) -> Result<(), InterpError> {
    if m.ready.is_empty() {
        if m.is_complete() {
            lang.runs.insert(prefix.clone());
        } else {
            lang.stuck.insert(prefix.clone());
        }
        return Ok(());
    }
    for s in m.ready.keys() {
        let (op, _) = game
            .operation_at(s)
            .ok_or_else(|| InterpError::Dangling(s.clone()))?;
        prefix.push(op.clone());
        match game.fire(m, s)? {
            Some(next) => explore(game, &next, prefix, lang)?,
            None => {
                lang.truncated = true;
                lang.truncated_prefixes.insert(prefix.clone());
            }
        }
        prefix.pop();
    }
    Ok(())
}
