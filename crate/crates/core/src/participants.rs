//! Scripted services and the enactment bootstrap.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cm::{initial_wait_states, CdId, CoordinationModel};
use crate::model::{Cefm, Operation, Role, StateId, TaskName};

/// Index of a session within one simulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub u32);

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub target: Role,
    pub task: TaskName,
}

impl Action {
    pub fn new(target: &str, task: &str) -> Self {
        Action {
            target: Role::new(target),
            task: TaskName::new(task),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EarlyRequest {
    /// Issued once the main session has completed this many requests.
    pub after: usize,
    pub target: Role,
    pub task: TaskName,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    InOrder,
    /// Permutes actions within each group of positions. Without an explicit
    /// seed the permutation is derived from the run seed.
    Shuffled {
        #[serde(default)]
        seed: Option<u64>,
        groups: Vec<Vec<usize>>,
    },
    /// Issues the listed requests from an auxiliary session of the same
    /// role, ahead of the main script.
    Adversarial { early: Vec<EarlyRequest> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticipantScript {
    pub role: Role,
    pub actions: Vec<Action>,
    #[serde(default)]
    pub mode: Mode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Trigger {
    pub session: SessionId,
    pub after: usize,
}

/// One synchronous caller: at most one request outstanding.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Session {
    pub id: SessionId,
    pub role: Role,
    actions: VecDeque<Action>,
    pub trigger: Option<Trigger>,
    pub completed: usize,
    pub blocked_on: Option<CdId>,
}

impl Session {
    pub fn new(id: SessionId, role: Role, actions: impl IntoIterator<Item = Action>) -> Self {
        Session {
            id,
            role,
            actions: actions.into_iter().collect(),
            trigger: None,
            completed: 0,
            blocked_on: None,
        }
    }

    /// The next request, if the session is not blocked.
    pub fn next_request(&self) -> Option<&Action> {
        if self.blocked_on.is_some() {
            return None;
        }
        self.actions.front()
    }

    pub fn remaining(&self) -> usize {
        self.actions.len()
    }

    pub fn is_done(&self) -> bool {
        self.blocked_on.is_none() && self.actions.is_empty()
    }

    /// Marks the head request as answered.
    pub fn complete_head(&mut self) {
        self.actions.pop_front();
        self.blocked_on = None;
        self.completed += 1;
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScriptError {
    #[error("{role} does not initiate `{task}` towards {target} in the model")]
    UnknownAction {
        role: Role,
        task: TaskName,
        target: Role,
    },
    #[error("shuffle group of {role} refers to position {index} but the script has {len} actions")]
    BadGroup {
        role: Role,
        index: usize,
        len: usize,
    },
}

/// Checks that every scripted action is an operation of the model.
/// Adversarial scripts may also ask for operations the model lacks.
pub fn check_script(model: &Cefm, script: &ParticipantScript) -> Result<(), ScriptError> {
    let ops: BTreeSet<&Operation> = model.task_labels();
    let len = script.actions.len();
    if let Mode::Shuffled { groups, .. } = &script.mode {
        for &index in groups.iter().flatten() {
            if index >= len {
                return Err(ScriptError::BadGroup {
                    role: script.role.clone(),
                    index,
                    len,
                });
            }
        }
    }
    if matches!(script.mode, Mode::Adversarial { .. }) {
        return Ok(());
    }
    for a in &script.actions {
        let op = Operation {
            initiator: script.role.clone(),
            task: a.task.clone(),
            receiver: a.target.clone(),
        };
        if !ops.contains(&op) {
            return Err(ScriptError::UnknownAction {
                role: script.role.clone(),
                task: a.task.clone(),
                target: a.target.clone(),
            });
        }
    }
    Ok(())
}

/// Expands scripts into sessions. Returns the sessions and a display name
/// for each, e.g. `SPS#2` or `SPS#2!0` for an auxiliary session.
pub fn expand_scripts(scripts: &[ParticipantScript], run_seed: u64) -> (Vec<Session>, Vec<String>) {
    let mut sessions = Vec::new();
    let mut names = Vec::new();
    for (index, script) in scripts.iter().enumerate() {
        let main = SessionId(sessions.len() as u32);
        let base = format!("{}#{index}", script.role);
        match &script.mode {
            Mode::InOrder => {
                sessions.push(Session::new(
                    main,
                    script.role.clone(),
                    script.actions.clone(),
                ));
                names.push(base);
            }
            Mode::Shuffled { seed, groups } => {
                let seed = seed.unwrap_or_else(|| mix(run_seed, index as u64));
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut actions = script.actions.clone();
                for group in groups {
                    let mut picked: Vec<Action> =
                        group.iter().map(|&i| actions[i].clone()).collect();
                    picked.shuffle(&mut rng);
                    for (&i, a) in group.iter().zip(picked) {
                        actions[i] = a;
                    }
                }
                sessions.push(Session::new(main, script.role.clone(), actions));
                names.push(base);
            }
            Mode::Adversarial { early } => {
                let mut actions = script.actions.clone();
                for e in early {
                    if let Some(pos) = actions
                        .iter()
                        .position(|a| a.target == e.target && a.task == e.task)
                    {
                        actions.remove(pos);
                    }
                }
                sessions.push(Session::new(main, script.role.clone(), actions));
                names.push(base.clone());
                for (k, e) in early.iter().enumerate() {
                    let id = SessionId(sessions.len() as u32);
                    let mut aux = Session::new(
                        id,
                        script.role.clone(),
                        [Action {
                            target: e.target.clone(),
                            task: e.task.clone(),
                        }],
                    );
                    aux.trigger = Some(Trigger {
                        session: main,
                        after: e.after,
                    });
                    sessions.push(aux);
                    names.push(format!("{base}!{k}"));
                }
            }
        }
    }
    (sessions, names)
}

fn mix(seed: u64, index: u64) -> u64 {
    seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BootstrapError {
    #[error("delegate {cd} could start at several states: {states:?}")]
    Ambiguous { cd: CdId, states: Vec<StateId> },
}

/// The UPDATE messages the enactment engine sends to start an instance: one
/// per delegate that can begin at a state ε-reachable from the initial state.
pub fn enactment_bootstrap(
    model: &Cefm,
    cms: &BTreeMap<CdId, CoordinationModel>,
) -> Result<Vec<(CdId, StateId)>, BootstrapError> {
    let reach = model.closure([model.initial().clone()], |f| f.label.is_eps());
    let mut out = Vec::new();
    for (cd, cm) in cms {
        let starts: Vec<StateId> = initial_wait_states(cm)
            .into_iter()
            .filter(|s| reach.contains(s))
            .collect();
        match starts.len() {
            0 => {}
            1 => out.push((cd.clone(), starts[0].clone())),
            _ => {
                return Err(BootstrapError::Ambiguous {
                    cd: cd.clone(),
                    states: starts,
                })
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cm::generate_all;
    use crate::model::{CefmBuilder, StateKind};

    #[test]
    fn in_order_yields_actions_then_none() {
        let script = ParticipantScript {
            role: Role::new("SPS"),
            actions: vec![Action::new("UMS", "getFriends")],
            mode: Mode::InOrder,
        };
        let (mut sessions, names) = expand_scripts(&[script], 0);
        assert_eq!(names, vec!["SPS#0"]);
        let s = &mut sessions[0];
        assert_eq!(s.next_request(), Some(&Action::new("UMS", "getFriends")));
        s.complete_head();
        assert_eq!(s.next_request(), None);
        assert!(s.is_done());
    }

    #[test]
    fn shuffle_only_permutes_within_groups() {
        let actions: Vec<Action> = (0..6).map(|i| Action::new("X", &format!("t{i}"))).collect();
        let script = ParticipantScript {
            role: Role::new("R"),
            actions: actions.clone(),
            mode: Mode::Shuffled {
                seed: None,
                groups: vec![vec![2, 3]],
            },
        };
        let mut seen = BTreeSet::new();
        for seed in 0..32 {
            let (sessions, _) = expand_scripts(std::slice::from_ref(&script), seed);
            let got: Vec<Action> = sessions[0].actions.iter().cloned().collect();
            for i in [0, 1, 4, 5] {
                assert_eq!(got[i], actions[i]);
            }
            seen.insert(got[2].task.clone());
        }
        assert_eq!(seen.len(), 2);
    }

    #[test]
    fn adversarial_moves_request_to_aux_session() {
        let script = ParticipantScript {
            role: Role::new("SPS"),
            actions: vec![
                Action::new("NMU", "notifyUser"),
                Action::new("NMF", "notifyFriend"),
                Action::new("NMU", "startItin"),
            ],
            mode: Mode::Adversarial {
                early: vec![EarlyRequest {
                    after: 1,
                    target: Role::new("NMU"),
                    task: TaskName::new("startItin"),
                }],
            },
        };
        let (sessions, names) = expand_scripts(&[script], 0);
        assert_eq!(names, vec!["SPS#0", "SPS#0!0"]);
        assert_eq!(sessions[0].remaining(), 2);
        assert_eq!(
            sessions[1].trigger,
            Some(Trigger {
                session: SessionId(0),
                after: 1
            })
        );
    }

    #[test]
    fn bootstrap_of_hand_built_model() {
        let m = CefmBuilder::new()
            .state("s", StateKind::Plain)
            .state("u", StateKind::Plain)
            .eps("Initial", "s")
            .op("s", "A", "t", "B", "u")
            .eps("u", "Final")
            .build()
            .unwrap();
        let cms = generate_all(&m).unwrap();
        assert_eq!(
            enactment_bootstrap(&m, &cms).unwrap(),
            vec![(CdId::new("A", "B"), StateId::new("s"))]
        );
    }

    #[test]
    fn bootstrap_of_empty_model_is_empty() {
        let m = CefmBuilder::new().eps("Initial", "Final").build().unwrap();
        let cms = generate_all(&m).unwrap();
        assert!(enactment_bootstrap(&m, &cms).unwrap().is_empty());
    }
}
