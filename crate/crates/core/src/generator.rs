//! Random well-formed models and the participant scripts that drive them.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::interp::{reference_traces, InterpError, TraceLanguage};
use crate::model::{Cefm, CefmBuilder, Operation, StateKind};
use crate::participants::{Action, ParticipantScript};
use crate::predicate::{assignments, Environment};

/// Shape limits for generated models.
#[derive(Clone, Debug)]
pub struct GenConfig {
    /// Total states, counting the initial and final state.
    pub max_states: usize,
    pub roles: usize,
    pub max_plain_ops: usize,
    /// Branches of the fork, at least two.
    pub max_branches: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            max_states: 12,
            roles: 4,
            max_plain_ops: 3,
            max_branches: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Block {
    Op,
    ForkJoin(usize),
    Loop,
}

impl Block {
    fn states(self) -> usize {
        match self {
            Block::Op => 1,
            // fork, join, the state after the join, two per branch
            Block::ForkJoin(n) => 3 + 2 * n,
            // loop, body entry, body exit, exit target
            Block::Loop => 4,
        }
    }
}

struct Assembler {
    b: CefmBuilder,
    next_state: usize,
    next_task: usize,
    roles: Vec<String>,
}

impl Assembler {
    fn state(&mut self, kind: StateKind) -> String {
        let id = format!("s{}", self.next_state);
        self.next_state += 1;
        self.b = std::mem::take(&mut self.b).state(&id, kind);
        id
    }

    /// Adds `from -op-> new` with a fresh task and a random role pair.
    fn op(&mut self, rng: &mut impl Rng, from: &str) -> String {
        let to = self.state(StateKind::Plain);
        let a = rng.random_range(0..self.roles.len());
        let mut b = rng.random_range(0..self.roles.len() - 1);
        if b >= a {
            b += 1;
        }
        let task = format!("t{}", self.next_task);
        self.next_task += 1;
        self.b = std::mem::take(&mut self.b).op(from, &self.roles[a], &task, &self.roles[b], &to);
        to
    }

    fn eps(&mut self, from: &str, to: &str) {
        self.b = std::mem::take(&mut self.b).eps(from, to);
    }

    fn guard(&mut self, from: &str, g: &str, to: &str) {
        self.b = std::mem::take(&mut self.b).guard(from, g, to);
    }
}

/// Draws a model: a leading operation, then a shuffled mix of plain
/// operations, at most one fork/join and at most one loop, optionally
/// ending in a two-way alternative. Every model is valid by construction.
pub fn random_cefm(rng: &mut impl Rng, config: &GenConfig) -> Cefm {
    let mut blocks = vec![Block::Op; rng.random_range(0..=config.max_plain_ops)];
    if rng.random_bool(0.6) {
        blocks.push(Block::ForkJoin(rng.random_range(2..=config.max_branches)));
    }
    if rng.random_bool(0.5) {
        blocks.push(Block::Loop);
    }
    blocks.shuffle(rng);
    blocks.insert(0, Block::Op);
    let mut alternative = rng.random_bool(0.5);
    // initial, final and the first state, plus the alternative with its arms
    let size = |blocks: &[Block], alternative: bool| {
        3 + blocks.iter().map(|b| b.states()).sum::<usize>() + if alternative { 4 } else { 0 }
    };
    while size(&blocks, alternative) > config.max_states {
        // shrink a wide fork first, then drop a random block or the alternative
        if let Some(Block::ForkJoin(n)) = blocks
            .iter_mut()
            .find(|b| matches!(b, Block::ForkJoin(n) if *n > 2))
        {
            *n -= 1;
            continue;
        }
        let victim = rng.random_range(0..blocks.len() + usize::from(alternative));
        if victim == blocks.len() {
            alternative = false;
        } else if victim > 0 {
            blocks.remove(victim);
        }
    }
    assemble(rng, config, &blocks, alternative)
}

fn assemble(rng: &mut impl Rng, config: &GenConfig, blocks: &[Block], alternative: bool) -> Cefm {
    let roles: Vec<String> = (0..config.roles).map(|i| format!("R{i}")).collect();
    let mut asm = Assembler {
        b: CefmBuilder::new(),
        next_state: 0,
        next_task: 0,
        roles,
    };
    let mut cur = asm.state(StateKind::Plain);
    asm.eps("Initial", &cur);
    for &block in blocks {
        match block {
            Block::Op => cur = asm.op(rng, &cur),
            Block::ForkJoin(n) => {
                let fork = asm.state(StateKind::Fork);
                let join = asm.state(StateKind::Join);
                asm.eps(&cur, &fork);
                for _ in 0..n {
                    let start = asm.state(StateKind::Plain);
                    asm.eps(&fork, &start);
                    let end = asm.op(rng, &start);
                    asm.eps(&end, &join);
                }
                cur = asm.state(StateKind::Plain);
                asm.eps(&join, &cur);
            }
            Block::Loop => {
                asm.b = std::mem::take(&mut asm.b).bool_var("again");
                let l = asm.state(StateKind::Loop);
                asm.eps(&cur, &l);
                let body = asm.state(StateKind::Plain);
                asm.guard(&l, "again", &body);
                let back = asm.op(rng, &body);
                asm.eps(&back, &l);
                cur = asm.state(StateKind::Plain);
                asm.eps(&l, &cur);
            }
        }
    }
    let fin = "Final".to_string();
    if alternative {
        asm.b = std::mem::take(&mut asm.b).bool_var("x");
        let alt = asm.state(StateKind::Alternative);
        asm.eps(&cur, &alt);
        let yes = asm.state(StateKind::Plain);
        asm.guard(&alt, "x", &yes);
        let done = asm.op(rng, &yes);
        asm.eps(&done, &fin);
        let no = asm.state(StateKind::Plain);
        asm.guard(&alt, "not x", &no);
        asm.eps(&no, &fin);
    } else {
        asm.eps(&cur, &fin);
    }
    asm.b.build().expect("generated model is well formed")
}

/// Every valuation of the model's variables.
pub fn environments(model: &Cefm) -> Vec<Environment> {
    assignments(
        model.variables(),
        model.variables().keys().map(String::as_str),
    )
}

/// One generated model under one valuation, with its reference language
/// and the scripts that let any of its runs happen.
#[derive(Clone, Debug)]
pub struct Case {
    pub model: Cefm,
    pub env: Environment,
    pub reference: TraceLanguage,
    pub scripts: Vec<ParticipantScript>,
}

impl Case {
    /// Sequences an enforced run may end with: complete runs, or the
    /// truncation points when the loop bound cut every run short.
    pub fn expected(&self) -> &BTreeSet<Vec<Operation>> {
        if self.reference.runs.is_empty() {
            &self.reference.truncated_prefixes
        } else {
            &self.reference.runs
        }
    }
}

/// Builds a case whose scripts hold one single-request session per
/// operation occurrence of a reference run, so every interleaving the model
/// allows is available to the scheduler.
pub fn make_case(model: Cefm, env: Environment, loop_bound: u32) -> Result<Case, InterpError> {
    let reference = reference_traces(&model, &env, loop_bound)?;
    let sample = reference
        .runs
        .iter()
        .chain(&reference.truncated_prefixes)
        .next()
        .cloned()
        .unwrap_or_default();
    let scripts = sample
        .iter()
        .map(|op| ParticipantScript {
            role: op.initiator.clone(),
            actions: vec![Action {
                target: op.receiver.clone(),
                task: op.task.clone(),
            }],
            mode: Default::default(),
        })
        .collect();
    Ok(Case {
        model,
        env,
        reference,
        scripts,
    })
}

/// `count` distinct models from one seed, each paired with every valuation.
pub fn random_cases(seed: u64, count: usize, config: &GenConfig, loop_bound: u32) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    while seen.len() < count {
        let model = random_cefm(&mut rng, config);
        if !seen.insert(model.to_json()) {
            continue;
        }
        for env in environments(&model) {
            out.push(
                make_case(model.clone(), env, loop_bound).expect("generated model interprets"),
            );
        }
    }
    out
}
