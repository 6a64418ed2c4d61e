//! Structural validation of CeFM models.

use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use crate::model::{Cefm, Flow, FlowLabel, StateId, StateKind};
use crate::predicate::{assignments, Expr};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Property {
    InitialDegree,
    FinalDegree,
    PlainDegree,
    AlternativeDegree,
    GuardExclusion,
    GuardExhaustion,
    LoopShape,
    ForkDegree,
    JoinDegree,
    MisplacedGuard,
    UndeclaredRole,
    SelfInteraction,
    GuardType,
    Unreachable,
    CannotFinish,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub state: Option<StateId>,
    pub property: Property,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.state {
            Some(s) => write!(f, "{s}: {:?}: {}", self.property, self.detail),
            None => write!(f, "{:?}: {}", self.property, self.detail),
        }
    }
}

/// Violations make a model invalid; warnings do not.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub warnings: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn violation(&mut self, state: &StateId, property: Property, detail: impl Into<String>) {
        self.violations.push(Violation {
            state: Some(state.clone()),
            property,
            detail: detail.into(),
        });
    }
}

pub fn validate_cefm(model: &Cefm) -> ValidationReport {
    let mut report = ValidationReport::default();
    for (id, kind) in model.states() {
        let inc: Vec<&Flow> = model.incoming(id).collect();
        let out: Vec<&Flow> = model.outgoing(id).collect();
        check_state(model, id, *kind, &inc, &out, &mut report);
    }
    check_labels(model, &mut report);
    check_reachability(model, &mut report);
    report
}

fn count(flows: &[&Flow], pred: impl Fn(&FlowLabel) -> bool) -> usize {
    flows.iter().filter(|f| pred(&f.label)).count()
}

fn check_state(
    model: &Cefm,
    id: &StateId,
    kind: StateKind,
    inc: &[&Flow],
    out: &[&Flow],
    report: &mut ValidationReport,
) {
    use Property::*;
    let eps_out = count(out, FlowLabel::is_eps);
    let guard_out = count(out, |l| l.guard().is_some());
    match kind {
        StateKind::Initial => {
            if !inc.is_empty() {
                report.violation(id, InitialDegree, format!("{} incoming flow(s)", inc.len()));
            }
            if out.len() != 1 || eps_out != 1 {
                report.violation(id, InitialDegree, "needs exactly one outgoing ε flow");
            }
        }
        StateKind::Final => {
            if !out.is_empty() {
                report.violation(id, FinalDegree, format!("{} outgoing flow(s)", out.len()));
            }
        }
        StateKind::Plain => {
            if inc.len() != 1 {
                report.violation(
                    id,
                    PlainDegree,
                    format!("{} incoming flows, expected 1", inc.len()),
                );
            }
            if out.len() != 1 || guard_out != 0 {
                report.violation(
                    id,
                    PlainDegree,
                    "needs exactly one outgoing operation or ε flow",
                );
            }
        }
        StateKind::Alternative => {
            if inc.len() != 1 || count(inc, FlowLabel::is_eps) != 1 {
                report.violation(id, AlternativeDegree, "needs exactly one incoming ε flow");
            }
            if out.len() < 2 || guard_out != out.len() {
                report.violation(
                    id,
                    AlternativeDegree,
                    "needs at least two outgoing flows, all guarded",
                );
            }
            let guards: Vec<&Expr> = out.iter().filter_map(|f| f.label.guard()).collect();
            check_guards(model, id, &guards, report);
        }
        StateKind::Loop => {
            if inc.len() != 2 || count(inc, |l| l.guard().is_some()) != 0 {
                report.violation(id, LoopShape, "needs exactly two unguarded incoming flows");
            }
            if out.len() != 2 || guard_out != 1 || eps_out != 1 {
                report.violation(
                    id,
                    LoopShape,
                    "needs one guarded entry flow and one ε exit flow",
                );
            } else if let Some((guard, entry, _)) = model.loop_parts(id) {
                let back = model.closure([entry.clone()], |_| true);
                if !back.contains(id) {
                    report.violation(id, LoopShape, "loop body never returns to the loop state");
                }
                check_guards(model, id, &[guard], report);
            }
        }
        StateKind::Fork => {
            if inc.len() != 1 {
                report.violation(id, ForkDegree, "needs exactly one incoming flow");
            }
            if out.len() < 2 || eps_out != out.len() {
                report.violation(id, ForkDegree, "needs at least two outgoing ε flows");
            }
        }
        StateKind::Join => {
            if inc.len() < 2 || count(inc, FlowLabel::is_eps) != inc.len() {
                report.violation(id, JoinDegree, "needs at least two incoming ε flows");
            }
            if out.len() != 1 || eps_out != 1 {
                report.violation(id, JoinDegree, "needs exactly one outgoing ε flow");
            }
        }
    }
    if !matches!(kind, StateKind::Alternative | StateKind::Loop) && guard_out > 0 {
        report.violation(
            id,
            MisplacedGuard,
            "guards may only leave alternative or loop states",
        );
    }
}

/// Type-checks guards, and for alternatives checks that exactly one guard
/// holds under every assignment of the variables they mention.
fn check_guards(model: &Cefm, id: &StateId, guards: &[&Expr], report: &mut ValidationReport) {
    let vars: BTreeSet<&str> = guards.iter().flat_map(|g| g.free_vars()).collect();
    for v in &vars {
        if !model.variables().contains_key(*v) {
            report.violation(
                id,
                Property::GuardType,
                format!("undeclared variable `{v}`"),
            );
            return;
        }
    }
    let is_alt = model.kind(id) == Some(StateKind::Alternative);
    let mut overlap = None;
    let mut gap = None;
    for env in assignments(model.variables(), vars.iter().copied()) {
        let mut holding = Vec::new();
        for (i, g) in guards.iter().enumerate() {
            match g.eval(&env) {
                Ok(true) => holding.push(i),
                Ok(false) => {}
                Err(e) => {
                    report.violation(id, Property::GuardType, e.to_string());
                    return;
                }
            }
        }
        if holding.len() > 1 && overlap.is_none() {
            overlap = Some(format!(
                "`{}` and `{}` both hold at {env}",
                guards[holding[0]], guards[holding[1]]
            ));
        }
        if holding.is_empty() && gap.is_none() {
            gap = Some(format!("no guard holds at {env}"));
        }
    }
    if !is_alt {
        return;
    }
    if let Some(detail) = overlap {
        report.violation(id, Property::GuardExclusion, detail);
    }
    if let Some(detail) = gap {
        report.violation(id, Property::GuardExhaustion, detail);
    }
}

fn check_labels(model: &Cefm, report: &mut ValidationReport) {
    for (flow, op) in model.operations() {
        for r in [&op.initiator, &op.receiver] {
            if !model.roles().contains(r) {
                report.violation(&flow.from, Property::UndeclaredRole, format!("role `{r}`"));
            }
        }
        if op.initiator == op.receiver {
            report.violation(
                &flow.from,
                Property::SelfInteraction,
                format!("`{op}` has the same initiator and receiver"),
            );
        }
    }
}

fn check_reachability(model: &Cefm, report: &mut ValidationReport) {
    let forward = model.closure([model.initial().clone()], |_| true);
    for id in model.states().keys() {
        if !forward.contains(id) {
            report.warnings.push(Violation {
                state: Some(id.clone()),
                property: Property::Unreachable,
                detail: "not reachable from the initial state".into(),
            });
        } else if !model
            .closure([id.clone()], |_| true)
            .contains(model.final_state())
        {
            report.warnings.push(Violation {
                state: Some(id.clone()),
                property: Property::CannotFinish,
                detail: "cannot reach the final state".into(),
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CefmBuilder;

    fn props(r: &ValidationReport) -> Vec<Property> {
        r.violations.iter().map(|v| v.property).collect()
    }

    #[test]
    fn empty_body_is_valid() {
        let m = CefmBuilder::new().eps("Initial", "Final").build().unwrap();
        assert!(validate_cefm(&m).is_valid());
    }

    #[test]
    fn incoming_flow_on_initial_is_one_violation() {
        let m = CefmBuilder::new()
            .state("a", StateKind::Plain)
            .eps("Initial", "a")
            .eps("a", "Final")
            .op("Final", "A", "t", "B", "Initial")
            .build()
            .unwrap();
        let r = validate_cefm(&m);
        assert_eq!(
            props(&r)
                .iter()
                .filter(|p| **p == Property::InitialDegree)
                .count(),
            1
        );
    }

    #[test]
    fn overlapping_guards_found_at_both_true() {
        let m = CefmBuilder::new()
            .bool_var("x")
            .bool_var("y")
            .state("alt", StateKind::Alternative)
            .state("a", StateKind::Plain)
            .state("b", StateKind::Plain)
            .eps("Initial", "alt")
            .guard("alt", "x", "a")
            .guard("alt", "x and y", "b")
            .eps("a", "Final")
            .eps("b", "Final")
            .build()
            .unwrap();
        let r = validate_cefm(&m);
        let v = r
            .violations
            .iter()
            .find(|v| v.property == Property::GuardExclusion)
            .expect("exclusion violation");
        assert!(v.detail.contains("x=true, y=true"), "{}", v.detail);
    }

    #[test]
    fn non_exhaustive_guards_are_reported() {
        let m = CefmBuilder::new()
            .bool_var("x")
            .state("alt", StateKind::Alternative)
            .state("a", StateKind::Plain)
            .state("b", StateKind::Plain)
            .eps("Initial", "alt")
            .guard("alt", "x", "a")
            .guard("alt", "false", "b")
            .eps("a", "Final")
            .eps("b", "Final")
            .build()
            .unwrap();
        assert!(props(&validate_cefm(&m)).contains(&Property::GuardExhaustion));
    }

    #[test]
    fn violations_are_collected_not_aborted() {
        let m = CefmBuilder::new()
            .state("f", StateKind::Fork)
            .state("j", StateKind::Join)
            .eps("Initial", "f")
            .eps("f", "j")
            .eps("j", "Final")
            .build()
            .unwrap();
        let p = props(&validate_cefm(&m));
        assert!(p.contains(&Property::ForkDegree));
        assert!(p.contains(&Property::JoinDegree));
    }

    #[test]
    fn validation_is_idempotent() {
        let m = CefmBuilder::new()
            .state("a", StateKind::Plain)
            .state("lost", StateKind::Plain)
            .eps("Initial", "a")
            .eps("a", "Final")
            .eps("lost", "Final")
            .build()
            .unwrap();
        let first = validate_cefm(&m);
        assert_eq!(first, validate_cefm(&m));
        assert!(first
            .warnings
            .iter()
            .any(|w| w.property == Property::Unreachable));
    }
}
