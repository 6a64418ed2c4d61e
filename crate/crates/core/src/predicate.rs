//! Guard predicates over finite-domain variables.
//!
//! Guards are small boolean expression trees. Variables are either boolean or
//! integer valued and every variable ranges over a finite domain declared by
//! the model, so properties such as mutual exclusion of two guards can be
//! decided by enumerating assignments.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A variable value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Int(i64),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(b) => write!(f, "{b}"),
            Value::Int(i) => write!(f, "{i}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }
}

/// Boolean expression tree.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Expr {
    True,
    False,
    Var(String),
    Cmp(String, CmpOp, Value),
    Not(Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PredicateError {
    #[error("unbound variable `{0}`")]
    UnboundVariable(String),
    #[error("variable `{var}` holds {found}, which cannot be used {usage}")]
    TypeMismatch {
        var: String,
        found: Value,
        usage: &'static str,
    },
    #[error("parse error at offset {offset}: {message}")]
    Parse { offset: usize, message: String },
}

impl Expr {
    pub fn not(e: Expr) -> Expr {
        Expr::Not(Box::new(e))
    }

    pub fn and(a: Expr, b: Expr) -> Expr {
        Expr::And(Box::new(a), Box::new(b))
    }

    pub fn or(a: Expr, b: Expr) -> Expr {
        Expr::Or(Box::new(a), Box::new(b))
    }

    pub fn var(name: impl Into<String>) -> Expr {
        Expr::Var(name.into())
    }

    pub fn is_true_literal(&self) -> bool {
        matches!(self, Expr::True)
    }

    /// Standard propositional evaluation under `env`.
    pub fn eval(&self, env: &Environment) -> Result<bool, PredicateError> {
        Ok(match self {
            Expr::True => true,
            Expr::False => false,
            Expr::Var(name) => match env.get(name)? {
                Value::Bool(b) => b,
                other => {
                    return Err(PredicateError::TypeMismatch {
                        var: name.clone(),
                        found: other,
                        usage: "as a boolean",
                    })
                }
            },
            Expr::Cmp(name, op, lit) => {
                let value = env.get(name)?;
                compare(name, value, *op, *lit)?
            }
            Expr::Not(e) => !e.eval(env)?,
            Expr::And(a, b) => a.eval(env)? && b.eval(env)?,
            Expr::Or(a, b) => a.eval(env)? || b.eval(env)?,
        })
    }

    pub fn free_vars(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars<'a>(&'a self, out: &mut BTreeSet<&'a str>) {
        match self {
            Expr::True | Expr::False => {}
            Expr::Var(v) | Expr::Cmp(v, _, _) => {
                out.insert(v.as_str());
            }
            Expr::Not(e) => e.collect_vars(out),
            Expr::And(a, b) | Expr::Or(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Or(..) => 1,
            Expr::And(..) => 2,
            Expr::Not(..) => 3,
            _ => 4,
        }
    }
}

fn compare(var: &str, value: Value, op: CmpOp, lit: Value) -> Result<bool, PredicateError> {
    match (value, lit) {
        (Value::Bool(a), Value::Bool(b)) => match op {
            CmpOp::Eq => Ok(a == b),
            CmpOp::Ne => Ok(a != b),
            _ => Err(PredicateError::TypeMismatch {
                var: var.to_owned(),
                found: value,
                usage: "in an ordering comparison",
            }),
        },
        (Value::Int(a), Value::Int(b)) => Ok(match op {
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
            CmpOp::Gt => a > b,
            CmpOp::Ge => a >= b,
        }),
        _ => Err(PredicateError::TypeMismatch {
            var: var.to_owned(),
            found: value,
            usage: "against a literal of another type",
        }),
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn child(f: &mut fmt::Formatter<'_>, e: &Expr, parens: bool) -> fmt::Result {
            if parens {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        }
        match self {
            Expr::True => f.write_str("true"),
            Expr::False => f.write_str("false"),
            Expr::Var(v) => f.write_str(v),
            Expr::Cmp(v, op, lit) => write!(f, "{v} {} {lit}", op.symbol()),
            Expr::Not(e) => {
                f.write_str("not ")?;
                child(f, e, e.precedence() < 3)
            }
            Expr::And(a, b) | Expr::Or(a, b) => {
                let prec = self.precedence();
                child(f, a, a.precedence() < prec)?;
                f.write_str(if prec == 2 { " and " } else { " or " })?;
                // Right operands at the same level keep their parentheses so
                // that printing and parsing are structural inverses.
                child(f, b, b.precedence() <= prec)
            }
        }
    }
}

impl FromStr for Expr {
    type Err = PredicateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let tokens = tokenize(s)?;
        let mut parser = Parser { tokens, pos: 0 };
        let expr = parser.or_expr()?;
        match parser.tokens.get(parser.pos) {
            None => Ok(expr),
            Some((offset, tok)) => Err(PredicateError::Parse {
                offset: *offset,
                message: format!("unexpected `{tok:?}` after expression"),
            }),
        }
    }
}

impl Serialize for Expr {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Ident(String),
    Int(i64),
    True,
    False,
    Not,
    And,
    Or,
    Cmp(CmpOp),
    LParen,
    RParen,
}

fn tokenize(input: &str) -> Result<Vec<(usize, Token)>, PredicateError> {
    let bytes = input.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let two = input.get(i..i + 2);
        let tok = match c {
            '(' => {
                i += 1;
                Token::LParen
            }
            ')' => {
                i += 1;
                Token::RParen
            }
            '=' | '!' | '<' | '>' => {
                let op = match two {
                    Some("==") => Some((CmpOp::Eq, 2)),
                    Some("!=") => Some((CmpOp::Ne, 2)),
                    Some("<=") => Some((CmpOp::Le, 2)),
                    Some(">=") => Some((CmpOp::Ge, 2)),
                    _ if c == '<' => Some((CmpOp::Lt, 1)),
                    _ if c == '>' => Some((CmpOp::Gt, 1)),
                    _ => None,
                };
                let Some((op, len)) = op else {
                    return Err(PredicateError::Parse {
                        offset: i,
                        message: format!("unexpected character `{c}`"),
                    });
                };
                i += len;
                Token::Cmp(op)
            }
            '-' | '0'..='9' => {
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                let text = &input[start..i];
                let n = text.parse::<i64>().map_err(|_| PredicateError::Parse {
                    offset: start,
                    message: format!("bad integer literal `{text}`"),
                })?;
                Token::Int(n)
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                match &input[start..i] {
                    "true" => Token::True,
                    "false" => Token::False,
                    "not" => Token::Not,
                    "and" => Token::And,
                    "or" => Token::Or,
                    ident => Token::Ident(ident.to_owned()),
                }
            }
            other => {
                return Err(PredicateError::Parse {
                    offset: i,
                    message: format!("unexpected character `{other}`"),
                })
            }
        };
        out.push((start, tok));
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(usize, Token)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.tokens
            .get(self.pos)
            .map(|(o, _)| *o)
            .unwrap_or_else(|| self.tokens.last().map(|(o, _)| o + 1).unwrap_or(0))
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T, PredicateError> {
        Err(PredicateError::Parse {
            offset: self.offset(),
            message: message.into(),
        })
    }

    fn or_expr(&mut self) -> Result<Expr, PredicateError> {
        let mut lhs = self.and_expr()?;
        while self.peek() == Some(&Token::Or) {
            self.pos += 1;
            let rhs = self.and_expr()?;
            lhs = Expr::or(lhs, rhs);
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> Result<Expr, PredicateError> {
        let mut lhs = self.unary()?;
        while self.peek() == Some(&Token::And) {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::and(lhs, rhs);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, PredicateError> {
        if self.peek() == Some(&Token::Not) {
            self.pos += 1;
            return Ok(Expr::not(self.unary()?));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr, PredicateError> {
        let Some(tok) = self.peek().cloned() else {
            return self.error("unexpected end of expression");
        };
        self.pos += 1;
        match tok {
            Token::LParen => {
                let inner = self.or_expr()?;
                if self.peek() != Some(&Token::RParen) {
                    return self.error("expected `)`");
                }
                self.pos += 1;
                Ok(inner)
            }
            Token::True => Ok(Expr::True),
            Token::False => Ok(Expr::False),
            Token::Ident(name) => {
                if let Some(Token::Cmp(op)) = self.peek().cloned() {
                    self.pos += 1;
                    let lit = match self.peek() {
                        Some(Token::Int(n)) => Value::Int(*n),
                        Some(Token::True) => Value::Bool(true),
                        Some(Token::False) => Value::Bool(false),
                        _ => return self.error("expected a literal after comparison"),
                    };
                    self.pos += 1;
                    Ok(Expr::Cmp(name, op, lit))
                } else {
                    Ok(Expr::Var(name))
                }
            }
            other => {
                self.pos -= 1;
                self.error(format!("unexpected `{other:?}`"))
            }
        }
    }
}

/// Total binding of variables to values.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Environment(BTreeMap<String, Value>);

impl Environment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, var: impl Into<String>, value: Value) -> Self {
        self.0.insert(var.into(), value);
        self
    }

    pub fn set(&mut self, var: impl Into<String>, value: Value) {
        self.0.insert(var.into(), value);
    }

    pub fn get(&self, var: &str) -> Result<Value, PredicateError> {
        self.0
            .get(var)
            .copied()
            .ok_or_else(|| PredicateError::UnboundVariable(var.to_owned()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Value)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromIterator<(String, Value)> for Environment {
    fn from_iter<I: IntoIterator<Item = (String, Value)>>(iter: I) -> Self {
        Environment(iter.into_iter().collect())
    }
}

impl fmt::Display for Environment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, (k, v)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{k}={v}")?;
        }
        f.write_str("}")
    }
}

/// Every total assignment of `vars` over their `domains`, in lexicographic
/// order of the domain lists. Variables without a domain are skipped.
pub fn assignments<'a>(
    domains: &'a BTreeMap<String, Vec<Value>>,
    vars: impl IntoIterator<Item = &'a str>,
) -> Vec<Environment> {
    let vars: Vec<(&str, &Vec<Value>)> = vars
        .into_iter()
        .filter_map(|v| domains.get_key_value(v).map(|(k, d)| (k.as_str(), d)))
        .collect();
    let mut out = vec![Environment::new()];
    for (var, domain) in vars {
        out = out
            .into_iter()
            .flat_map(|env| {
                domain
                    .iter()
                    .map(move |value| env.clone().with(var, *value))
            })
            .collect();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, Value)]) -> Environment {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn guard_from_table_holds_when_sharing_enabled() {
        let p: Expr = "shareEnabled".parse().unwrap();
        assert!(p
            .eval(&env(&[("shareEnabled", Value::Bool(true))]))
            .unwrap());
    }

    #[test]
    fn literal_true_ignores_environment() {
        assert!(Expr::True.eval(&Environment::new()).unwrap());
    }

    #[test]
    fn negation() {
        let p: Expr = "not friendFound".parse().unwrap();
        assert!(!p.eval(&env(&[("friendFound", Value::Bool(true))])).unwrap());
    }

    #[test]
    fn unbound_variable_is_an_error() {
        let p: Expr = "x and y".parse().unwrap();
        let err = p.eval(&env(&[("x", Value::Bool(true))])).unwrap_err();
        assert_eq!(err, PredicateError::UnboundVariable("y".into()));
    }

    #[test]
    fn precedence_not_and_or() {
        let p: Expr = "not a or b and c".parse().unwrap();
        assert_eq!(
            p,
            Expr::or(
                Expr::not(Expr::var("a")),
                Expr::and(Expr::var("b"), Expr::var("c"))
            )
        );
        assert_eq!(p.to_string(), "not a or b and c");
    }

    #[test]
    fn integer_comparisons() {
        let e = env(&[("n", Value::Int(2))]);
        for (src, want) in [
            ("n == 2", true),
            ("n != 2", false),
            ("n < 3", true),
            ("n <= 1", false),
            ("n > -1", true),
            ("n >= 3", false),
        ] {
            let p: Expr = src.parse().unwrap();
            assert_eq!(p.eval(&e).unwrap(), want, "{src}");
        }
    }

    #[test]
    fn ordering_on_booleans_is_rejected() {
        let p: Expr = "b < true".parse().unwrap();
        assert!(matches!(
            p.eval(&env(&[("b", Value::Bool(false))])),
            Err(PredicateError::TypeMismatch { .. })
        ));
    }

    #[test]
    fn parse_errors_carry_offsets() {
        assert!(matches!(
            "a and".parse::<Expr>(),
            Err(PredicateError::Parse { .. })
        ));
        assert!(matches!(
            "(a".parse::<Expr>(),
            Err(PredicateError::Parse { .. })
        ));
        assert!(matches!(
            "a $ b".parse::<Expr>(),
            Err(PredicateError::Parse { offset: 2, .. })
        ));
    }

    #[test]
    fn right_nested_operands_keep_parentheses() {
        let p = Expr::and(Expr::var("a"), Expr::and(Expr::var("b"), Expr::var("c")));
        assert_eq!(p.to_string(), "a and (b and c)");
        assert_eq!(p.to_string().parse::<Expr>().unwrap(), p);
    }

    #[test]
    fn assignments_enumerate_product() {
        let mut domains = BTreeMap::new();
        domains.insert("x".into(), vec![Value::Bool(false), Value::Bool(true)]);
        domains.insert(
            "n".into(),
            vec![Value::Int(0), Value::Int(1), Value::Int(2)],
        );
        let all = assignments(&domains, ["x", "n"]);
        assert_eq!(all.len(), 6);
        assert_eq!(assignments(&domains, []).len(), 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_expr() -> impl Strategy<Value = Expr> {
            let leaf = prop_oneof![
                Just(Expr::True),
                Just(Expr::False),
                "[a-d]".prop_map(Expr::Var),
                ("[a-d]", -3i64..3).prop_map(|(v, n)| Expr::Cmp(v, CmpOp::Le, Value::Int(n))),
                "[a-d]".prop_map(|v| Expr::Cmp(v, CmpOp::Eq, Value::Bool(true))),
            ];
            leaf.prop_recursive(4, 24, 2, |inner| {
                prop_oneof![
                    inner.clone().prop_map(Expr::not),
                    (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::and(a, b)),
                    (inner.clone(), inner).prop_map(|(a, b)| Expr::or(a, b)),
                ]
            })
        }

        proptest! {
            #[test]
            fn print_parse_is_identity(e in arb_expr()) {
                let printed = e.to_string();
                let reparsed: Expr = printed.parse().unwrap();
                prop_assert_eq!(&reparsed, &e);
                prop_assert_eq!(reparsed.to_string(), printed);
            }
        }
    }
}
