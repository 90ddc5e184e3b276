//! Ground constraints over breakpoint beliefs.
//!
//! A constraint is an s-expression over atoms `(E j "text")`, `(C j "text")`
//! and `(U j "text")`, each stating that the proposition `text` carries the
//! given label at breakpoint `j`:
//!
//! ```text
//! expr := atom | "(" ("and"|"or") expr expr+ ")" | "(" "not" expr ")"
//!       | "(" "implies" expr expr ")"
//! atom := "(" ("E"|"C"|"U") INT QSTRING ")"
//! ```
//!
//! Connectives are case-insensitive, predicates are not.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::corpus::{Example, TruthLabel};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConstraintError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown predicate '{name}' at byte {offset}")]
    UnknownPredicate { name: String, offset: usize },
    #[error("no label assigned to {0}")]
    MissingAtom(ConstraintAtom),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConstraintAtom {
    pub predicate: TruthLabel,
    /// 1-based breakpoint ordinal.
    pub breakpoint: usize,
    pub text: String,
}

impl ConstraintAtom {
    pub fn new(predicate: TruthLabel, breakpoint: usize, text: impl Into<String>) -> Self {
        ConstraintAtom { predicate, breakpoint, text: text.into() }
    }
}

impl fmt::Display for ConstraintAtom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({} {} \"", self.predicate.predicate(), self.breakpoint)?;
        for c in self.text.chars() {
            if c == '"' || c == '\\' {
                f.write_str("\\")?;
            }
            write!(f, "{c}")?;
        }
        f.write_str("\")")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConstraintExpr {
    Atom(ConstraintAtom),
    And(Vec<ConstraintExpr>),
    Or(Vec<ConstraintExpr>),
    Not(Box<ConstraintExpr>),
    Implies(Box<ConstraintExpr>, Box<ConstraintExpr>),
}

impl ConstraintExpr {
    pub fn atom(predicate: TruthLabel, breakpoint: usize, text: impl Into<String>) -> Self {
        ConstraintExpr::Atom(ConstraintAtom::new(predicate, breakpoint, text))
    }

    pub fn implies(lhs: ConstraintExpr, rhs: ConstraintExpr) -> Self {
        ConstraintExpr::Implies(Box::new(lhs), Box::new(rhs))
    }

    pub fn not(inner: ConstraintExpr) -> Self {
        ConstraintExpr::Not(Box::new(inner))
    }

    /// Every atom in left-to-right order.
    pub fn atoms(&self) -> Vec<&ConstraintAtom> {
        let mut out = Vec::new();
        self.collect_atoms(&mut out);
        out
    }

    fn collect_atoms<'a>(&'a self, out: &mut Vec<&'a ConstraintAtom>) {
        match self {
            ConstraintExpr::Atom(a) => out.push(a),
            ConstraintExpr::And(xs) | ConstraintExpr::Or(xs) => xs.iter().for_each(|x| x.collect_atoms(out)),
            ConstraintExpr::Not(x) => x.collect_atoms(out),
            ConstraintExpr::Implies(l, r) => {
                l.collect_atoms(out);
                r.collect_atoms(out);
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            ConstraintExpr::Atom(_) => 1,
            ConstraintExpr::And(xs) | ConstraintExpr::Or(xs) => 1 + xs.iter().map(Self::depth).max().unwrap_or(0),
            ConstraintExpr::Not(x) => 1 + x.depth(),
            ConstraintExpr::Implies(l, r) => 1 + l.depth().max(r.depth()),
        }
    }
}

impl fmt::Display for ConstraintExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |f: &mut fmt::Formatter<'_>, head: &str, xs: &[&ConstraintExpr]| {
            write!(f, "({head}")?;
            for x in xs {
                write!(f, " {x}")?;
            }
            f.write_str(")")
        };
        match self {
            ConstraintExpr::Atom(a) => write!(f, "{a}"),
            ConstraintExpr::And(xs) => list(f, "and", &xs.iter().collect::<Vec<_>>()),
            ConstraintExpr::Or(xs) => list(f, "or", &xs.iter().collect::<Vec<_>>()),
            ConstraintExpr::Not(x) => list(f, "not", &[x]),
            ConstraintExpr::Implies(l, r) => list(f, "implies", &[l, r]),
        }
    }
}

/// Labels per (breakpoint, proposition text).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignment {
    labels: HashMap<usize, HashMap<String, TruthLabel>>,
}

impl Assignment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, breakpoint: usize, text: &str, label: TruthLabel) {
        self.labels.entry(breakpoint).or_default().insert(text.to_string(), label);
    }

    pub fn get(&self, breakpoint: usize, text: &str) -> Option<TruthLabel> {
        self.labels.get(&breakpoint)?.get(text).copied()
    }

    pub fn len(&self) -> usize {
        self.labels.values().map(HashMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ---------------------------------------------------------------------------
// Parsing

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T, ConstraintError> {
        Err(ConstraintError::Syntax { offset: self.pos, message: message.into() })
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.src[self.pos..].chars().next() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.src[self.pos..].chars().next()
    }

    fn expect(&mut self, want: char) -> Result<(), ConstraintError> {
        match self.peek() {
            Some(c) if c == want => {
                self.pos += c.len_utf8();
                Ok(())
            }
            Some(c) => self.err(format!("expected '{want}', found '{c}'")),
            None => self.err(format!("expected '{want}', found end of input")),
        }
    }

    fn symbol(&mut self) -> Result<(usize, &'a str), ConstraintError> {
        self.skip_ws();
        let start = self.pos;
        while let Some(c) = self.src[self.pos..].chars().next() {
            if c.is_whitespace() || c == '(' || c == ')' || c == '"' {
                break;
            }
            self.pos += c.len_utf8();
        }
        if start == self.pos {
            return self.err("expected a symbol");
        }
        Ok((start, &self.src[start..self.pos]))
    }

    fn string(&mut self) -> Result<String, ConstraintError> {
        self.expect('"')?;
        let mut out = String::new();
        let mut chars = self.src[self.pos..].char_indices();
        while let Some((i, c)) = chars.next() {
            match c {
                '"' => {
                    self.pos += i + 1;
                    return Ok(out);
                }
                '\\' => match chars.next() {
                    Some((_, escaped)) => out.push(escaped),
                    None => break,
                },
                c => out.push(c),
            }
        }
        self.pos = self.src.len();
        self.err("unterminated string")
    }

    fn expr(&mut self) -> Result<ConstraintExpr, ConstraintError> {
        self.expect('(')?;
        let (head_at, head) = self.symbol()?;
        let lower = head.to_ascii_lowercase();
        let node = match lower.as_str() {
            "and" | "or" => {
                let mut children = vec![self.expr()?];
                while self.peek() == Some('(') {
                    children.push(self.expr()?);
                }
                if children.len() < 2 {
                    return self.err(format!("'{head}' needs at least two operands"));
                }
                if lower == "and" {
                    ConstraintExpr::And(children)
                } else {
                    ConstraintExpr::Or(children)
                }
            }
            "not" => ConstraintExpr::Not(Box::new(self.expr()?)),
            "implies" => {
                let lhs = self.expr()?;
                let rhs = self.expr()?;
                ConstraintExpr::Implies(Box::new(lhs), Box::new(rhs))
            }
            _ => {
                let next_is_int = self.peek().is_some_and(|c| c.is_ascii_digit());
                if !next_is_int {
                    self.pos = head_at;
                    return self.err(format!("unknown operator '{head}'"));
                }
                let predicate = match head {
                    "E" => TruthLabel::Entailed,
                    "C" => TruthLabel::Contradicted,
                    "U" => TruthLabel::Unknown,
                    _ => return Err(ConstraintError::UnknownPredicate { name: head.to_string(), offset: head_at }),
                };
                let (int_at, digits) = self.symbol()?;
                let breakpoint: usize = match digits.parse() {
                    Ok(j) if j >= 1 => j,
                    _ => {
                        self.pos = int_at;
                        return self.err(format!("invalid breakpoint index '{digits}'"));
                    }
                };
                let text = self.string()?;
                ConstraintExpr::Atom(ConstraintAtom { predicate, breakpoint, text })
            }
        };
        self.expect(')')?;
        Ok(node)
    }
}

pub fn parse_constraint(src: &str) -> Result<ConstraintExpr, ConstraintError> {
    let mut p = Parser { src, pos: 0 };
    let expr = p.expr()?;
    if p.peek().is_some() {
        return p.err("trailing input");
    }
    Ok(expr)
}

/// Canonical form: lower-case connectives, one space between tokens.
pub fn render_constraint(c: &ConstraintExpr) -> String {
    c.to_string()
}

// ---------------------------------------------------------------------------
// Evaluation

fn lookup(atom: &ConstraintAtom, a: &Assignment) -> Result<bool, ConstraintError> {
    a.get(atom.breakpoint, &atom.text)
        .map(|label| label == atom.predicate)
        .ok_or_else(|| ConstraintError::MissingAtom(atom.clone()))
}

fn check_covered(c: &ConstraintExpr, a: &Assignment) -> Result<(), ConstraintError> {
    match c {
        ConstraintExpr::Atom(atom) => lookup(atom, a).map(|_| ()),
        ConstraintExpr::And(xs) | ConstraintExpr::Or(xs) => xs.iter().try_for_each(|x| check_covered(x, a)),
        ConstraintExpr::Not(x) => check_covered(x, a),
        ConstraintExpr::Implies(l, r) => {
            check_covered(l, a)?;
            check_covered(r, a)
        }
    }
}

fn eval_covered(c: &ConstraintExpr, a: &Assignment) -> bool {
    match c {
        ConstraintExpr::Atom(atom) => a.get(atom.breakpoint, &atom.text) == Some(atom.predicate),
        ConstraintExpr::And(xs) => xs.iter().all(|x| eval_covered(x, a)),
        ConstraintExpr::Or(xs) => xs.iter().any(|x| eval_covered(x, a)),
        ConstraintExpr::Not(x) => !eval_covered(x, a),
        ConstraintExpr::Implies(l, r) => !eval_covered(l, a) || eval_covered(r, a),
    }
}

/// Two-valued evaluation: an atom holds iff its proposition carries the
/// atom's label. Every atom must be assigned, even ones a short-circuit
/// would skip.
pub fn eval_constraint(c: &ConstraintExpr, a: &Assignment) -> Result<bool, ConstraintError> {
    check_covered(c, a)?;
    Ok(eval_covered(c, a))
}

/// Reference evaluator: evaluates every child and combines them through
/// explicit truth tables.
pub fn brute_force_eval(c: &ConstraintExpr, a: &Assignment) -> Result<bool, ConstraintError> {
    const IMPLIES: [[bool; 2]; 2] = [[true, true], [false, true]];
    Ok(match c {
        ConstraintExpr::Atom(atom) => lookup(atom, a)?,
        ConstraintExpr::And(xs) => {
            let vals = xs.iter().map(|x| brute_force_eval(x, a)).collect::<Result<Vec<_>, _>>()?;
            vals.iter().filter(|&&v| v).count() == vals.len()
        }
        ConstraintExpr::Or(xs) => {
            let vals = xs.iter().map(|x| brute_force_eval(x, a)).collect::<Result<Vec<_>, _>>()?;
            vals.iter().filter(|&&v| v).count() > 0
        }
        ConstraintExpr::Not(x) => [true, false][brute_force_eval(x, a)? as usize],
        ConstraintExpr::Implies(l, r) => {
            let lhs = brute_force_eval(l, a)?;
            let rhs = brute_force_eval(r, a)?;
            IMPLIES[lhs as usize][rhs as usize]
        }
    })
}

/// Number of the example's constraints that `a` violates, and the total.
pub fn story_violations(e: &Example, a: &Assignment) -> Result<(usize, usize), ConstraintError> {
    let mut violated = 0;
    for src in &e.constraints {
        let expr = parse_constraint(src)?;
        if !eval_constraint(&expr, a)? {
            violated += 1;
        }
    }
    Ok((violated, e.constraints.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use TruthLabel::*;

    const FIG4: &str = r#"(implies (and (E 2 "Derick is the father of Lisa") (E 3 "Qiana is the wife of Derick")) (E 3 "Qiana is the mother of Lisa"))"#;

    fn fig4_assignment(consequent: TruthLabel, first: TruthLabel) -> Assignment {
        let mut a = Assignment::new();
        a.insert(2, "Derick is the father of Lisa", first);
        a.insert(3, "Qiana is the wife of Derick", Entailed);
        a.insert(3, "Qiana is the mother of Lisa", consequent);
        a
    }

    #[test]
    fn parses_proof_constraint() {
        let c = parse_constraint(FIG4).unwrap();
        match &c {
            ConstraintExpr::Implies(lhs, rhs) => {
                assert!(matches!(&**lhs, ConstraintExpr::And(xs) if xs.len() == 2));
                assert_eq!(**rhs, ConstraintExpr::atom(Entailed, 3, "Qiana is the mother of Lisa"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(render_constraint(&c), FIG4);
    }

    #[test]
    fn parses_single_atom_and_renders_canonically() {
        let c = parse_constraint(r#"(E 1 "p")"#).unwrap();
        assert_eq!(c, ConstraintExpr::atom(Entailed, 1, "p"));
        assert_eq!(render_constraint(&c), r#"(E 1 "p")"#);
        let messy = "(  IMPLIES\n(E 1 \"p\")   (Not (C 2 \"q\")) )";
        assert_eq!(render_constraint(&parse_constraint(messy).unwrap()), r#"(implies (E 1 "p") (not (C 2 "q")))"#);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(parse_constraint(r#"(xor (E 1 "p") (E 1 "q"))"#), Err(ConstraintError::Syntax { offset: 1, .. })));
        assert!(matches!(parse_constraint(r#"(X 1 "p")"#), Err(ConstraintError::UnknownPredicate { .. })));
        assert!(matches!(parse_constraint(r#"(e 1 "p")"#), Err(ConstraintError::UnknownPredicate { .. })));
        assert!(parse_constraint(r#"(and (E 1 "p"))"#).is_err());
        assert!(parse_constraint(r#"(E 0 "p")"#).is_err());
        assert!(parse_constraint(r#"(E 1 "p)"#).is_err());
        assert!(parse_constraint(r#"(E 1 "p") extra"#).is_err());
    }

    #[test]
    fn escapes_round_trip() {
        let c = ConstraintExpr::atom(Unknown, 4, r#"a "quoted" \ text"#);
        let s = render_constraint(&c);
        assert_eq!(parse_constraint(&s).unwrap(), c);
    }

    #[test]
    fn modus_ponens_cases() {
        let c = parse_constraint(FIG4).unwrap();
        assert!(eval_constraint(&c, &fig4_assignment(Entailed, Entailed)).unwrap());
        assert!(!eval_constraint(&c, &fig4_assignment(Contradicted, Entailed)).unwrap());
        // Vacuous: the antecedent fails, so any consequent satisfies it.
        for consequent in TruthLabel::ALL {
            assert!(eval_constraint(&c, &fig4_assignment(consequent, Unknown)).unwrap());
        }
    }

    #[test]
    fn missing_atom_is_an_error_even_when_short_circuited() {
        let c = parse_constraint(r#"(or (E 1 "p") (E 1 "q"))"#).unwrap();
        let mut a = Assignment::new();
        a.insert(1, "p", Entailed);
        let err = eval_constraint(&c, &a).unwrap_err();
        assert_eq!(err, ConstraintError::MissingAtom(ConstraintAtom::new(Entailed, 1, "q")));
        assert_eq!(brute_force_eval(&c, &a).unwrap_err(), err);
    }

    #[test]
    fn brute_force_atoms() {
        let mut a = Assignment::new();
        a.insert(1, "p", Contradicted);
        assert!(brute_force_eval(&ConstraintExpr::atom(Contradicted, 1, "p"), &a).unwrap());
        assert!(!brute_force_eval(&ConstraintExpr::not(ConstraintExpr::atom(Contradicted, 1, "p")), &a).unwrap());
    }

    #[test]
    fn evaluators_agree_on_small_formulas() {
        let props = ["p", "q"];
        let atoms: Vec<ConstraintExpr> = props
            .iter()
            .flat_map(|p| TruthLabel::ALL.map(|l| ConstraintExpr::atom(l, 1, *p)))
            .collect();
        let mut formulas = atoms.clone();
        for x in &atoms {
            formulas.push(ConstraintExpr::not(x.clone()));
            for y in &atoms {
                formulas.push(ConstraintExpr::And(vec![x.clone(), y.clone()]));
                formulas.push(ConstraintExpr::Or(vec![x.clone(), y.clone()]));
                formulas.push(ConstraintExpr::implies(x.clone(), y.clone()));
            }
        }
        for lp in TruthLabel::ALL {
            for lq in TruthLabel::ALL {
                let mut a = Assignment::new();
                a.insert(1, "p", lp);
                a.insert(1, "q", lq);
                for f in &formulas {
                    assert_eq!(eval_constraint(f, &a), brute_force_eval(f, &a), "{f}");
                }
            }
        }
    }

    #[test]
    fn story_violation_counts() {
        let mut ex = Example::from_parts(
            "s",
            vec!["a".into(), "[B]".into()],
            vec![vec![
                crate::corpus::Proposition::new("p", Entailed),
                crate::corpus::Proposition::new("q", Entailed),
            ]],
        );
        assert_eq!(story_violations(&ex, &ex.gold_assignment()).unwrap(), (0, 0));
        ex.constraints = vec![r#"(implies (E 1 "p") (E 1 "q"))"#.into(), r#"(not (C 1 "p"))"#.into()];
        let gold = ex.gold_assignment();
        assert_eq!(story_violations(&ex, &gold).unwrap(), (0, 2));
        let mut flipped = gold.clone();
        flipped.insert(1, "q", Contradicted);
        assert_eq!(story_violations(&ex, &flipped).unwrap(), (1, 2));
    }

    fn arb_expr() -> impl Strategy<Value = ConstraintExpr> {
        let leaf = (0usize..3, 1usize..6, "[a-z \"\\\\]{1,8}")
            .prop_map(|(l, j, t)| ConstraintExpr::atom(TruthLabel::ALL[l], j, t));
        leaf.prop_recursive(4, 32, 4, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 2..4).prop_map(ConstraintExpr::And),
                prop::collection::vec(inner.clone(), 2..4).prop_map(ConstraintExpr::Or),
                inner.clone().prop_map(ConstraintExpr::not),
                (inner.clone(), inner).prop_map(|(l, r)| ConstraintExpr::implies(l, r)),
            ]
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn render_parse_fixpoint(c in arb_expr()) {
            let s = render_constraint(&c);
            let back = parse_constraint(&s).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(render_constraint(&back), s);
        }
    }
}
