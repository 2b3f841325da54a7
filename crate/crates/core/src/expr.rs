//! Arithmetic expressions in `x` and `y` for coefficient and initial-data
//! functions.
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := '-' unary | power
//! power := atom ('^' unary)?
//! atom  := number | 'x' | 'y' | 'pi' | ('sin' | 'cos' | 'exp') '(' expr ')' | '(' expr ')'
//! ```
//!
//! `^` is right associative and binds tighter than unary minus, so `-x^2`
//! is `-(x^2)`.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum ExprTree {
    Const(f64),
    X,
    Y,
    Pi,
    Neg(Box<ExprTree>),
    Add(Box<ExprTree>, Box<ExprTree>),
    Sub(Box<ExprTree>, Box<ExprTree>),
    Mul(Box<ExprTree>, Box<ExprTree>),
    Div(Box<ExprTree>, Box<ExprTree>),
    Pow(Box<ExprTree>, Box<ExprTree>),
    Sin(Box<ExprTree>),
    Cos(Box<ExprTree>),
    Exp(Box<ExprTree>),
}

impl ExprTree {
    pub fn references_y(&self) -> bool {
        use ExprTree::*;
        match self {
            Y => true,
            Const(_) | X | Pi => false,
            Neg(a) | Sin(a) | Cos(a) | Exp(a) => a.references_y(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Pow(a, b) => {
                a.references_y() || b.references_y()
            }
        }
    }
}

/// Fully parenthesized; parsing the output gives back the same tree.
impl fmt::Display for ExprTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use ExprTree::*;
        match self {
            Const(c) => write!(f, "{c:?}"),
            X => f.write_str("x"),
            Y => f.write_str("y"),
            Pi => f.write_str("pi"),
            Neg(a) => write!(f, "(-{a})"),
            Add(a, b) => write!(f, "({a} + {b})"),
            Sub(a, b) => write!(f, "({a} - {b})"),
            Mul(a, b) => write!(f, "({a} * {b})"),
            Div(a, b) => write!(f, "({a} / {b})"),
            Pow(a, b) => write!(f, "({a} ^ {b})"),
            Sin(a) => write!(f, "sin({a})"),
            Cos(a) => write!(f, "cos({a})"),
            Exp(a) => write!(f, "exp({a})"),
        }
    }
}

/// Evaluates at `x` and, for expressions in two variables, `y`.
pub fn eval_expr(e: &ExprTree, x: f64, y: Option<f64>) -> Result<f64> {
    use ExprTree::*;
    Ok(match e {
        Const(c) => *c,
        X => x,
        Y => y.ok_or_else(|| {
            Error::Contract("expression references y but no y was supplied".into())
        })?,
        Pi => std::f64::consts::PI,
        Neg(a) => -eval_expr(a, x, y)?,
        Add(a, b) => eval_expr(a, x, y)? + eval_expr(b, x, y)?,
        Sub(a, b) => eval_expr(a, x, y)? - eval_expr(b, x, y)?,
        Mul(a, b) => eval_expr(a, x, y)? * eval_expr(b, x, y)?,
        Div(a, b) => {
            let den = eval_expr(b, x, y)?;
            if den == 0.0 {
                return Err(Error::Eval(format!("division by zero in {e} at x = {x}")));
            }
            eval_expr(a, x, y)? / den
        }
        Pow(a, b) => eval_expr(a, x, y)?.powf(eval_expr(b, x, y)?),
        Sin(a) => eval_expr(a, x, y)?.sin(),
        Cos(a) => eval_expr(a, x, y)?.cos(),
        Exp(a) => eval_expr(a, x, y)?.exp(),
    })
}

pub fn parse_expr(src: &str) -> Result<ExprTree> {
    parse_expr_at(src, 1, 1)
}

/// Parses `src`, reporting positions as if it started at `line`, `column`.
pub fn parse_expr_at(src: &str, line: usize, column: usize) -> Result<ExprTree> {
    let mut p = Parser {
        chars: src.chars().collect(),
        pos: 0,
        line,
        column,
    };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos < p.chars.len() {
        return Err(p.error(format!("unexpected {:?}", p.chars[p.pos])));
    }
    Ok(e)
}

struct Parser {
    chars: Vec<char>,
    pos: usize,
    line: usize,
    column: usize,
}

impl Parser {
    fn error(&self, message: String) -> Error {
        Error::Syntax {
            line: self.line,
            column: self.column + self.pos,
            message,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.chars.len() && self.chars[self.pos].is_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.pos).copied()
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            let found = match self.peek() {
                Some(f) => format!("{f:?}"),
                None => "end of input".into(),
            };
            Err(self.error(format!("expected {c:?}, found {found}")))
        }
    }

    fn expr(&mut self) -> Result<ExprTree> {
        let mut lhs = self.term()?;
        loop {
            if self.eat('+') {
                lhs = ExprTree::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat('-') {
                lhs = ExprTree::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<ExprTree> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat('*') {
                lhs = ExprTree::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat('/') {
                lhs = ExprTree::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<ExprTree> {
        if self.eat('-') {
            return Ok(ExprTree::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<ExprTree> {
        let base = self.atom()?;
        if self.eat('^') {
            return Ok(ExprTree::Pow(Box::new(base), Box::new(self.unary()?)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<ExprTree> {
        match self.peek() {
            None => Err(self.error("unexpected end of input".into())),
            Some('(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == '.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => {
                let start = self.pos;
                while self.pos < self.chars.len() && self.chars[self.pos].is_ascii_alphanumeric() {
                    self.pos += 1;
                }
                let word: String = self.chars[start..self.pos].iter().collect();
                let func = |p: &mut Self, mk: fn(Box<ExprTree>) -> ExprTree| -> Result<ExprTree> {
                    p.expect('(')?;
                    let arg = p.expr()?;
                    p.expect(')')?;
                    Ok(mk(Box::new(arg)))
                };
                match word.as_str() {
                    "x" => Ok(ExprTree::X),
                    "y" => Ok(ExprTree::Y),
                    "pi" => Ok(ExprTree::Pi),
                    "sin" => func(self, ExprTree::Sin),
                    "cos" => func(self, ExprTree::Cos),
                    "exp" => func(self, ExprTree::Exp),
                    _ => {
                        self.pos = start;
                        Err(self.error(format!("unknown identifier {word:?}")))
                    }
                }
            }
            Some(c) => Err(self.error(format!("unexpected {c:?}"))),
        }
    }

    fn number(&mut self) -> Result<ExprTree> {
        let start = self.pos;
        let n = self.chars.len();
        let digits = |p: &mut Self| {
            while p.pos < n && p.chars[p.pos].is_ascii_digit() {
                p.pos += 1;
            }
        };
        digits(self);
        if self.pos < n && self.chars[self.pos] == '.' {
            self.pos += 1;
            digits(self);
        }
        if self.pos < n && matches!(self.chars[self.pos], 'e' | 'E') {
            let save = self.pos;
            self.pos += 1;
            if self.pos < n && matches!(self.chars[self.pos], '+' | '-') {
                self.pos += 1;
            }
            if self.pos < n && self.chars[self.pos].is_ascii_digit() {
                digits(self);
            } else {
                self.pos = save;
            }
        }
        let text: String = self.chars[start..self.pos].iter().collect();
        text.parse::<f64>().map(ExprTree::Const).map_err(|_| {
            self.pos = start;
            self.error(format!("malformed number {text:?}"))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(src: &str, x: f64, y: Option<f64>) -> f64 {
        eval_expr(&parse_expr(src).unwrap(), x, y).unwrap()
    }

    #[test]
    fn evaluation_examples() {
        assert!((ev("2*(1-x)", 0.25, None) - 1.5).abs() < 1e-15);
        assert!((ev("cos(2*pi*x)+4*sin(2*pi*y)", 0.0, Some(0.25)) - 5.0).abs() < 1e-14);
        assert!((ev("4*sin(pi*x)", 0.5, None) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("1+2*x^2", 2.0, None), 9.0);
        assert_eq!(ev("-x^2", 3.0, None), -9.0);
        assert_eq!(ev("2^3^2", 0.0, None), 512.0);
        assert_eq!(ev("8/4/2", 0.0, None), 1.0);
        assert_eq!(ev("1-2-3", 0.0, None), -4.0);
        assert_eq!(ev("1.5e1 + 2E-1", 0.0, None), 15.2);
    }

    #[test]
    fn errors_carry_positions() {
        match parse_expr_at("2*(1-x", 4, 7) {
            Err(Error::Syntax { line, column, .. }) => assert_eq!((line, column), (4, 13)),
            other => panic!("{other:?}"),
        }
        match parse_expr("2 * foo(x)") {
            Err(Error::Syntax {
                column, message, ..
            }) => {
                assert_eq!(column, 5);
                assert!(message.contains("foo"));
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_expr("").is_err());
        assert!(parse_expr("1 2").is_err());
    }

    #[test]
    fn evaluation_errors() {
        let e = parse_expr("1/(x-0.5)").unwrap();
        assert!(matches!(eval_expr(&e, 0.5, None), Err(Error::Eval(_))));
        let e = parse_expr("x+y").unwrap();
        assert!(e.references_y());
        assert!(matches!(eval_expr(&e, 0.5, None), Err(Error::Contract(_))));
    }

    fn arb_tree() -> impl Strategy<Value = ExprTree> {
        let leaf = prop_oneof![
            (0.0..100.0f64).prop_map(ExprTree::Const),
            Just(ExprTree::X),
            Just(ExprTree::Y),
            Just(ExprTree::Pi),
        ];
        leaf.prop_recursive(5, 48, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(|a| ExprTree::Neg(Box::new(a))),
                inner.clone().prop_map(|a| ExprTree::Sin(Box::new(a))),
                inner.clone().prop_map(|a| ExprTree::Cos(Box::new(a))),
                inner.clone().prop_map(|a| ExprTree::Exp(Box::new(a))),
                (inner.clone(), inner.clone())
                    .prop_map(|(a, b)| ExprTree::Add(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone())
                    .prop_map(|(a, b)| ExprTree::Sub(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone())
                    .prop_map(|(a, b)| ExprTree::Mul(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone())
                    .prop_map(|(a, b)| ExprTree::Div(Box::new(a), Box::new(b))),
                (inner.clone(), inner).prop_map(|(a, b)| ExprTree::Pow(Box::new(a), Box::new(b))),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_then_parse_round_trips(tree in arb_tree()) {
            let printed = tree.to_string();
            let back = parse_expr(&printed).unwrap();
            prop_assert_eq!(back, tree);
        }
    }
}
