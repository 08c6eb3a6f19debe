//! A small arithmetic language for coefficient definitions in config files.
//!
//! Expressions range over the time variable `t` and the spatial coordinates
//! `x1..xd`. The grammar (see README) supports `+ - * /`, unary minus and the
//! functions `min`, `max`, `abs`, `exp`, `log`, `sqrt`, `sin`, `cos`, `pow`.
//! Evaluation walks the tree and never allocates unless it fails.

use std::fmt;

use thiserror::Error;

/// Binary operators, all left-associative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
        }
    }
}

/// Built-in functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Min,
    Max,
    Abs,
    Exp,
    Log,
    Sqrt,
    Sin,
    Cos,
    Pow,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "min" => Func::Min,
            "max" => Func::Max,
            "abs" => Func::Abs,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "pow" => Func::Pow,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Min => "min",
            Func::Max => "max",
            Func::Abs => "abs",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Pow => "pow",
        }
    }

    /// Accepted argument counts `(min, max)`; `None` means unbounded.
    fn arity(self) -> (usize, Option<usize>) {
        match self {
            Func::Min | Func::Max => (2, None),
            Func::Pow => (2, Some(2)),
            _ => (1, Some(1)),
        }
    }
}

/// Expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    /// The time variable `t`.
    Time,
    /// Spatial coordinate, zero-based (`x1` is `Var(0)`).
    Var(usize),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("syntax error at position {pos}: expected {}, found {found}", expected.join(" or "))]
    Syntax {
        pos: usize,
        expected: Vec<&'static str>,
        found: String,
    },
    #[error("unknown identifier '{name}' at position {pos}")]
    UnknownIdentifier { pos: usize, name: String },
    #[error("variable index exceeds dimension: '{name}' at position {pos} with d = {dim}")]
    VariableIndex { pos: usize, name: String, dim: usize },
    #[error("function '{name}' at position {pos} takes {expected} argument(s), got {got}")]
    Arity {
        pos: usize,
        name: &'static str,
        expected: String,
        got: usize,
    },
    #[error("empty expression")]
    Empty,
}

impl ParseError {
    /// Byte offset of the error in the source, when it has one.
    pub fn position(&self) -> Option<usize> {
        match self {
            ParseError::Syntax { pos, .. }
            | ParseError::UnknownIdentifier { pos, .. }
            | ParseError::VariableIndex { pos, .. }
            | ParseError::Arity { pos, .. } => Some(*pos),
            ParseError::Empty => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainKind {
    DivisionByZero,
    LogNonPositive,
    SqrtNegative,
    PowNegativeBase,
    /// `x` shorter than a referenced coordinate.
    MissingCoordinate,
}

impl fmt::Display for DomainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DomainKind::DivisionByZero => "division by zero",
            DomainKind::LogNonPositive => "log of non-positive value",
            DomainKind::SqrtNegative => "sqrt of negative value",
            DomainKind::PowNegativeBase => "pow with negative base and non-integer exponent",
            DomainKind::MissingCoordinate => "coordinate missing from point",
        })
    }
}

/// Evaluation failure, carrying the offending sub-expression.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("domain error: {kind} in `{expr}`")]
pub struct EvalError {
    pub kind: DomainKind,
    pub expr: String,
}

impl Expr {
    /// Evaluates at time `t` and point `x`.
    pub fn eval(&self, t: f64, x: &[f64]) -> Result<f64, EvalError> {
        let fail = |kind| {
            Err(EvalError {
                kind,
                expr: self.to_string(),
            })
        };
        match self {
            Expr::Num(v) => Ok(*v),
            Expr::Time => Ok(t),
            Expr::Var(i) => match x.get(*i) {
                Some(v) => Ok(*v),
                None => fail(DomainKind::MissingCoordinate),
            },
            Expr::Neg(e) => Ok(-e.eval(t, x)?),
            Expr::Bin(op, l, r) => {
                let a = l.eval(t, x)?;
                let b = r.eval(t, x)?;
                match op {
                    BinOp::Add => Ok(a + b),
                    BinOp::Sub => Ok(a - b),
                    BinOp::Mul => Ok(a * b),
                    BinOp::Div => {
                        if b == 0.0 {
                            fail(DomainKind::DivisionByZero)
                        } else {
                            Ok(a / b)
                        }
                    }
                }
            }
            Expr::Call(func, args) => {
                let arg = |i: usize| args[i].eval(t, x);
                match func {
                    Func::Min | Func::Max => {
                        let mut acc = arg(0)?;
                        for a in &args[1..] {
                            let v = a.eval(t, x)?;
                            acc = if *func == Func::Min { acc.min(v) } else { acc.max(v) };
                        }
                        Ok(acc)
                    }
                    Func::Abs => Ok(arg(0)?.abs()),
                    Func::Exp => Ok(arg(0)?.exp()),
                    Func::Sin => Ok(arg(0)?.sin()),
                    Func::Cos => Ok(arg(0)?.cos()),
                    Func::Log => {
                        let v = arg(0)?;
                        if v <= 0.0 {
                            fail(DomainKind::LogNonPositive)
                        } else {
                            Ok(v.ln())
                        }
                    }
                    Func::Sqrt => {
                        let v = arg(0)?;
                        if v < 0.0 {
                            fail(DomainKind::SqrtNegative)
                        } else {
                            Ok(v.sqrt())
                        }
                    }
                    Func::Pow => {
                        let base = arg(0)?;
                        let exp = arg(1)?;
                        if base < 0.0 && exp.fract() != 0.0 {
                            fail(DomainKind::PowNegativeBase)
                        } else {
                            Ok(base.powf(exp))
                        }
                    }
                }
            }
        }
    }

    /// True when the tree references neither `t` nor any coordinate.
    pub fn is_constant(&self) -> bool {
        match self {
            Expr::Num(_) => true,
            Expr::Time | Expr::Var(_) => false,
            Expr::Neg(e) => e.is_constant(),
            Expr::Bin(_, l, r) => l.is_constant() && r.is_constant(),
            Expr::Call(_, args) => args.iter().all(Expr::is_constant),
        }
    }

    /// True when the tree references `t`.
    pub fn uses_time(&self) -> bool {
        match self {
            Expr::Time => true,
            Expr::Num(_) | Expr::Var(_) => false,
            Expr::Neg(e) => e.uses_time(),
            Expr::Bin(_, l, r) => l.uses_time() || r.uses_time(),
            Expr::Call(_, args) => args.iter().any(Expr::uses_time),
        }
    }

    /// Highest coordinate index referenced, one-based (0 if none).
    pub fn max_var(&self) -> usize {
        match self {
            Expr::Num(_) | Expr::Time => 0,
            Expr::Var(i) => i + 1,
            Expr::Neg(e) => e.max_var(),
            Expr::Bin(_, l, r) => l.max_var().max(r.max_var()),
            Expr::Call(_, args) => args.iter().map(Expr::max_var).max().unwrap_or(0),
        }
    }
}

/// Fully parenthesized, so the output reparses to the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Time => f.write_str("t"),
            Expr::Var(i) => write!(f, "x{}", i + 1),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Bin(op, l, r) => write!(f, "({l} {} {r})", op.symbol()),
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("identifier '{s}'"),
            Tok::Op(c) => format!("'{c}'"),
            Tok::LParen => "'('".into(),
            Tok::RParen => "')'".into(),
            Tok::Comma => "','".into(),
            Tok::End => "end of input".into(),
        }
    }
}

fn tokenize(src: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() || c == '.' {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let text = &src[start..i];
            let v: f64 = text.parse().map_err(|_| ParseError::Syntax {
                pos: start,
                expected: vec!["number"],
                found: format!("'{text}'"),
            })?;
            out.push((Tok::Num(v), start));
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((Tok::Ident(src[start..i].to_string()), start));
            continue;
        }
        let tok = match c {
            '+' | '-' | '*' | '/' => Tok::Op(c),
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            ',' => Tok::Comma,
            _ => {
                let ch = src[start..].chars().next().unwrap_or(c);
                return Err(ParseError::Syntax {
                    pos: start,
                    expected: vec!["number", "identifier", "operator", "'('"],
                    found: format!("'{ch}'"),
                });
            }
        };
        out.push((tok, start));
        i += 1;
    }
    out.push((Tok::End, src.len()));
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    dim: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn unexpected(&self, expected: Vec<&'static str>) -> ParseError {
        ParseError::Syntax {
            pos: self.offset(),
            expected,
            found: self.peek().describe(),
        }
    }

    fn expect(&mut self, tok: Tok, name: &'static str) -> Result<(), ParseError> {
        if *self.peek() == tok {
            self.bump();
            Ok(())
        } else {
            Err(self.unexpected(vec![name]))
        }
    }

    // sum := product (('+' | '-') product)*
    fn sum(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.product()?;
        loop {
            let op = match self.peek() {
                Tok::Op('+') => BinOp::Add,
                Tok::Op('-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.product()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    // product := unary (('*' | '/') unary)*
    fn product(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Op('*') => BinOp::Mul,
                Tok::Op('/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    // unary := '-' unary | primary
    fn unary(&mut self) -> Result<Expr, ParseError> {
        if *self.peek() == Tok::Op('-') {
            self.bump();
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let at = self.offset();
        match self.peek().clone() {
            Tok::Num(v) => {
                self.bump();
                Ok(Expr::Num(v))
            }
            Tok::LParen => {
                self.bump();
                let e = self.sum()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(e)
            }
            Tok::Ident(name) => {
                self.bump();
                if *self.peek() == Tok::LParen {
                    let func = Func::from_name(&name).ok_or_else(|| ParseError::UnknownIdentifier {
                        pos: at,
                        name: name.clone(),
                    })?;
                    self.bump();
                    let mut args = vec![self.sum()?];
                    while *self.peek() == Tok::Comma {
                        self.bump();
                        args.push(self.sum()?);
                    }
                    self.expect(Tok::RParen, "')'")?;
                    let (lo, hi) = func.arity();
                    if args.len() < lo || hi.is_some_and(|h| args.len() > h) {
                        let expected = match hi {
                            Some(h) if h == lo => lo.to_string(),
                            Some(h) => format!("{lo}..{h}"),
                            None => format!("at least {lo}"),
                        };
                        return Err(ParseError::Arity {
                            pos: at,
                            name: func.name(),
                            expected,
                            got: args.len(),
                        });
                    }
                    return Ok(Expr::Call(func, args));
                }
                self.variable(&name, at)
            }
            _ => Err(self.unexpected(vec!["number", "identifier", "'('", "'-'"])),
        }
    }

    fn variable(&self, name: &str, at: usize) -> Result<Expr, ParseError> {
        if name == "t" {
            return Ok(Expr::Time);
        }
        if let Some(idx) = name.strip_prefix('x') {
            if let Ok(i) = idx.parse::<usize>() {
                if !idx.starts_with('0') && i >= 1 {
                    if i > self.dim {
                        return Err(ParseError::VariableIndex {
                            pos: at,
                            name: name.to_string(),
                            dim: self.dim,
                        });
                    }
                    return Ok(Expr::Var(i - 1));
                }
            }
        }
        Err(ParseError::UnknownIdentifier {
            pos: at,
            name: name.to_string(),
        })
    }
}

/// Parses `text` for a `d`-dimensional problem.
pub fn parse(text: &str, d: usize) -> Result<Expr, ParseError> {
    if text.trim().is_empty() {
        return Err(ParseError::Empty);
    }
    let mut p = Parser {
        toks: tokenize(text)?,
        pos: 0,
        dim: d,
    };
    let e = p.sum()?;
    if *p.peek() != Tok::End {
        return Err(p.unexpected(vec!["operator", "end of input"]));
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(s: &str, t: f64, x: &[f64]) -> Result<f64, EvalError> {
        parse(s, x.len().max(1)).unwrap().eval(t, x)
    }

    #[test]
    fn precedence() {
        assert_eq!(ev("1 + 2*3", 0.0, &[0.0]).unwrap(), 7.0);
        assert_eq!(ev("(1 + 2)*3", 0.0, &[0.0]).unwrap(), 9.0);
        assert_eq!(ev("8 - 3 - 2", 0.0, &[0.0]).unwrap(), 3.0);
        assert_eq!(ev("8 / 4 / 2", 0.0, &[0.0]).unwrap(), 1.0);
        assert_eq!(ev("-2*3 + 1", 0.0, &[0.0]).unwrap(), -5.0);
        assert_eq!(ev("--2", 0.0, &[0.0]).unwrap(), 2.0);
    }

    #[test]
    fn ramp_and_functions() {
        assert_eq!(ev("max(0, x1 - 1.0)", 0.0, &[3.0]).unwrap(), 2.0);
        assert_eq!(ev("cos(x1)", 0.0, &[0.0]).unwrap(), 1.0);
        let v = ev("exp(-t)*cos(x1)", 1.0, &[0.0]).unwrap();
        assert!((v - 0.367_879_441_171_442_3).abs() < 1e-15);
        assert_eq!(ev("min(3, 1, 2)", 0.0, &[0.0]).unwrap(), 1.0);
        assert_eq!(ev("pow(-2, 3)", 0.0, &[0.0]).unwrap(), -8.0);
        assert_eq!(ev("abs(x1) + sqrt(4) + log(1)", 0.0, &[-1.5]).unwrap(), 3.5);
        assert_eq!(ev("1.5e2 + .5", 0.0, &[0.0]).unwrap(), 150.5);
    }

    #[test]
    fn variable_bounds() {
        let err = parse("x2", 1).unwrap_err();
        assert!(matches!(err, ParseError::VariableIndex { pos: 0, .. }));
        assert!(err.to_string().contains("variable index exceeds dimension"));
        assert!(parse("x2 + x1", 2).is_ok());
        assert!(matches!(parse("y", 1), Err(ParseError::UnknownIdentifier { .. })));
        assert!(matches!(parse("x0", 1), Err(ParseError::UnknownIdentifier { .. })));
        assert!(matches!(parse("foo(1)", 1), Err(ParseError::UnknownIdentifier { .. })));
    }

    #[test]
    fn syntax_errors_carry_position() {
        let err = parse("1 + * 2", 1).unwrap_err();
        assert_eq!(err.position(), Some(4));
        let err = parse("(1 + 2", 1).unwrap_err();
        assert_eq!(err.position(), Some(6));
        let err = parse("1 2", 1).unwrap_err();
        assert_eq!(err.position(), Some(2));
        let err = parse("2 $ 3", 1).unwrap_err();
        assert_eq!(err.position(), Some(2));
        assert!(matches!(parse("pow(1)", 1), Err(ParseError::Arity { .. })));
        assert!(matches!(parse("cos(1, 2)", 1), Err(ParseError::Arity { .. })));
        assert_eq!(parse("   ", 1), Err(ParseError::Empty));
    }

    #[test]
    fn domain_errors() {
        let err = ev("1/x1", 0.0, &[0.0]).unwrap_err();
        assert_eq!(err.kind, DomainKind::DivisionByZero);
        assert_eq!(err.expr, "(1.0 / x1)");
        assert_eq!(ev("log(x1)", 0.0, &[0.0]).unwrap_err().kind, DomainKind::LogNonPositive);
        assert_eq!(ev("sqrt(x1)", 0.0, &[-1.0]).unwrap_err().kind, DomainKind::SqrtNegative);
        assert_eq!(ev("pow(x1, 0.5)", 0.0, &[-1.0]).unwrap_err().kind, DomainKind::PowNegativeBase);
        // the error names the innermost failing node
        let err = ev("1 + 2 * log(x1 - 1)", 0.0, &[0.5]).unwrap_err();
        assert_eq!(err.expr, "log((x1 - 1.0))");
    }

    #[test]
    fn constant_detection() {
        assert!(parse("sqrt(2) * 3", 1).unwrap().is_constant());
        assert!(!parse("1 + t", 1).unwrap().is_constant());
        assert!(!parse("cos(x1)", 1).unwrap().is_constant());
        assert_eq!(parse("x3 + x1", 3).unwrap().max_var(), 3);
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0.0f64..1e6).prop_map(Expr::Num),
            Just(Expr::Time),
            (0usize..3).prop_map(Expr::Var),
        ];
        leaf.prop_recursive(5, 48, 3, |inner| {
            prop_oneof![
                inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
                (
                    prop_oneof![Just(BinOp::Add), Just(BinOp::Sub), Just(BinOp::Mul), Just(BinOp::Div)],
                    inner.clone(),
                    inner.clone()
                )
                    .prop_map(|(op, l, r)| Expr::Bin(op, Box::new(l), Box::new(r))),
                (
                    prop_oneof![Just(Func::Exp), Just(Func::Cos), Just(Func::Abs), Just(Func::Log)],
                    inner.clone()
                )
                    .prop_map(|(f, a)| Expr::Call(f, vec![a])),
                (prop_oneof![Just(Func::Min), Just(Func::Max), Just(Func::Pow)], inner.clone(), inner)
                    .prop_map(|(f, a, b)| Expr::Call(f, vec![a, b])),
            ]
        })
    }

    proptest! {
        #[test]
        fn pretty_print_round_trips(e in arb_expr()) {
            let printed = e.to_string();
            let reparsed = parse(&printed, 3).unwrap();
            prop_assert_eq!(reparsed, e);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn binary_ops_match_host(a in -1e6f64..1e6, b in -1e6f64..1e6) {
            let x = [a, b];
            prop_assert_eq!(ev("x1 + x2", 0.0, &x).unwrap(), a + b);
            prop_assert_eq!(ev("x1 - x2", 0.0, &x).unwrap(), a - b);
            prop_assert_eq!(ev("x1 * x2", 0.0, &x).unwrap(), a * b);
            if b != 0.0 {
                prop_assert_eq!(ev("x1 / x2", 0.0, &x).unwrap(), a / b);
            }
        }
    }
}
