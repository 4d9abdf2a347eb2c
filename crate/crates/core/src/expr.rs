//! Scalar expression language used for every coefficient function and smooth map.
//!
//! Expressions are immutable DAGs behind `Arc`, so cloning is cheap and sharing is
//! preserved through differentiation and substitution (both are memoized per node).
//! Numeric work goes through [`Tape`], a flat instruction list compiled once against a
//! fixed variable ordering.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

use crate::error::ExprError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Exp,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
        }
    }

    fn from_name(s: &str) -> Option<Func> {
        match s {
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "exp" => Some(Func::Exp),
            _ => None,
        }
    }
}

#[derive(Debug)]
enum Node {
    Const(BigRational),
    Var(Arc<str>),
    Add(ScalarExpr, ScalarExpr),
    Sub(ScalarExpr, ScalarExpr),
    Mul(ScalarExpr, ScalarExpr),
    Div(ScalarExpr, ScalarExpr),
    Neg(ScalarExpr),
    Pow(ScalarExpr, i32),
    Call(Func, ScalarExpr),
}

/// A symbolic real-valued expression.
#[derive(Clone)]
pub struct ScalarExpr(Arc<Node>);

impl fmt::Debug for ScalarExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ScalarExpr({self})")
    }
}

/// Returns true when `name` is an identifier accepted by the grammar.
///
/// Accepted forms are `x<digits>`, `w<digits>`, `y<digits>` and `t`.
pub fn is_valid_ident(name: &str) -> bool {
    if name == "t" {
        return true;
    }
    let mut chars = name.chars();
    match chars.next() {
        Some('x') | Some('w') | Some('y') => {
            let rest = chars.as_str();
            !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit())
        }
        _ => false,
    }
}

fn ptr_key(e: &ScalarExpr) -> usize {
    Arc::as_ptr(&e.0) as usize
}

impl ScalarExpr {
    fn node(n: Node) -> Self {
        ScalarExpr(Arc::new(n))
    }

    pub fn constant(value: BigRational) -> Self {
        Self::node(Node::Const(value))
    }

    pub fn int(value: i64) -> Self {
        Self::constant(BigRational::from_integer(BigInt::from(value)))
    }

    pub fn ratio(num: i64, den: i64) -> Self {
        Self::constant(BigRational::new(BigInt::from(num), BigInt::from(den)))
    }

    /// Exact rational closest to a finite `f64` (the binary value itself).
    pub fn from_f64(value: f64) -> Option<Self> {
        BigRational::from_float(value).map(Self::constant)
    }

    pub fn zero() -> Self {
        Self::int(0)
    }

    pub fn one() -> Self {
        Self::int(1)
    }

    pub fn var(name: &str) -> Self {
        Self::node(Node::Var(Arc::from(name)))
    }

    pub fn as_const(&self) -> Option<&BigRational> {
        match &*self.0 {
            Node::Const(c) => Some(c),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_const().is_some_and(|c| c.is_zero())
    }

    pub fn is_one(&self) -> bool {
        self.as_const().is_some_and(|c| c.is_one())
    }

    pub fn add(&self, other: &ScalarExpr) -> ScalarExpr {
        if self.is_zero() {
            return other.clone();
        }
        if other.is_zero() {
            return self.clone();
        }
        if let (Some(a), Some(b)) = (self.as_const(), other.as_const()) {
            return Self::constant(a + b);
        }
        Self::node(Node::Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &ScalarExpr) -> ScalarExpr {
        if other.is_zero() {
            return self.clone();
        }
        if self.is_zero() {
            return other.neg();
        }
        if let (Some(a), Some(b)) = (self.as_const(), other.as_const()) {
            return Self::constant(a - b);
        }
        Self::node(Node::Sub(self.clone(), other.clone()))
    }

    pub fn mul(&self, other: &ScalarExpr) -> ScalarExpr {
        if self.is_zero() || other.is_zero() {
            return Self::zero();
        }
        if self.is_one() {
            return other.clone();
        }
        if other.is_one() {
            return self.clone();
        }
        match (self.as_const(), other.as_const()) {
            (Some(a), Some(b)) => return Self::constant(a * b),
            (Some(a), None) if (-a).is_one() => return other.neg(),
            (None, Some(b)) if (-b).is_one() => return self.neg(),
            _ => {}
        }
        Self::node(Node::Mul(self.clone(), other.clone()))
    }

    pub fn div(&self, other: &ScalarExpr) -> ScalarExpr {
        if other.is_one() {
            return self.clone();
        }
        if let (Some(a), Some(b)) = (self.as_const(), other.as_const()) {
            if !b.is_zero() {
                return Self::constant(a / b);
            }
        }
        if self.is_zero() && other.as_const().is_none_or(|b| !b.is_zero()) {
            return Self::zero();
        }
        Self::node(Node::Div(self.clone(), other.clone()))
    }

    pub fn neg(&self) -> ScalarExpr {
        match &*self.0 {
            Node::Const(c) => Self::constant(-c),
            Node::Neg(inner) => inner.clone(),
            _ => Self::node(Node::Neg(self.clone())),
        }
    }

    pub fn powi(&self, n: i32) -> ScalarExpr {
        if n == 0 {
            return Self::one();
        }
        if n == 1 {
            return self.clone();
        }
        if let Some(c) = self.as_const() {
            if n > 0 || !c.is_zero() {
                return Self::constant(rational_powi(c, n));
            }
        }
        Self::node(Node::Pow(self.clone(), n))
    }

    pub fn call(f: Func, arg: &ScalarExpr) -> ScalarExpr {
        if arg.is_zero() {
            return match f {
                Func::Sin => Self::zero(),
                Func::Cos | Func::Exp => Self::one(),
            };
        }
        Self::node(Node::Call(f, arg.clone()))
    }

    pub fn sin(&self) -> ScalarExpr {
        Self::call(Func::Sin, self)
    }

    pub fn cos(&self) -> ScalarExpr {
        Self::call(Func::Cos, self)
    }

    pub fn exp(&self) -> ScalarExpr {
        Self::call(Func::Exp, self)
    }

    /// Parses an expression in the published grammar.
    pub fn parse(text: &str) -> Result<ScalarExpr, ExprError> {
        Parser::new(text).parse_all()
    }

    /// All variable names occurring in the expression.
    pub fn free_vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(e) = stack.pop() {
            if !seen.insert(ptr_key(&e)) {
                continue;
            }
            match &*e.0 {
                Node::Const(_) => {}
                Node::Var(v) => {
                    out.insert(v.to_string());
                }
                Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
                    stack.push(a.clone());
                    stack.push(b.clone());
                }
                Node::Neg(a) | Node::Pow(a, _) | Node::Call(_, a) => stack.push(a.clone()),
            }
        }
        out
    }

    /// Exact symbolic partial derivative with respect to `var`.
    pub fn diff(&self, var: &str) -> ScalarExpr {
        let mut memo = HashMap::new();
        self.diff_memo(var, &mut memo)
    }

    fn diff_memo(&self, var: &str, memo: &mut HashMap<usize, ScalarExpr>) -> ScalarExpr {
        if let Some(d) = memo.get(&ptr_key(self)) {
            return d.clone();
        }
        let d = match &*self.0 {
            Node::Const(_) => Self::zero(),
            Node::Var(v) => {
                if &**v == var {
                    Self::one()
                } else {
                    Self::zero()
                }
            }
            Node::Add(a, b) => a.diff_memo(var, memo).add(&b.diff_memo(var, memo)),
            Node::Sub(a, b) => a.diff_memo(var, memo).sub(&b.diff_memo(var, memo)),
            Node::Mul(a, b) => {
                let da = a.diff_memo(var, memo);
                let db = b.diff_memo(var, memo);
                da.mul(b).add(&a.mul(&db))
            }
            Node::Div(a, b) => {
                let da = a.diff_memo(var, memo);
                let db = b.diff_memo(var, memo);
                if db.is_zero() {
                    da.div(b)
                } else {
                    da.mul(b).sub(&a.mul(&db)).div(&b.powi(2))
                }
            }
            Node::Neg(a) => a.diff_memo(var, memo).neg(),
            Node::Pow(a, n) => {
                let da = a.diff_memo(var, memo);
                Self::int(i64::from(*n)).mul(&a.powi(n - 1)).mul(&da)
            }
            Node::Call(f, a) => {
                let da = a.diff_memo(var, memo);
                if da.is_zero() {
                    Self::zero()
                } else {
                    let outer = match f {
                        Func::Sin => a.cos(),
                        Func::Cos => a.sin().neg(),
                        Func::Exp => self.clone(),
                    };
                    outer.mul(&da)
                }
            }
        };
        memo.insert(ptr_key(self), d.clone());
        d
    }

    /// Replaces variables by expressions. Unmapped variables are left alone.
    pub fn subst(&self, map: &HashMap<String, ScalarExpr>) -> ScalarExpr {
        let mut memo = HashMap::new();
        self.subst_memo(map, &mut memo)
    }

    pub(crate) fn subst_memo(
        &self,
        map: &HashMap<String, ScalarExpr>,
        memo: &mut HashMap<usize, ScalarExpr>,
    ) -> ScalarExpr {
        if let Some(d) = memo.get(&ptr_key(self)) {
            return d.clone();
        }
        let out = match &*self.0 {
            Node::Const(_) => self.clone(),
            Node::Var(v) => map.get(&**v).cloned().unwrap_or_else(|| self.clone()),
            Node::Add(a, b) => a.subst_memo(map, memo).add(&b.subst_memo(map, memo)),
            Node::Sub(a, b) => a.subst_memo(map, memo).sub(&b.subst_memo(map, memo)),
            Node::Mul(a, b) => a.subst_memo(map, memo).mul(&b.subst_memo(map, memo)),
            Node::Div(a, b) => a.subst_memo(map, memo).div(&b.subst_memo(map, memo)),
            Node::Neg(a) => a.subst_memo(map, memo).neg(),
            Node::Pow(a, n) => a.subst_memo(map, memo).powi(*n),
            Node::Call(f, a) => Self::call(*f, &a.subst_memo(map, memo)),
        };
        memo.insert(ptr_key(self), out.clone());
        out
    }

    /// Floating-point evaluation. Every free variable must be bound.
    pub fn eval(&self, point: &HashMap<String, f64>) -> Result<f64, ExprError> {
        let vars: Vec<String> = self.free_vars().into_iter().collect();
        let mut vals = Vec::with_capacity(vars.len());
        for v in &vars {
            match point.get(v) {
                Some(x) => vals.push(*x),
                None => return Err(ExprError::UnboundVariable(v.clone())),
            }
        }
        let tape = Tape::compile(&vars, std::slice::from_ref(self))?;
        let mut out = [0.0];
        tape.eval_checked(&vals, &mut Vec::new(), &mut out)?;
        Ok(out[0])
    }

    /// Exact evaluation in rational arithmetic. Transcendental functions are only
    /// accepted at argument zero.
    pub fn eval_exact(&self, point: &HashMap<String, BigRational>) -> Result<BigRational, ExprError> {
        let mut memo = HashMap::new();
        self.eval_exact_memo(point, &mut memo)
    }

    fn eval_exact_memo(
        &self,
        point: &HashMap<String, BigRational>,
        memo: &mut HashMap<usize, BigRational>,
    ) -> Result<BigRational, ExprError> {
        if let Some(v) = memo.get(&ptr_key(self)) {
            return Ok(v.clone());
        }
        let v = match &*self.0 {
            Node::Const(c) => c.clone(),
            Node::Var(name) => point
                .get(&**name)
                .cloned()
                .ok_or_else(|| ExprError::UnboundVariable(name.to_string()))?,
            Node::Add(a, b) => a.eval_exact_memo(point, memo)? + b.eval_exact_memo(point, memo)?,
            Node::Sub(a, b) => a.eval_exact_memo(point, memo)? - b.eval_exact_memo(point, memo)?,
            Node::Mul(a, b) => a.eval_exact_memo(point, memo)? * b.eval_exact_memo(point, memo)?,
            Node::Div(a, b) => {
                let num = a.eval_exact_memo(point, memo)?;
                let den = b.eval_exact_memo(point, memo)?;
                if den.is_zero() {
                    return Err(ExprError::DivisionByZero);
                }
                num / den
            }
            Node::Neg(a) => -a.eval_exact_memo(point, memo)?,
            Node::Pow(a, n) => {
                let base = a.eval_exact_memo(point, memo)?;
                if *n < 0 && base.is_zero() {
                    return Err(ExprError::DivisionByZero);
                }
                rational_powi(&base, *n)
            }
            Node::Call(f, a) => {
                let arg = a.eval_exact_memo(point, memo)?;
                if !arg.is_zero() {
                    return Err(ExprError::NotRational(f.name().to_string()));
                }
                match f {
                    Func::Sin => BigRational::zero(),
                    Func::Cos | Func::Exp => BigRational::one(),
                }
            }
        };
        memo.insert(ptr_key(self), v.clone());
        Ok(v)
    }

    fn precedence(&self) -> u8 {
        match &*self.0 {
            Node::Const(c) => {
                if c.is_negative() {
                    3
                } else if c.is_integer() {
                    5
                } else {
                    2
                }
            }
            Node::Var(_) | Node::Call(..) => 5,
            Node::Add(..) | Node::Sub(..) => 1,
            Node::Mul(..) | Node::Div(..) => 2,
            Node::Neg(_) => 3,
            Node::Pow(..) => 4,
        }
    }

    fn write_child(&self, f: &mut fmt::Formatter<'_>, min_prec: u8) -> fmt::Result {
        if self.precedence() < min_prec {
            write!(f, "({self})")
        } else {
            write!(f, "{self}")
        }
    }
}

fn rational_powi(c: &BigRational, n: i32) -> BigRational {
    let mut acc = BigRational::one();
    for _ in 0..n.unsigned_abs() {
        acc *= c;
    }
    if n < 0 {
        acc.recip()
    } else {
        acc
    }
}

impl fmt::Display for ScalarExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &*self.0 {
            Node::Const(c) => {
                if c.is_negative() {
                    write!(f, "-")?;
                    ScalarExpr::constant(-c).write_child(f, 4)
                } else if c.is_integer() {
                    write!(f, "{}", c.numer())
                } else {
                    write!(f, "{}/{}", c.numer(), c.denom())
                }
            }
            Node::Var(v) => write!(f, "{v}"),
            Node::Add(a, b) => {
                a.write_child(f, 1)?;
                write!(f, " + ")?;
                b.write_child(f, 1)
            }
            Node::Sub(a, b) => {
                a.write_child(f, 1)?;
                write!(f, " - ")?;
                b.write_child(f, 2)
            }
            Node::Mul(a, b) => {
                a.write_child(f, 2)?;
                write!(f, "*")?;
                b.write_child(f, 3)
            }
            Node::Div(a, b) => {
                a.write_child(f, 2)?;
                write!(f, "/")?;
                b.write_child(f, 3)
            }
            Node::Neg(a) => {
                write!(f, "-")?;
                a.write_child(f, 4)
            }
            Node::Pow(a, n) => {
                a.write_child(f, 5)?;
                write!(f, "^{n}")
            }
            Node::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

impl std::str::FromStr for ScalarExpr {
    type Err = ExprError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScalarExpr::parse(s)
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident) => {
        impl std::ops::$trait<&ScalarExpr> for &ScalarExpr {
            type Output = ScalarExpr;
            fn $method(self, rhs: &ScalarExpr) -> ScalarExpr {
                ScalarExpr::$method(self, rhs)
            }
        }
        impl std::ops::$trait<ScalarExpr> for ScalarExpr {
            type Output = ScalarExpr;
            fn $method(self, rhs: ScalarExpr) -> ScalarExpr {
                ScalarExpr::$method(&self, &rhs)
            }
        }
    };
}
binop!(Add, add);
binop!(Sub, sub);
binop!(Mul, mul);
binop!(Div, div);

impl std::ops::Neg for &ScalarExpr {
    type Output = ScalarExpr;
    fn neg(self) -> ScalarExpr {
        ScalarExpr::neg(self)
    }
}

impl std::ops::Neg for ScalarExpr {
    type Output = ScalarExpr;
    fn neg(self) -> ScalarExpr {
        ScalarExpr::neg(&self)
    }
}

// ---------------------------------------------------------------------------
// Parser

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(BigRational),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    End,
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    tok: Tok,
    tok_start: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Parser { src, pos: 0, tok: Tok::End, tok_start: 0 }
    }

    fn err(&self, offset: usize, message: impl Into<String>) -> ExprError {
        ExprError::Syntax { offset, message: message.into() }
    }

    fn advance(&mut self) -> Result<(), ExprError> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        self.tok_start = self.pos;
        if self.pos >= bytes.len() {
            self.tok = Tok::End;
            return Ok(());
        }
        let c = bytes[self.pos];
        let single = match c {
            b'+' => Some(Tok::Plus),
            b'-' => Some(Tok::Minus),
            b'*' => Some(Tok::Star),
            b'/' => Some(Tok::Slash),
            b'^' => Some(Tok::Caret),
            b'(' => Some(Tok::LParen),
            b')' => Some(Tok::RParen),
            _ => None,
        };
        if let Some(t) = single {
            self.pos += 1;
            self.tok = t;
            return Ok(());
        }
        if c.is_ascii_digit() || c == b'.' {
            self.tok = Tok::Num(self.lex_number()?);
            return Ok(());
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            let start = self.pos;
            while self.pos < bytes.len() && (bytes[self.pos].is_ascii_alphanumeric() || bytes[self.pos] == b'_') {
                self.pos += 1;
            }
            self.tok = Tok::Ident(self.src[start..self.pos].to_string());
            return Ok(());
        }
        let ch = self.src[self.pos..].chars().next().unwrap_or('?');
        Err(self.err(self.pos, format!("unexpected character '{ch}'")))
    }

    fn lex_number(&mut self) -> Result<BigRational, ExprError> {
        let bytes = self.src.as_bytes();
        let start = self.pos;
        let mut digits = String::new();
        let mut frac_len: i64 = 0;
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_digit() {
            digits.push(bytes[self.pos] as char);
            self.pos += 1;
        }
        if self.pos < bytes.len() && bytes[self.pos] == b'.' {
            self.pos += 1;
            while self.pos < bytes.len() && bytes[self.pos].is_ascii_digit() {
                digits.push(bytes[self.pos] as char);
                frac_len += 1;
                self.pos += 1;
            }
        }
        if digits.is_empty() {
            return Err(self.err(start, "malformed number"));
        }
        let mut exp10: i64 = -frac_len;
        if self.pos < bytes.len() && (bytes[self.pos] == b'e' || bytes[self.pos] == b'E') {
            let exp_start = self.pos;
            self.pos += 1;
            let mut sign = 1i64;
            if self.pos < bytes.len() && (bytes[self.pos] == b'+' || bytes[self.pos] == b'-') {
                if bytes[self.pos] == b'-' {
                    sign = -1;
                }
                self.pos += 1;
            }
            let ds = self.pos;
            while self.pos < bytes.len() && bytes[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if ds == self.pos {
                return Err(self.err(exp_start, "malformed exponent"));
            }
            let e: i64 = self.src[ds..self.pos]
                .parse()
                .map_err(|_| self.err(exp_start, "exponent out of range"))?;
            if e > 10_000 {
                return Err(self.err(exp_start, "exponent out of range"));
            }
            exp10 += sign * e;
        }
        let mantissa: BigInt = digits.parse().map_err(|_| self.err(start, "malformed number"))?;
        let ten = BigInt::from(10);
        let scale = num_traits::pow(ten, exp10.unsigned_abs() as usize);
        Ok(if exp10 >= 0 {
            BigRational::from_integer(mantissa * scale)
        } else {
            BigRational::new(mantissa, scale)
        })
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<(), ExprError> {
        if self.tok == want {
            self.advance()
        } else {
            Err(self.err(self.tok_start, format!("expected {what}")))
        }
    }

    fn parse_all(mut self) -> Result<ScalarExpr, ExprError> {
        self.advance()?;
        let e = self.parse_expr()?;
        if self.tok != Tok::End {
            return Err(self.err(self.tok_start, "unexpected trailing input"));
        }
        Ok(e)
    }

    fn parse_expr(&mut self) -> Result<ScalarExpr, ExprError> {
        let mut lhs = self.parse_term()?;
        loop {
            match self.tok {
                Tok::Plus => {
                    self.advance()?;
                    lhs = lhs.add(&self.parse_term()?);
                }
                Tok::Minus => {
                    self.advance()?;
                    lhs = lhs.sub(&self.parse_term()?);
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn parse_term(&mut self) -> Result<ScalarExpr, ExprError> {
        let mut lhs = self.parse_unary()?;
        loop {
            match self.tok {
                Tok::Star => {
                    self.advance()?;
                    lhs = lhs.mul(&self.parse_unary()?);
                }
                Tok::Slash => {
                    self.advance()?;
                    let rhs = self.parse_unary()?;
                    lhs = ScalarExpr::node(Node::Div(lhs, rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn parse_unary(&mut self) -> Result<ScalarExpr, ExprError> {
        if self.tok == Tok::Minus {
            self.advance()?;
            return Ok(self.parse_unary()?.neg());
        }
        self.parse_factor()
    }

    fn parse_factor(&mut self) -> Result<ScalarExpr, ExprError> {
        let base = self.parse_base()?;
        if self.tok != Tok::Caret {
            return Ok(base);
        }
        self.advance()?;
        let negative = if self.tok == Tok::Minus {
            self.advance()?;
            true
        } else {
            false
        };
        let at = self.tok_start;
        let n = match &self.tok {
            Tok::Num(c) if c.is_integer() && self.src[at..].starts_with(|ch: char| ch.is_ascii_digit()) => c
                .to_integer()
                .to_i32()
                .filter(|n| *n <= 4096)
                .ok_or_else(|| self.err(at, "exponent too large"))?,
            _ => return Err(self.err(at, "expected integer exponent")),
        };
        self.advance()?;
        let n = if negative { -n } else { n };
        // Keep the node even when folding would apply so that 0^-1 stays an evaluation error.
        if n < 0 && base.is_zero() {
            return Ok(ScalarExpr::node(Node::Pow(base, n)));
        }
        Ok(base.powi(n))
    }

    fn parse_base(&mut self) -> Result<ScalarExpr, ExprError> {
        let at = self.tok_start;
        match self.tok.clone() {
            Tok::Num(c) => {
                self.advance()?;
                Ok(ScalarExpr::constant(c))
            }
            Tok::Ident(name) => {
                self.advance()?;
                if let Some(func) = Func::from_name(&name) {
                    self.expect(Tok::LParen, "'(' after function name")?;
                    let arg = self.parse_expr()?;
                    self.expect(Tok::RParen, "')'")?;
                    return Ok(ScalarExpr::call(func, &arg));
                }
                if !is_valid_ident(&name) {
                    return Err(ExprError::UnknownIdentifier { offset: at, name });
                }
                Ok(ScalarExpr::var(&name))
            }
            Tok::LParen => {
                self.advance()?;
                let e = self.parse_expr()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(e)
            }
            Tok::End => Err(self.err(at, "unexpected end of input")),
            _ => Err(self.err(at, "expected a number, identifier or '('")),
        }
    }
}

// ---------------------------------------------------------------------------
// Compiled evaluation

#[derive(Debug, Clone, Copy)]
enum Op {
    Const(f64),
    Var(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Powi(usize, i32),
    Sin(usize),
    Cos(usize),
    Exp(usize),
}

/// A batch of expressions compiled to a straight-line program over a fixed
/// variable ordering. Shared subexpressions are evaluated once.
#[derive(Debug, Clone)]
pub struct Tape {
    num_vars: usize,
    ops: Vec<Op>,
    outputs: Vec<usize>,
}

impl Tape {
    pub fn compile<S: AsRef<str>>(vars: &[S], exprs: &[ScalarExpr]) -> Result<Tape, ExprError> {
        let index: HashMap<&str, usize> = vars.iter().enumerate().map(|(i, v)| (v.as_ref(), i)).collect();
        let mut builder = TapeBuilder { index, ops: Vec::new(), memo: HashMap::new(), consts: HashMap::new() };
        let mut outputs = Vec::with_capacity(exprs.len());
        for e in exprs {
            outputs.push(builder.emit(e)?);
        }
        Ok(Tape { num_vars: vars.len(), ops: builder.ops, outputs })
    }

    pub fn num_outputs(&self) -> usize {
        self.outputs.len()
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    /// Evaluates without domain checks; poles surface as non-finite values.
    pub fn eval(&self, vals: &[f64], scratch: &mut Vec<f64>, out: &mut [f64]) {
        debug_assert_eq!(vals.len(), self.num_vars);
        scratch.clear();
        scratch.reserve(self.ops.len());
        for op in &self.ops {
            let v = match *op {
                Op::Const(c) => c,
                Op::Var(i) => vals[i],
                Op::Add(a, b) => scratch[a] + scratch[b],
                Op::Sub(a, b) => scratch[a] - scratch[b],
                Op::Mul(a, b) => scratch[a] * scratch[b],
                Op::Div(a, b) => scratch[a] / scratch[b],
                Op::Neg(a) => -scratch[a],
                Op::Powi(a, n) => scratch[a].powi(n),
                Op::Sin(a) => scratch[a].sin(),
                Op::Cos(a) => scratch[a].cos(),
                Op::Exp(a) => scratch[a].exp(),
            };
            scratch.push(v);
        }
        for (o, &slot) in out.iter_mut().zip(&self.outputs) {
            *o = scratch[slot];
        }
    }

    /// Evaluates and reports division by zero or non-finite results.
    pub fn eval_checked(&self, vals: &[f64], scratch: &mut Vec<f64>, out: &mut [f64]) -> Result<(), ExprError> {
        scratch.clear();
        for op in &self.ops {
            let v = match *op {
                Op::Div(a, b) => {
                    if scratch[b] == 0.0 {
                        return Err(ExprError::DivisionByZero);
                    }
                    scratch[a] / scratch[b]
                }
                Op::Powi(a, n) if n < 0 && scratch[a] == 0.0 => return Err(ExprError::DivisionByZero),
                _ => eval_op(*op, vals, scratch),
            };
            scratch.push(v);
        }
        for (o, &slot) in out.iter_mut().zip(&self.outputs) {
            let v = scratch[slot];
            if !v.is_finite() {
                return Err(ExprError::NonFinite);
            }
            *o = v;
        }
        Ok(())
    }
}

fn eval_op(op: Op, vals: &[f64], s: &[f64]) -> f64 {
    match op {
        Op::Const(c) => c,
        Op::Var(i) => vals[i],
        Op::Add(a, b) => s[a] + s[b],
        Op::Sub(a, b) => s[a] - s[b],
        Op::Mul(a, b) => s[a] * s[b],
        Op::Div(a, b) => s[a] / s[b],
        Op::Neg(a) => -s[a],
        Op::Powi(a, n) => s[a].powi(n),
        Op::Sin(a) => s[a].sin(),
        Op::Cos(a) => s[a].cos(),
        Op::Exp(a) => s[a].exp(),
    }
}

struct TapeBuilder<'v> {
    index: HashMap<&'v str, usize>,
    ops: Vec<Op>,
    memo: HashMap<usize, usize>,
    consts: HashMap<u64, usize>,
}

impl TapeBuilder<'_> {
    fn push(&mut self, op: Op) -> usize {
        self.ops.push(op);
        self.ops.len() - 1
    }

    fn emit(&mut self, e: &ScalarExpr) -> Result<usize, ExprError> {
        if let Some(&slot) = self.memo.get(&ptr_key(e)) {
            return Ok(slot);
        }
        let slot = match &*e.0 {
            Node::Const(c) => {
                let v = c.to_f64().unwrap_or(f64::NAN);
                match self.consts.get(&v.to_bits()) {
                    Some(&s) => s,
                    None => {
                        let s = self.push(Op::Const(v));
                        self.consts.insert(v.to_bits(), s);
                        s
                    }
                }
            }
            Node::Var(name) => {
                let i = *self.index.get(&**name).ok_or_else(|| ExprError::UnboundVariable(name.to_string()))?;
                self.push(Op::Var(i))
            }
            Node::Add(a, b) => {
                let (a, b) = (self.emit(a)?, self.emit(b)?);
                self.push(Op::Add(a, b))
            }
            Node::Sub(a, b) => {
                let (a, b) = (self.emit(a)?, self.emit(b)?);
                self.push(Op::Sub(a, b))
            }
            Node::Mul(a, b) => {
                let (a, b) = (self.emit(a)?, self.emit(b)?);
                self.push(Op::Mul(a, b))
            }
            Node::Div(a, b) => {
                let (a, b) = (self.emit(a)?, self.emit(b)?);
                self.push(Op::Div(a, b))
            }
            Node::Neg(a) => {
                let a = self.emit(a)?;
                self.push(Op::Neg(a))
            }
            Node::Pow(a, n) => {
                let a = self.emit(a)?;
                self.push(Op::Powi(a, *n))
            }
            Node::Call(f, a) => {
                let a = self.emit(a)?;
                self.push(match f {
                    Func::Sin => Op::Sin(a),
                    Func::Cos => Op::Cos(a),
                    Func::Exp => Op::Exp(a),
                })
            }
        };
        self.memo.insert(ptr_key(e), slot);
        Ok(slot)
    }
}

// ---------------------------------------------------------------------------
// Charts

/// A coordinate chart: ordered variable names and optional box bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    names: Vec<String>,
    bounds: Option<Vec<(f64, f64)>>,
}

impl Chart {
    pub fn new(names: Vec<String>, bounds: Option<Vec<(f64, f64)>>) -> Result<Chart, ExprError> {
        if names.is_empty() {
            return Err(ExprError::InvalidChart("chart dimension must be positive".into()));
        }
        let mut seen = BTreeSet::new();
        for n in &names {
            if !is_valid_ident(n) {
                return Err(ExprError::InvalidChart(format!("'{n}' is not a valid coordinate name")));
            }
            if !seen.insert(n.as_str()) {
                return Err(ExprError::InvalidChart(format!("duplicate coordinate name '{n}'")));
            }
        }
        if let Some(b) = &bounds {
            if b.len() != names.len() {
                return Err(ExprError::InvalidChart("one bound pair per axis required".into()));
            }
            if let Some((lo, hi)) = b.iter().find(|(lo, hi)| !(lo < hi) || !lo.is_finite() || !hi.is_finite()) {
                return Err(ExprError::InvalidChart(format!("bounds [{lo}, {hi}] need lower < upper")));
            }
        }
        Ok(Chart { names, bounds })
    }

    /// Chart with coordinates `x1..xm` and the given bounds.
    pub fn standard(m: usize, bounds: Option<Vec<(f64, f64)>>) -> Result<Chart, ExprError> {
        Chart::new((1..=m).map(|i| format!("x{i}")).collect(), bounds)
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn bounds(&self) -> Option<&[(f64, f64)]> {
        self.bounds.as_deref()
    }

    /// Bounds, falling back to `[-1, 1]` on every axis when none were declared.
    pub fn box_or_default(&self) -> Vec<(f64, f64)> {
        self.bounds.clone().unwrap_or_else(|| vec![(-1.0, 1.0); self.dim()])
    }

    pub fn contains(&self, x: &[f64], slack: f64) -> bool {
        match &self.bounds {
            None => true,
            Some(b) => x.iter().zip(b).all(|(v, (lo, hi))| *v >= lo - slack && *v <= hi + slack),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(pairs: &[(&str, f64)]) -> HashMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn parses_and_evaluates_basic_forms() {
        let e = ScalarExpr::parse("x1*x1 + 2").unwrap();
        assert_eq!(e.eval(&pt(&[("x1", 3.0)])).unwrap(), 11.0);
        assert_eq!(ScalarExpr::parse("exp(0)").unwrap().eval(&pt(&[])).unwrap(), 1.0);
        let prod = ScalarExpr::parse("sin(x1)*x2").unwrap();
        assert!(matches!(&*prod.0, Node::Mul(..)));
    }

    #[test]
    fn reports_syntax_error_offsets() {
        match ScalarExpr::parse("x1 +") {
            Err(ExprError::Syntax { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("unexpected {other:?}"),
        }
        match ScalarExpr::parse("x1 + foo") {
            Err(ExprError::UnknownIdentifier { offset, name }) => {
                assert_eq!(offset, 5);
                assert_eq!(name, "foo");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(ScalarExpr::parse("(x1").is_err());
        assert!(ScalarExpr::parse("x1^1.5").is_err());
        assert!(ScalarExpr::parse("x1 x2").is_err());
    }

    #[test]
    fn eval_errors() {
        let e = ScalarExpr::parse("1/x1").unwrap();
        assert!(matches!(e.eval(&pt(&[("x1", 0.0)])), Err(ExprError::DivisionByZero)));
        assert!(matches!(e.eval(&pt(&[])), Err(ExprError::UnboundVariable(_))));
        let e = ScalarExpr::parse("x1^-2").unwrap();
        assert!(matches!(e.eval(&pt(&[("x1", 0.0)])), Err(ExprError::DivisionByZero)));
        assert_eq!(e.eval(&pt(&[("x1", 2.0)])).unwrap(), 0.25);
    }

    #[test]
    fn derivative_table() {
        let d = ScalarExpr::parse("x1*x2").unwrap().diff("x1");
        assert_eq!(d.to_string(), "x2");
        let d = ScalarExpr::parse("sin(x1)").unwrap().diff("x1");
        assert_eq!(d.to_string(), "cos(x1)");
        let d = ScalarExpr::parse("7/3").unwrap().diff("x1");
        assert_eq!(d.to_string(), "0");
    }

    #[test]
    fn printing_round_trips() {
        for src in ["x1 - (x2 - x3)", "x1/(x2*x3)", "-(x1 + 2)^3", "(-x1)^2", "3/4*x1", "x1^-2", "2.5e-1*t", "-3 - -x2"] {
            let e = ScalarExpr::parse(src).unwrap();
            let back = ScalarExpr::parse(&e.to_string()).unwrap();
            let p = pt(&[("x1", 0.7), ("x2", -1.3), ("x3", 2.1), ("t", 0.4)]);
            assert!((e.eval(&p).unwrap() - back.eval(&p).unwrap()).abs() < 1e-14, "{src} -> {e}");
        }
    }

    #[test]
    fn decimal_literals_are_exact() {
        let e = ScalarExpr::parse("0.1").unwrap();
        assert_eq!(e.as_const().unwrap(), &BigRational::new(1.into(), 10.into()));
    }

    #[test]
    fn exact_evaluation_matches_rationals() {
        let e = ScalarExpr::parse("x1^2/3 - x2*x1 + 1/(x2 + 1)").unwrap();
        let q = |a: i64, b: i64| BigRational::new(a.into(), b.into());
        let p: HashMap<String, BigRational> = [("x1".to_string(), q(1, 2)), ("x2".to_string(), q(2, 3))].into();
        let want = q(1, 12) - q(1, 3) + q(3, 5);
        assert_eq!(e.eval_exact(&p).unwrap(), want);
        assert!(ScalarExpr::parse("sin(x1)").unwrap().eval_exact(&p).is_err());
    }

    #[test]
    fn tape_shares_subexpressions() {
        let a = ScalarExpr::parse("sin(x1)*x2").unwrap();
        let b = a.mul(&a);
        let tape = Tape::compile(&["x1", "x2"], &[a.clone(), b.clone()]).unwrap();
        assert!(tape.ops.len() <= 5);
        let mut out = [0.0; 2];
        tape.eval(&[0.3, 2.0], &mut Vec::new(), &mut out);
        let v = 0.3f64.sin() * 2.0;
        assert!((out[0] - v).abs() < 1e-15 && (out[1] - v * v).abs() < 1e-15);
    }

    #[test]
    fn chart_validation() {
        assert!(Chart::standard(2, Some(vec![(0.0, 1.0), (1.0, 1.0)])).is_err());
        assert!(Chart::new(vec!["x1".into(), "x1".into()], None).is_err());
        assert!(Chart::new(vec![], None).is_err());
        let c = Chart::standard(2, None).unwrap();
        assert_eq!(c.names(), &["x1".to_string(), "x2".to_string()]);
    }
}
