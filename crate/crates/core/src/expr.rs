//! Closed-form smooth corrections `v(y)`: a small expression language over the
//! variables `y1..yn` with symbolic first and second derivatives.
//!
//! Grammar: numbers, `y<k>`, `+ - * / ^`, unary minus, parentheses and the
//! functions `pow(a, b)`, `exp`, `log`, `sin`, `cos`, `sqrt`.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("parse error at byte {pos}: {message}")]
    Parse { pos: usize, message: String },
    #[error("variable y{index} out of range for dimension {dim}")]
    VariableOutOfRange { index: usize, dim: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Exp(Box<Expr>),
    Log(Box<Expr>),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Sqrt(Box<Expr>),
}

use Expr::*;

fn b(e: Expr) -> Box<Expr> {
    Box::new(e)
}

// constructors with light constant folding
fn add(l: Expr, r: Expr) -> Expr {
    match (&l, &r) {
        (Const(a), Const(c)) => Const(a + c),
        (Const(z), _) if *z == 0.0 => r,
        (_, Const(z)) if *z == 0.0 => l,
        _ => Add(b(l), b(r)),
    }
}

fn sub(l: Expr, r: Expr) -> Expr {
    match (&l, &r) {
        (Const(a), Const(c)) => Const(a - c),
        (_, Const(z)) if *z == 0.0 => l,
        (Const(z), _) if *z == 0.0 => neg(r),
        _ => Sub(b(l), b(r)),
    }
}

fn mul(l: Expr, r: Expr) -> Expr {
    match (&l, &r) {
        (Const(a), Const(c)) => Const(a * c),
        (Const(z), _) | (_, Const(z)) if *z == 0.0 => Const(0.0),
        (Const(o), _) if *o == 1.0 => r,
        (_, Const(o)) if *o == 1.0 => l,
        _ => Mul(b(l), b(r)),
    }
}

fn div(l: Expr, r: Expr) -> Expr {
    match (&l, &r) {
        (Const(z), _) if *z == 0.0 => Const(0.0),
        (_, Const(o)) if *o == 1.0 => l,
        (Const(a), Const(c)) => Const(a / c),
        _ => Div(b(l), b(r)),
    }
}

fn neg(e: Expr) -> Expr {
    match e {
        Const(a) => Const(-a),
        Neg(inner) => *inner,
        other => Neg(b(other)),
    }
}

impl Expr {
    pub fn eval(&self, y: &[f64]) -> f64 {
        match self {
            Const(c) => *c,
            Var(i) => y[*i],
            Neg(a) => -a.eval(y),
            Add(a, c) => a.eval(y) + c.eval(y),
            Sub(a, c) => a.eval(y) - c.eval(y),
            Mul(a, c) => a.eval(y) * c.eval(y),
            Div(a, c) => a.eval(y) / c.eval(y),
            Pow(a, c) => {
                let base = a.eval(y);
                match **c {
                    Const(k) if k == k.trunc() && k.abs() < 64.0 => base.powi(k as i32),
                    _ => base.powf(c.eval(y)),
                }
            }
            Exp(a) => a.eval(y).exp(),
            Log(a) => a.eval(y).ln(),
            Sin(a) => a.eval(y).sin(),
            Cos(a) => a.eval(y).cos(),
            Sqrt(a) => a.eval(y).sqrt(),
        }
    }

    /// Symbolic partial derivative with respect to `y_{var+1}`.
    pub fn derivative(&self, var: usize) -> Expr {
        match self {
            Const(_) => Const(0.0),
            Var(i) => Const(if *i == var { 1.0 } else { 0.0 }),
            Neg(a) => neg(a.derivative(var)),
            Add(a, c) => add(a.derivative(var), c.derivative(var)),
            Sub(a, c) => sub(a.derivative(var), c.derivative(var)),
            Mul(a, c) => add(
                mul(a.derivative(var), (**c).clone()),
                mul((**a).clone(), c.derivative(var)),
            ),
            Div(a, c) => div(
                sub(
                    mul(a.derivative(var), (**c).clone()),
                    mul((**a).clone(), c.derivative(var)),
                ),
                Pow(c.clone(), b(Const(2.0))),
            ),
            Pow(a, c) => {
                if let Const(k) = **c {
                    mul(mul(Const(k), Pow(a.clone(), b(Const(k - 1.0)))), a.derivative(var))
                } else {
                    // a^c (c' ln a + c a'/a)
                    mul(
                        self.clone(),
                        add(
                            mul(c.derivative(var), Log(a.clone())),
                            div(mul((**c).clone(), a.derivative(var)), (**a).clone()),
                        ),
                    )
                }
            }
            Exp(a) => mul(self.clone(), a.derivative(var)),
            Log(a) => div(a.derivative(var), (**a).clone()),
            Sin(a) => mul(Cos(a.clone()), a.derivative(var)),
            Cos(a) => neg(mul(Sin(a.clone()), a.derivative(var))),
            Sqrt(a) => div(a.derivative(var), mul(Const(2.0), self.clone())),
        }
    }

    pub fn max_var(&self) -> Option<usize> {
        match self {
            Const(_) => None,
            Var(i) => Some(*i),
            Neg(a) | Exp(a) | Log(a) | Sin(a) | Cos(a) | Sqrt(a) => a.max_var(),
            Add(a, c) | Sub(a, c) | Mul(a, c) | Div(a, c) | Pow(a, c) => match (a.max_var(), c.max_var()) {
                (Some(x), Some(y)) => Some(x.max(y)),
                (x, y) => x.or(y),
            },
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Const(c) => write!(f, "{c}"),
            Var(i) => write!(f, "y{}", i + 1),
            Neg(a) => write!(f, "(-{a})"),
            Add(a, c) => write!(f, "({a} + {c})"),
            Sub(a, c) => write!(f, "({a} - {c})"),
            Mul(a, c) => write!(f, "({a} * {c})"),
            Div(a, c) => write!(f, "({a} / {c})"),
            Pow(a, c) => write!(f, "pow({a}, {c})"),
            Exp(a) => write!(f, "exp({a})"),
            Log(a) => write!(f, "log({a})"),
            Sin(a) => write!(f, "sin({a})"),
            Cos(a) => write!(f, "cos({a})"),
            Sqrt(a) => write!(f, "sqrt({a})"),
        }
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T, ExprError> {
        Err(ExprError::Parse {
            pos: self.pos,
            message: message.into(),
        })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<(), ExprError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            self.err(format!("expected `{}`", c as char))
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    lhs = Add(b(lhs), b(self.term()?));
                }
                Some(b'-') => {
                    self.pos += 1;
                    lhs = Sub(b(lhs), b(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    lhs = Mul(b(lhs), b(self.unary()?));
                }
                Some(b'/') => {
                    self.pos += 1;
                    lhs = Div(b(lhs), b(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                Ok(Neg(b(self.unary()?)))
            }
            Some(b'+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Pow(b(base), b(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.ident(),
            Some(c) => self.err(format!("unexpected `{}`", c as char)),
            None => self.err("unexpected end of input"),
        }
    }

    fn number(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        while self.pos < self.src.len() && (self.src[self.pos].is_ascii_digit() || self.src[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < self.src.len() && matches!(self.src[self.pos], b'e' | b'E') {
            let save = self.pos;
            self.pos += 1;
            if self.pos < self.src.len() && matches!(self.src[self.pos], b'+' | b'-') {
                self.pos += 1;
            }
            if self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            } else {
                self.pos = save;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        match text.parse::<f64>() {
            Ok(v) => Ok(Const(v)),
            Err(_) => {
                self.pos = start;
                self.err(format!("bad number `{text}`"))
            }
        }
    }

    fn ident(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        if let Some(idx) = name.strip_prefix('y') {
            if let Ok(k) = idx.parse::<usize>() {
                if k == 0 {
                    self.pos = start;
                    return self.err("variables are numbered from y1");
                }
                return Ok(Var(k - 1));
            }
        }
        self.expect(b'(')?;
        let first = self.expr()?;
        let out = match name {
            "exp" => Exp(b(first)),
            "log" | "ln" => Log(b(first)),
            "sin" => Sin(b(first)),
            "cos" => Cos(b(first)),
            "sqrt" => Sqrt(b(first)),
            "pow" => {
                self.expect(b',')?;
                let second = self.expr()?;
                Pow(b(first), b(second))
            }
            other => {
                self.pos = start;
                return self.err(format!("unknown function `{other}`"));
            }
        };
        self.expect(b')')?;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Const(f64),
    Var(usize),
    Neg(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Powi(usize, i32),
    Pow(usize, usize),
    Exp(usize),
    Log(usize),
    Sin(usize),
    Cos(usize),
    Sqrt(usize),
}

/// Several expressions flattened into one instruction list with shared
/// subexpressions evaluated once.
#[derive(Debug, Clone, Default)]
struct Tape {
    ops: Vec<Op>,
    outputs: Vec<usize>,
}

impl Tape {
    fn build(exprs: &[Expr]) -> Tape {
        let mut tape = Tape::default();
        let mut seen: HashMap<(u8, usize, usize, u64), usize> = HashMap::new();
        for e in exprs {
            let slot = tape.push(e, &mut seen);
            tape.outputs.push(slot);
        }
        tape
    }

    fn push(&mut self, e: &Expr, seen: &mut HashMap<(u8, usize, usize, u64), usize>) -> usize {
        let (key, op) = match e {
            Const(c) => ((0, 0, 0, c.to_bits()), Op::Const(*c)),
            Var(i) => ((1, *i, 0, 0), Op::Var(*i)),
            Neg(a) => {
                let a = self.push(a, seen);
                ((2, a, 0, 0), Op::Neg(a))
            }
            Add(a, c) | Sub(a, c) | Mul(a, c) | Div(a, c) => {
                let (x, y) = (self.push(a, seen), self.push(c, seen));
                match e {
                    Add(..) => ((3, x, y, 0), Op::Add(x, y)),
                    Sub(..) => ((4, x, y, 0), Op::Sub(x, y)),
                    Mul(..) => ((5, x, y, 0), Op::Mul(x, y)),
                    _ => ((6, x, y, 0), Op::Div(x, y)),
                }
            }
            Pow(a, c) => {
                let x = self.push(a, seen);
                match **c {
                    Const(k) if k == k.trunc() && k.abs() < 64.0 => ((7, x, 0, k.to_bits()), Op::Powi(x, k as i32)),
                    _ => {
                        let y = self.push(c, seen);
                        ((8, x, y, 0), Op::Pow(x, y))
                    }
                }
            }
            Exp(a) | Log(a) | Sin(a) | Cos(a) | Sqrt(a) => {
                let x = self.push(a, seen);
                match e {
                    Exp(_) => ((9, x, 0, 0), Op::Exp(x)),
                    Log(_) => ((10, x, 0, 0), Op::Log(x)),
                    Sin(_) => ((11, x, 0, 0), Op::Sin(x)),
                    Cos(_) => ((12, x, 0, 0), Op::Cos(x)),
                    _ => ((13, x, 0, 0), Op::Sqrt(x)),
                }
            }
        };
        *seen.entry(key).or_insert_with(|| {
            self.ops.push(op);
            self.ops.len() - 1
        })
    }

    fn run(&self, y: &[f64], buf: &mut Vec<f64>) {
        buf.clear();
        for op in &self.ops {
            let v = match *op {
                Op::Const(c) => c,
                Op::Var(i) => y[i],
                Op::Neg(a) => -buf[a],
                Op::Add(a, c) => buf[a] + buf[c],
                Op::Sub(a, c) => buf[a] - buf[c],
                Op::Mul(a, c) => buf[a] * buf[c],
                Op::Div(a, c) => buf[a] / buf[c],
                Op::Powi(a, k) => buf[a].powi(k),
                Op::Pow(a, c) => buf[a].powf(buf[c]),
                Op::Exp(a) => buf[a].exp(),
                Op::Log(a) => buf[a].ln(),
                Op::Sin(a) => buf[a].sin(),
                Op::Cos(a) => buf[a].cos(),
                Op::Sqrt(a) => buf[a].sqrt(),
            };
            buf.push(v);
        }
    }
}

pub fn parse(src: &str) -> Result<Expr, ExprError> {
    let mut p = Parser {
        src: src.as_bytes(),
        pos: 0,
    };
    let e = p.expr()?;
    if p.peek().is_some() {
        return p.err("trailing input");
    }
    Ok(e)
}

/// Parsed expression together with its symbolic gradient and Hessian.
#[derive(Debug, Clone)]
pub struct CompiledExpr {
    source: String,
    dim: usize,
    value: Arc<Expr>,
    grad: Arc<Vec<Expr>>,
    /// Gradient followed by the Hessian upper triangle.
    jet_tape: Arc<Tape>,
}

impl CompiledExpr {
    pub fn new(source: &str, dim: usize) -> Result<Self, ExprError> {
        let value = parse(source)?;
        if let Some(max) = value.max_var() {
            if max >= dim {
                return Err(ExprError::VariableOutOfRange { index: max + 1, dim });
            }
        }
        let grad: Vec<Expr> = (0..dim).map(|i| value.derivative(i)).collect();
        let mut hess = Vec::with_capacity(dim * (dim + 1) / 2);
        for i in 0..dim {
            for j in i..dim {
                hess.push(grad[i].derivative(j));
            }
        }
        let all: Vec<Expr> = grad.iter().chain(&hess).cloned().collect();
        Ok(CompiledExpr {
            source: source.to_string(),
            dim,
            value: Arc::new(value),
            grad: Arc::new(grad),
            jet_tape: Arc::new(Tape::build(&all)),
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn value(&self, y: &[f64]) -> f64 {
        self.value.eval(y)
    }

    pub fn grad(&self, y: &[f64]) -> Vec<f64> {
        self.grad.iter().map(|g| g.eval(y)).collect()
    }

    /// Hessian as a dense row-major `dim × dim` array.
    pub fn hess(&self, y: &[f64]) -> Vec<f64> {
        self.jet(y).1
    }

    /// Gradient and row-major Hessian in one pass.
    pub fn jet(&self, y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.dim;
        let mut buf = Vec::with_capacity(self.jet_tape.ops.len());
        self.jet_tape.run(y, &mut buf);
        let out = &self.jet_tape.outputs;
        let grad = out[..n].iter().map(|&k| buf[k]).collect();
        let mut hess = vec![0.0; n * n];
        let mut k = n;
        for i in 0..n {
            for j in i..n {
                let v = buf[out[k]];
                hess[i * n + j] = v;
                hess[j * n + i] = v;
                k += 1;
            }
        }
        (grad, hess)
    }
}
