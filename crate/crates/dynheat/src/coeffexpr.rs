//! A small arithmetic expression language for coefficients, targets and
//! nonlinearities, plus sampling of coefficient tables on mesh x time grid.
//!
//! Grammar:
//! ```text
//! expr   := term (('+'|'-') term)*
//! term   := factor (('*'|'/') factor)*
//! factor := '-'? power
//! power  := atom ('^' factor)?          // right-associative
//! atom   := number | ident | func '(' expr (',' expr)? ')' | '(' expr ')'
//! ```
//! One-argument functions: sin, cos, exp, tanh, sqrt, abs. Two-argument:
//! min2, max2. Identifiers are resolved at evaluation time against the
//! environment; unbound names are errors there, not at parse time.

use std::fmt;

use crate::error::{Error, Result};
use crate::geometry::{Mesh, MeshKind, Point};
use crate::pdecore::TimeGrid;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    X,
    Y,
    R,
    Th,
    T,
    /// State value, used by nonlinearity expressions.
    S,
    /// Gradient components, used by nonlinearity expressions.
    Gx,
    Gy,
    /// Tangential gradient, used by boundary nonlinearity expressions.
    Gt,
}

impl Var {
    fn from_name(name: &str) -> Option<Var> {
        Some(match name {
            "x" => Var::X,
            "y" => Var::Y,
            "r" => Var::R,
            "th" => Var::Th,
            "t" => Var::T,
            "s" => Var::S,
            "gx" => Var::Gx,
            "gy" => Var::Gy,
            "gt" => Var::Gt,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Var::X => "x",
            Var::Y => "y",
            Var::R => "r",
            Var::Th => "th",
            Var::T => "t",
            Var::S => "s",
            Var::Gx => "gx",
            Var::Gy => "gy",
            Var::Gt => "gt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fun1 {
    Sin,
    Cos,
    Exp,
    Tanh,
    Sqrt,
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fun2 {
    Min2,
    Max2,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Pi,
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Fun1(Fun1, Box<Expr>),
    Fun2(Fun2, Box<Expr>, Box<Expr>),
}

/// Variable bindings for evaluation. Unset slots are unbound.
#[derive(Debug, Clone, Default)]
pub struct Env<T> {
    vals: [Option<T>; 9],
}

impl<T: Scalar> Env<T> {
    pub fn new() -> Self {
        Self { vals: [None; 9] }
    }

    pub fn bind(mut self, v: Var, value: T) -> Self {
        self.vals[v as usize] = Some(value);
        self
    }

    pub fn get(&self, v: Var) -> Option<T> {
        self.vals[v as usize]
    }

    /// Spatial bindings for a mesh node: `x` on the interval; `x`, `y`, `r`,
    /// `th` on the disk.
    pub fn at_point(kind: MeshKind, p: &Point<T>, t: T) -> Self {
        let env = Env::new().bind(Var::T, t).bind(Var::X, p.x);
        match kind {
            MeshKind::Interval => env,
            MeshKind::Disk => env.bind(Var::Y, p.y).bind(Var::R, p.r).bind(Var::Th, p.th),
        }
    }
}

pub fn eval_expr<T: Scalar>(e: &Expr, env: &Env<T>) -> Result<T> {
    let v = eval_inner(e, env)?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("expression `{e}` evaluated to a non-finite value")));
    }
    Ok(v)
}

fn eval_inner<T: Scalar>(e: &Expr, env: &Env<T>) -> Result<T> {
    Ok(match e {
        Expr::Num(c) => T::of(*c),
        Expr::Pi => T::PI(),
        Expr::Var(v) => env
            .get(*v)
            .ok_or_else(|| Error::NonFinite(format!("identifier `{}` is not bound here", v.name())))?,
        Expr::Neg(a) => -eval_inner(a, env)?,
        Expr::Bin(op, a, b) => {
            let x = eval_inner(a, env)?;
            let y = eval_inner(b, env)?;
            match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div => {
                    if y == T::zero() {
                        return Err(Error::NonFinite("division by zero".into()));
                    }
                    x / y
                }
                BinOp::Pow => x.powf(y),
            }
        }
        Expr::Fun1(f, a) => {
            let x = eval_inner(a, env)?;
            match f {
                Fun1::Sin => x.sin(),
                Fun1::Cos => x.cos(),
                Fun1::Exp => x.exp(),
                Fun1::Tanh => x.tanh(),
                Fun1::Sqrt => x.sqrt(),
                Fun1::Abs => x.abs(),
            }
        }
        Expr::Fun2(f, a, b) => {
            let x = eval_inner(a, env)?;
            let y = eval_inner(b, env)?;
            match f {
                Fun2::Min2 => x.min(y),
                Fun2::Max2 => x.max(y),
            }
        }
    })
}

impl Expr {
    /// True when evaluation can depend on the time variable.
    pub fn uses_time(&self) -> bool {
        self.uses_var(Var::T)
    }

    pub fn uses_var(&self, var: Var) -> bool {
        match self {
            Expr::Num(_) | Expr::Pi => false,
            Expr::Var(v) => *v == var,
            Expr::Neg(a) => a.uses_var(var),
            Expr::Bin(_, a, b) | Expr::Fun2(_, a, b) => a.uses_var(var) || b.uses_var(var),
            Expr::Fun1(_, a) => a.uses_var(var),
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            // A negative literal prints with a leading sign and must be
            // parenthesized wherever a negation would be.
            Expr::Num(c) if *c < 0.0 => 3,
            Expr::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
            Expr::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
            Expr::Neg(_) => 3,
            Expr::Bin(BinOp::Pow, ..) => 4,
            _ => 5,
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn wrap(f: &mut fmt::Formatter<'_>, e: &Expr, min_prec: u8) -> fmt::Result {
            if e.precedence() < min_prec {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        }
        match self {
            Expr::Num(c) => write!(f, "{c}"),
            Expr::Pi => write!(f, "pi"),
            Expr::Var(v) => write!(f, "{}", v.name()),
            Expr::Neg(a) => {
                // `--x` does not parse, so nested signs need parentheses.
                write!(f, "-")?;
                wrap(f, a, 4)
            }
            Expr::Bin(op, a, b) => {
                let (sym, prec) = match op {
                    BinOp::Add => ("+", 1),
                    BinOp::Sub => ("-", 1),
                    BinOp::Mul => ("*", 2),
                    BinOp::Div => ("/", 2),
                    BinOp::Pow => ("^", 4),
                };
                if *op == BinOp::Pow {
                    // Right-associative: parenthesize a left child of equal precedence.
                    wrap(f, a, prec + 1)?;
                    write!(f, "{sym}")?;
                    wrap(f, b, 3)
                } else {
                    wrap(f, a, prec)?;
                    write!(f, "{sym}")?;
                    // Left-associative: parenthesize a right child of equal precedence.
                    wrap(f, b, prec + 1)
                }
            }
            Expr::Fun1(fun, a) => {
                let name = match fun {
                    Fun1::Sin => "sin",
                    Fun1::Cos => "cos",
                    Fun1::Exp => "exp",
                    Fun1::Tanh => "tanh",
                    Fun1::Sqrt => "sqrt",
                    Fun1::Abs => "abs",
                };
                write!(f, "{name}({a})")
            }
            Expr::Fun2(fun, a, b) => {
                let name = match fun {
                    Fun2::Min2 => "min2",
                    Fun2::Max2 => "max2",
                };
                write!(f, "{name}({a},{b})")
            }
        }
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse { offset: self.pos, message: message.into() }
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

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.err(format!("expected `{}`", c as char)))
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                let rhs = self.term()?;
                lhs = Expr::Bin(BinOp::Add, Box::new(lhs), Box::new(rhs));
            } else if self.eat(b'-') {
                let rhs = self.term()?;
                lhs = Expr::Bin(BinOp::Sub, Box::new(lhs), Box::new(rhs));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.factor()?;
        loop {
            if self.eat(b'*') {
                let rhs = self.factor()?;
                lhs = Expr::Bin(BinOp::Mul, Box::new(lhs), Box::new(rhs));
            } else if self.eat(b'/') {
                let rhs = self.factor()?;
                lhs = Expr::Bin(BinOp::Div, Box::new(lhs), Box::new(rhs));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn factor(&mut self) -> Result<Expr> {
        if self.eat(b'-') {
            Ok(Expr::Neg(Box::new(self.power()?)))
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.eat(b'^') {
            let exp = self.factor()?;
            Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)))
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.peek() {
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.ident(),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) => Err(self.err(format!("unexpected character `{}`", c as char))),
            None => Err(self.err("unexpected end of input")),
        }
    }

    fn number(&mut self) -> Result<Expr> {
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_digit() || self.src[self.pos] == b'.')
        {
            self.pos += 1;
        }
        if self.pos < self.src.len() && (self.src[self.pos] | 0x20) == b'e' {
            let mark = self.pos;
            self.pos += 1;
            if self.pos < self.src.len() && (self.src[self.pos] == b'+' || self.src[self.pos] == b'-')
            {
                self.pos += 1;
            }
            if self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            } else {
                self.pos = mark;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        text.parse::<f64>().map(Expr::Num).map_err(|_| Error::Parse {
            offset: start,
            message: format!("invalid number literal `{text}`"),
        })
    }

    fn ident(&mut self) -> Result<Expr> {
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap().to_string();
        if self.peek() == Some(b'(') {
            self.pos += 1;
            let fun1 = match name.as_str() {
                "sin" => Some(Fun1::Sin),
                "cos" => Some(Fun1::Cos),
                "exp" => Some(Fun1::Exp),
                "tanh" => Some(Fun1::Tanh),
                "sqrt" => Some(Fun1::Sqrt),
                "abs" => Some(Fun1::Abs),
                _ => None,
            };
            if let Some(f) = fun1 {
                let arg = self.expr()?;
                if self.eat(b',') {
                    return Err(Error::Parse {
                        offset: self.pos,
                        message: format!("function `{name}` takes one argument"),
                    });
                }
                self.expect(b')')?;
                return Ok(Expr::Fun1(f, Box::new(arg)));
            }
            let fun2 = match name.as_str() {
                "min2" => Some(Fun2::Min2),
                "max2" => Some(Fun2::Max2),
                _ => None,
            };
            if let Some(f) = fun2 {
                let a = self.expr()?;
                if !self.eat(b',') {
                    return Err(Error::Parse {
                        offset: self.pos,
                        message: format!("function `{name}` takes two arguments"),
                    });
                }
                let b = self.expr()?;
                self.expect(b')')?;
                return Ok(Expr::Fun2(f, Box::new(a), Box::new(b)));
            }
            return Err(Error::Parse { offset: start, message: format!("unknown function `{name}`") });
        }
        if name == "pi" {
            return Ok(Expr::Pi);
        }
        match Var::from_name(&name) {
            Some(v) => Ok(Expr::Var(v)),
            None => Err(Error::Parse { offset: start, message: format!("unknown identifier `{name}`") }),
        }
    }
}

pub fn parse_expr(text: &str) -> Result<Expr> {
    if text.trim().is_empty() {
        return Err(Error::Parse { offset: 0, message: "empty expression".into() });
    }
    let mut p = Parser { src: text.as_bytes(), pos: 0 };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.err("trailing input after expression"));
    }
    Ok(e)
}

/// Bulk diffusion samples.
#[derive(Debug, Clone)]
pub enum DiffusionTable<T> {
    /// Scalar field c(x) times the identity; one sample per bulk node.
    ScalarField(Vec<T>),
    /// Constant symmetric 2x2 tensor (a11, a12, a22); disk only.
    ConstTensor([T; 3]),
}

impl<T: Scalar> DiffusionTable<T> {
    /// Minimum eigenvalue over all samples.
    pub fn min_eigenvalue(&self) -> T {
        match self {
            DiffusionTable::ScalarField(c) => {
                c.iter().fold(T::infinity(), |m, &v| m.min(v))
            }
            DiffusionTable::ConstTensor([a11, a12, a22]) => {
                let tr = *a11 + *a22;
                let disc = ((*a11 - *a22) * (*a11 - *a22) + T::of(4.0) * *a12 * *a12).sqrt();
                (tr - disc) / T::of(2.0)
            }
        }
    }
}

/// Parsed coefficient expressions, before sampling.
#[derive(Debug, Clone)]
pub struct CoefficientSpec {
    /// Scalar diffusion expression (space only).
    pub diff: Expr,
    /// Constant tensor alternative; overrides `diff` on the disk.
    pub diff_tensor: Option<[f64; 3]>,
    /// Boundary diffusion expression (disk only).
    pub diff_gamma: Expr,
    /// Bulk potential a(x, t).
    pub pot_a: Expr,
    /// Boundary potential b(x, t).
    pub pot_b: Expr,
    /// Bulk drift components.
    pub drift_x: Expr,
    pub drift_y: Expr,
    /// Boundary tangential drift (disk only).
    pub drift_gamma: Expr,
}

impl CoefficientSpec {
    /// Pure heat equation: unit diffusion, no lower-order terms.
    pub fn heat() -> Self {
        Self {
            diff: Expr::Num(1.0),
            diff_tensor: None,
            diff_gamma: Expr::Num(1.0),
            pot_a: Expr::Num(0.0),
            pot_b: Expr::Num(0.0),
            drift_x: Expr::Num(0.0),
            drift_y: Expr::Num(0.0),
            drift_gamma: Expr::Num(0.0),
        }
    }

    pub fn uses_time(&self) -> bool {
        self.pot_a.uses_time()
            || self.pot_b.uses_time()
            || self.drift_x.uses_time()
            || self.drift_y.uses_time()
            || self.drift_gamma.uses_time()
    }
}

/// Coefficient samples on mesh nodes x time levels.
#[derive(Debug, Clone)]
pub struct CoefficientTables<T> {
    /// Bulk diffusion (time-independent by construction).
    pub diff: DiffusionTable<T>,
    /// Boundary diffusion per boundary node (disk only; empty on the interval).
    pub diff_gamma: Vec<T>,
    /// Bulk potential per time level.
    pub pot_a: Vec<Vec<T>>,
    /// Boundary potential per time level.
    pub pot_b: Vec<Vec<T>>,
    /// Bulk drift per time level, one (bx, by) per node.
    pub drift: Vec<Vec<[T; 2]>>,
    /// Boundary tangential drift per time level.
    pub drift_gamma: Vec<Vec<T>>,
    /// Minimum diffusion eigenvalue found during validation.
    pub min_eig: T,
    /// True when no sampled coefficient depends on time.
    pub time_invariant: bool,
}

/// Samples all coefficients at every node and time level and validates
/// ellipticity and finiteness.
pub fn sample_coefficients<T: Scalar>(
    spec: &CoefficientSpec,
    mesh: &Mesh<T>,
    grid: &TimeGrid<T>,
) -> Result<CoefficientTables<T>> {
    let diff = if let Some(tensor) = spec.diff_tensor {
        if mesh.kind != MeshKind::Disk {
            return Err(Error::Config("tensor diffusion is only supported on the disk".into()));
        }
        DiffusionTable::ConstTensor([T::of(tensor[0]), T::of(tensor[1]), T::of(tensor[2])])
    } else {
        if spec.diff.uses_time() {
            return Err(Error::Config("the diffusion coefficient must not depend on time".into()));
        }
        let samples: Result<Vec<T>> = mesh
            .coords
            .iter()
            .map(|p| eval_expr(&spec.diff, &Env::at_point(mesh.kind, p, T::zero())))
            .collect();
        DiffusionTable::ScalarField(samples?)
    };
    let min_eig = diff.min_eigenvalue();
    if !(min_eig > T::zero()) {
        return Err(Error::EllipticityViolation {
            min_eig: min_eig.to_f64().unwrap_or(f64::NAN),
            location: "bulk diffusion samples".into(),
        });
    }

    let diff_gamma = if mesh.kind == MeshKind::Disk {
        if spec.diff_gamma.uses_time() {
            return Err(Error::Config(
                "the boundary diffusion coefficient must not depend on time".into(),
            ));
        }
        let samples: Result<Vec<T>> = mesh
            .boundary
            .iter()
            .map(|b| {
                eval_expr(
                    &spec.diff_gamma,
                    &Env::at_point(mesh.kind, &mesh.coords[b.bulk_index], T::zero()),
                )
            })
            .collect();
        let samples = samples?;
        if let Some(&bad) = samples.iter().find(|v| !(**v > T::zero())) {
            return Err(Error::EllipticityViolation {
                min_eig: bad.to_f64().unwrap_or(f64::NAN),
                location: "boundary diffusion samples".into(),
            });
        }
        samples
    } else {
        Vec::new()
    };

    let levels = grid.m + 1;
    let mut pot_a = Vec::with_capacity(levels);
    let mut pot_b = Vec::with_capacity(levels);
    let mut drift = Vec::with_capacity(levels);
    let mut drift_gamma = Vec::with_capacity(levels);
    for k in 0..levels {
        let t = grid.time(k);
        let mut ak = Vec::with_capacity(mesh.n_bulk());
        let mut dk = Vec::with_capacity(mesh.n_bulk());
        for p in &mesh.coords {
            let env = Env::at_point(mesh.kind, p, t);
            ak.push(eval_expr(&spec.pot_a, &env)?);
            let bx = eval_expr(&spec.drift_x, &env)?;
            let by = if mesh.kind == MeshKind::Disk {
                eval_expr(&spec.drift_y, &env)?
            } else {
                T::zero()
            };
            dk.push([bx, by]);
        }
        let mut bk = Vec::with_capacity(mesh.n_boundary());
        let mut gk = Vec::with_capacity(mesh.n_boundary());
        for b in &mesh.boundary {
            let env = Env::at_point(mesh.kind, &mesh.coords[b.bulk_index], t);
            bk.push(eval_expr(&spec.pot_b, &env)?);
            if mesh.kind == MeshKind::Disk {
                gk.push(eval_expr(&spec.drift_gamma, &env)?);
            } else {
                gk.push(T::zero());
            }
        }
        pot_a.push(ak);
        pot_b.push(bk);
        drift.push(dk);
        drift_gamma.push(gk);
    }

    Ok(CoefficientTables {
        diff,
        diff_gamma,
        pot_a,
        pot_b,
        drift,
        drift_gamma,
        min_eig,
        time_invariant: !spec.uses_time(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_interval_mesh;

    fn ev(text: &str, env: &Env<f64>) -> f64 {
        eval_expr(&parse_expr(text).unwrap(), env).unwrap()
    }

    #[test]
    fn precedence_and_functions() {
        let env = Env::new();
        assert_eq!(ev("1 + 2*3", &env), 7.0);
        assert_eq!(ev("2^3^2", &env), 512.0);
        assert_eq!(ev("-2^2", &env), -4.0);
        assert_eq!(ev("6/3/2", &env), 1.0);
        assert_eq!(ev("min2(3, 1+1)", &env), 2.0);
        assert_eq!(ev("max2(3, 5)", &env), 5.0);
        let env = Env::new().bind(Var::X, 0.5);
        assert!((ev("sin(pi*x)", &env) - 1.0).abs() < 1e-15);
        let env = Env::new().bind(Var::X, 0.25);
        assert_eq!(ev("x*(1-x)", &env), 0.1875);
        let env = Env::new().bind(Var::T, 0.0);
        assert_eq!(ev("exp(-t)", &env), 1.0);
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let env = Env::new().bind(Var::X, 0.0);
        let e = parse_expr("1/x").unwrap();
        assert!(matches!(eval_expr(&e, &env), Err(Error::NonFinite(_))));
    }

    #[test]
    fn unbound_identifier_is_an_error() {
        let e = parse_expr("x + y").unwrap();
        let env = Env::new().bind(Var::X, 1.0);
        assert!(eval_expr::<f64>(&e, &env).is_err());
    }

    #[test]
    fn parse_errors_carry_offsets() {
        match parse_expr("1 + @") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(parse_expr("sin(1, 2)").is_err());
        assert!(parse_expr("min2(1)").is_err());
        assert!(parse_expr("foo(1)").is_err());
        assert!(parse_expr("bogus").is_err());
        assert!(parse_expr("1 + 2 junk").is_err());
        assert!(parse_expr("").is_err());
    }

    #[test]
    fn time_dependence_detection() {
        assert!(parse_expr("exp(-t)").unwrap().uses_time());
        assert!(!parse_expr("sin(pi*x)").unwrap().uses_time());
    }

    #[test]
    fn sampling_heat_tables() {
        let mesh = build_interval_mesh::<f64>(9, 1.0).unwrap();
        let grid = crate::pdecore::TimeGrid::new(1.0, 4, 0.5).unwrap();
        let spec = CoefficientSpec::heat();
        let tables = sample_coefficients(&spec, &mesh, &grid).unwrap();
        assert_eq!(tables.min_eig, 1.0);
        assert!(tables.time_invariant);
    }

    #[test]
    fn sampling_scans_for_min_eigenvalue() {
        let mesh = build_interval_mesh::<f64>(33, 1.0).unwrap();
        let grid = crate::pdecore::TimeGrid::new(1.0, 2, 0.5).unwrap();
        let mut spec = CoefficientSpec::heat();
        spec.diff = parse_expr("1+0.5*sin(pi*x)").unwrap();
        let tables = sample_coefficients(&spec, &mesh, &grid).unwrap();
        assert!((tables.min_eig - 1.0).abs() < 1e-14);
    }

    #[test]
    fn sampling_time_dependent_potential() {
        let mesh = build_interval_mesh::<f64>(9, 1.0).unwrap();
        let grid = crate::pdecore::TimeGrid::new(1.0, 8, 0.5).unwrap();
        let mut spec = CoefficientSpec::heat();
        spec.pot_a = parse_expr("5*cos(t)").unwrap();
        let tables = sample_coefficients(&spec, &mesh, &grid).unwrap();
        assert!(!tables.time_invariant);
        for level in &tables.pot_a {
            for v in level {
                assert!(*v >= -5.0 && *v <= 5.0);
            }
        }
    }

    #[test]
    fn sampling_rejects_nonelliptic_diffusion() {
        let mesh = build_interval_mesh::<f64>(9, 1.0).unwrap();
        let grid = crate::pdecore::TimeGrid::new(1.0, 2, 0.5).unwrap();
        let mut spec = CoefficientSpec::heat();
        spec.diff = parse_expr("-1").unwrap();
        assert!(matches!(
            sample_coefficients(&spec, &mesh, &grid),
            Err(Error::EllipticityViolation { .. })
        ));
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (-10.0..10.0f64).prop_map(Expr::Num),
            Just(Expr::Pi),
            Just(Expr::Var(Var::X)),
            Just(Expr::Var(Var::T)),
        ];
        leaf.prop_recursive(4, 32, 3, |inner| {
            prop_oneof![
                inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
                (inner.clone(), inner.clone(), 0..4usize).prop_map(|(a, b, op)| {
                    let op = [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div][op];
                    Expr::Bin(op, Box::new(a), Box::new(b))
                }),
                inner.clone().prop_map(|e| Expr::Fun1(Fun1::Sin, Box::new(e))),
                inner.clone().prop_map(|e| Expr::Fun1(Fun1::Tanh, Box::new(e))),
                (inner.clone(), inner).prop_map(|(a, b)| Expr::Fun2(Fun2::Min2, Box::new(a), Box::new(b))),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(e in arb_expr(), pts in proptest::collection::vec((-3.0..3.0f64, 0.0..2.0f64), 10)) {
            let printed = e.to_string();
            let reparsed = parse_expr(&printed).unwrap();
            for (x, t) in pts {
                let env = Env::new().bind(Var::X, x).bind(Var::T, t);
                let a = eval_expr(&e, &env);
                let b = eval_expr(&reparsed, &env);
                match (a, b) {
                    (Ok(a), Ok(b)) => {
                        let scale = 1.0f64.max(a.abs());
                        prop_assert!((a - b).abs() <= 1e-15 * scale, "{printed}: {a} vs {b}");
                    }
                    (Err(_), Err(_)) => {}
                    (a, b) => prop_assert!(false, "{printed}: mismatched outcomes {a:?} vs {b:?}"),
                }
            }
        }
    }
}
