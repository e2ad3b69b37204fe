//! Minimal univariate expression language for problem data.
//!
//! Dynamics, costs, and boundary values enter the solver as products of
//! one-dimensional factors, each written in this language: the single
//! variable `x`, the constant `pi`, numeric literals, `+ - * / ^`, unary
//! minus, and the functions `sin cos tan exp log sqrt abs tanh`. Precedence
//! is `^` above unary minus above `* /` above `+ -`, with left associativity
//! for the binary chains. Exponents must be numeric literals, which keeps
//! evaluation total and the grammar LL(1).

use ndarray::Array1;
use std::fmt;
use thiserror::Error;

use crate::grid_fd::Grid;

#[derive(Debug, Error)]
pub enum ExprError {
    #[error("syntax error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdent { offset: usize, name: String },
    #[error("non-finite value {value} at node {index} (x = {coord})")]
    NonFinite {
        index: usize,
        coord: f64,
        value: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
    Abs,
    Tanh,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Tanh => "tanh",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "tanh" => Func::Tanh,
            _ => return None,
        })
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Func::Sin => v.sin(),
            Func::Cos => v.cos(),
            Func::Tan => v.tan(),
            Func::Exp => v.exp(),
            Func::Log => v.ln(),
            Func::Sqrt => v.sqrt(),
            Func::Abs => v.abs(),
            Func::Tanh => v.tanh(),
        }
    }
}

/// Parsed expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum ExprAst {
    Number(f64),
    Var,
    Pi,
    Neg(Box<ExprAst>),
    Bin(BinOp, Box<ExprAst>, Box<ExprAst>),
    /// Power with a literal exponent.
    Pow(Box<ExprAst>, f64),
    Call(Func, Box<ExprAst>),
}

impl ExprAst {
    /// Evaluate at a point. Total on finite input; may return inf/NaN,
    /// which [`sample`] turns into a located error.
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            ExprAst::Number(v) => *v,
            ExprAst::Var => x,
            ExprAst::Pi => std::f64::consts::PI,
            ExprAst::Neg(e) => -e.eval(x),
            ExprAst::Bin(op, a, b) => {
                let (a, b) = (a.eval(x), b.eval(x));
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                }
            }
            ExprAst::Pow(base, e) => base.eval(x).powf(*e),
            ExprAst::Call(f, e) => f.apply(e.eval(x)),
        }
    }

    /// True when the expression has no `x` dependence.
    pub fn is_constant(&self) -> bool {
        match self {
            ExprAst::Number(_) | ExprAst::Pi => true,
            ExprAst::Var => false,
            ExprAst::Neg(e) => e.is_constant(),
            ExprAst::Bin(_, a, b) => a.is_constant() && b.is_constant(),
            ExprAst::Pow(b, _) => b.is_constant(),
            ExprAst::Call(_, e) => e.is_constant(),
        }
    }
}

impl fmt::Display for ExprAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExprAst::Number(v) => write!(f, "{v}"),
            ExprAst::Var => write!(f, "x"),
            ExprAst::Pi => write!(f, "pi"),
            ExprAst::Neg(e) => write!(f, "(-{e})"),
            ExprAst::Bin(op, a, b) => {
                let sym = match op {
                    BinOp::Add => "+",
                    BinOp::Sub => "-",
                    BinOp::Mul => "*",
                    BinOp::Div => "/",
                };
                write!(f, "({a} {sym} {b})")
            }
            ExprAst::Pow(base, e) => match **base {
                ExprAst::Number(_) | ExprAst::Var | ExprAst::Pi | ExprAst::Call(..) => {
                    write!(f, "{base}^{e}")
                }
                _ => write!(f, "({base})^{e}"),
            },
            ExprAst::Call(func, e) => write!(f, "{}({e})", func.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Eof,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Self {
            src: src.as_bytes(),
            pos: 0,
        }
    }

    fn next_token(&mut self) -> Result<(Tok, usize), ExprError> {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        if self.pos >= self.src.len() {
            return Ok((Tok::Eof, start));
        }
        let c = self.src[self.pos];
        let tok = match c {
            b'+' => Tok::Plus,
            b'-' => Tok::Minus,
            b'*' => Tok::Star,
            b'/' => Tok::Slash,
            b'^' => Tok::Caret,
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b'0'..=b'9' | b'.' => {
                let mut end = self.pos;
                while end < self.src.len()
                    && (self.src[end].is_ascii_digit() || self.src[end] == b'.')
                {
                    end += 1;
                }
                if end < self.src.len() && (self.src[end] == b'e' || self.src[end] == b'E') {
                    let mut e = end + 1;
                    if e < self.src.len() && (self.src[e] == b'+' || self.src[e] == b'-') {
                        e += 1;
                    }
                    if e < self.src.len() && self.src[e].is_ascii_digit() {
                        end = e;
                        while end < self.src.len() && self.src[end].is_ascii_digit() {
                            end += 1;
                        }
                    }
                }
                let text = std::str::from_utf8(&self.src[start..end]).unwrap();
                let v: f64 = text.parse().map_err(|_| ExprError::Parse {
                    offset: start,
                    message: format!("invalid number literal `{text}`"),
                })?;
                self.pos = end;
                return Ok((Tok::Num(v), start));
            }
            b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                let mut end = self.pos;
                while end < self.src.len()
                    && (self.src[end].is_ascii_alphanumeric() || self.src[end] == b'_')
                {
                    end += 1;
                }
                let text = std::str::from_utf8(&self.src[start..end]).unwrap().to_string();
                self.pos = end;
                return Ok((Tok::Ident(text), start));
            }
            other => {
                return Err(ExprError::Parse {
                    offset: start,
                    message: format!("unexpected character `{}`", other as char),
                });
            }
        };
        self.pos += 1;
        Ok((tok, start))
    }
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &(Tok, usize) {
        &self.toks[self.at]
    }

    fn bump(&mut self) -> (Tok, usize) {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn expr(&mut self) -> Result<ExprAst, ExprError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek().0 {
                Tok::Plus => {
                    self.bump();
                    let rhs = self.term()?;
                    lhs = ExprAst::Bin(BinOp::Add, Box::new(lhs), Box::new(rhs));
                }
                Tok::Minus => {
                    self.bump();
                    let rhs = self.term()?;
                    lhs = ExprAst::Bin(BinOp::Sub, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<ExprAst, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek().0 {
                Tok::Star => {
                    self.bump();
                    let rhs = self.unary()?;
                    lhs = ExprAst::Bin(BinOp::Mul, Box::new(lhs), Box::new(rhs));
                }
                Tok::Slash => {
                    self.bump();
                    let rhs = self.unary()?;
                    lhs = ExprAst::Bin(BinOp::Div, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<ExprAst, ExprError> {
        if matches!(self.peek().0, Tok::Minus) {
            self.bump();
            let inner = self.unary()?;
            return Ok(ExprAst::Neg(Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<ExprAst, ExprError> {
        let base = self.atom()?;
        if matches!(self.peek().0, Tok::Caret) {
            self.bump();
            let neg = if matches!(self.peek().0, Tok::Minus) {
                self.bump();
                true
            } else {
                false
            };
            let (tok, offset) = self.bump();
            match tok {
                Tok::Num(v) => {
                    let e = if neg { -v } else { v };
                    return Ok(ExprAst::Pow(Box::new(base), e));
                }
                _ => {
                    return Err(ExprError::Parse {
                        offset,
                        message: "expected number literal exponent after `^`".into(),
                    });
                }
            }
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<ExprAst, ExprError> {
        let (tok, offset) = self.bump();
        match tok {
            Tok::Num(v) => Ok(ExprAst::Number(v)),
            Tok::Ident(name) => {
                if name == "x" {
                    return Ok(ExprAst::Var);
                }
                if name == "pi" {
                    return Ok(ExprAst::Pi);
                }
                if let Some(f) = Func::from_name(&name) {
                    let (t, off) = self.bump();
                    if !matches!(t, Tok::LParen) {
                        return Err(ExprError::Parse {
                            offset: off,
                            message: format!("expected `(` after function `{name}`"),
                        });
                    }
                    let arg = self.expr()?;
                    let (t, off) = self.bump();
                    if !matches!(t, Tok::RParen) {
                        return Err(ExprError::Parse {
                            offset: off,
                            message: "expected `)` to close function call".into(),
                        });
                    }
                    return Ok(ExprAst::Call(f, Box::new(arg)));
                }
                Err(ExprError::UnknownIdent { offset, name })
            }
            Tok::LParen => {
                let inner = self.expr()?;
                let (t, off) = self.bump();
                if !matches!(t, Tok::RParen) {
                    return Err(ExprError::Parse {
                        offset: off,
                        message: "expected `)`".into(),
                    });
                }
                Ok(inner)
            }
            _ => Err(ExprError::Parse {
                offset,
                message: "expected number, `x`, `pi`, function, or `(`".into(),
            }),
        }
    }
}

/// Parse an expression string.
pub fn parse(text: &str) -> Result<ExprAst, ExprError> {
    let mut lexer = Lexer::new(text);
    let mut toks = Vec::new();
    loop {
        let (t, off) = lexer.next_token()?;
        let eof = matches!(t, Tok::Eof);
        toks.push((t, off));
        if eof {
            break;
        }
    }
    let mut p = Parser { toks, at: 0 };
    let ast = p.expr()?;
    let (t, off) = p.peek().clone();
    if !matches!(t, Tok::Eof) {
        return Err(ExprError::Parse {
            offset: off,
            message: "unexpected trailing input".into(),
        });
    }
    Ok(ast)
}

/// Pointwise evaluation at the nodes of one grid dimension. Non-finite
/// values are reported with the offending node index and coordinate.
pub fn sample(ast: &ExprAst, grid: &Grid, dim: usize) -> Result<Array1<f64>, ExprError> {
    let gd = grid.dim(dim);
    let mut out = Array1::zeros(gd.points);
    for k in 0..gd.points {
        let coord = gd.node(k);
        let v = ast.eval(coord);
        if !v.is_finite() {
            return Err(ExprError::NonFinite {
                index: k,
                coord,
                value: v,
            });
        }
        out[k] = v;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_fd::GridDim;
    use approx::assert_abs_diff_eq;

    #[test]
    fn grammar_power_of_call() {
        let ast = parse("sin(x)^2").unwrap();
        assert_eq!(
            ast,
            ExprAst::Pow(Box::new(ExprAst::Call(Func::Sin, Box::new(ExprAst::Var))), 2.0)
        );
    }

    #[test]
    fn pendulum_denominator_evaluates() {
        let ast = parse("1/(4/3 - 0.01*cos(x)^2)").unwrap();
        let expect = 1.0 / (4.0 / 3.0 - 0.01);
        assert_abs_diff_eq!(ast.eval(0.0), expect, epsilon = 1e-15);
    }

    #[test]
    fn dangling_operator_offset() {
        match parse("2 +") {
            Err(ExprError::Parse { offset, .. }) => assert_eq!(offset, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_identifier_reported() {
        match parse("2*y") {
            Err(ExprError::UnknownIdent { offset, name }) => {
                assert_eq!(offset, 2);
                assert_eq!(name, "y");
            }
            other => panic!("expected unknown identifier, got {other:?}"),
        }
    }

    #[test]
    fn precedence_and_associativity() {
        // ^ binds tighter than unary minus: -x^2 = -(x^2)
        let ast = parse("-x^2").unwrap();
        assert_eq!(
            ast,
            ExprAst::Neg(Box::new(ExprAst::Pow(Box::new(ExprAst::Var), 2.0)))
        );
        assert_abs_diff_eq!(parse("2-3-4").unwrap().eval(0.0), -5.0);
        assert_abs_diff_eq!(parse("24/4/2").unwrap().eval(0.0), 3.0);
        assert_abs_diff_eq!(parse("1+2*3").unwrap().eval(0.0), 7.0);
        assert_abs_diff_eq!(parse("2*pi").unwrap().eval(0.0), std::f64::consts::TAU);
        assert_abs_diff_eq!(parse("x^-1").unwrap().eval(4.0), 0.25);
    }

    fn grid1(points: usize, lower: f64, upper: f64, periodic: bool) -> Grid {
        Grid::new(vec![GridDim::new(points, lower, upper, periodic).unwrap()])
    }

    #[test]
    fn sample_constant_and_linear() {
        let g = grid1(11, -1.0, 1.0, false);
        let ones = sample(&parse("1").unwrap(), &g, 0).unwrap();
        assert!(ones.iter().all(|&v| v == 1.0));
        let g3 = grid1(3, -1.0, 1.0, false);
        let lin = sample(&parse("x").unwrap(), &g3, 0).unwrap();
        assert_eq!(lin.to_vec(), vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn sample_sin_periodic() {
        let g = grid1(8, -std::f64::consts::PI, std::f64::consts::PI, true);
        let s = sample(&parse("sin(x)").unwrap(), &g, 0).unwrap();
        for (k, v) in s.iter().enumerate() {
            let coord = g.dim(0).node(k);
            assert_abs_diff_eq!(*v, coord.sin(), epsilon = 1e-15);
        }
    }

    #[test]
    fn sample_reports_division_by_zero() {
        let g = grid1(3, -1.0, 1.0, false);
        match sample(&parse("1/x").unwrap(), &g, 0) {
            Err(ExprError::NonFinite { index, coord, .. }) => {
                assert_eq!(index, 1);
                assert_eq!(coord, 0.0);
            }
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn print_parse_round_trip() {
        for text in [
            "sin(x)^2",
            "1/(4/3 - 0.01*cos(x)^2)",
            "-x^2 + 3*tanh(x) - sqrt(abs(x))",
            "exp(-(x - 0.5)^2/0.125)",
            "2*pi*x - log(x + 10)",
            "x^-2",
        ] {
            let ast = parse(text).unwrap();
            let printed = ast.to_string();
            let reparsed = parse(&printed).unwrap_or_else(|e| {
                panic!("round-trip parse of `{printed}` failed: {e}");
            });
            assert_eq!(ast, reparsed, "round trip through `{printed}`");
        }
    }

    #[test]
    fn is_constant_detection() {
        assert!(parse("2*pi - 1").unwrap().is_constant());
        assert!(!parse("2*x").unwrap().is_constant());
    }
}
