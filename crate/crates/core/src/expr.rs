//! Closed-form scalar expressions over the coordinates `x1, ..., xN` and
//! piecewise-constant tables on a grid of the unit cell.
//!
//! Grammar (EBNF):
//!
//! ```text
//! expr    = term , { ( "+" | "-" ) , term } ;
//! term    = unary , { ( "*" | "/" ) , unary } ;
//! unary   = ( "-" | "+" ) , unary | power ;
//! power   = primary , [ "^" , unary ] ;
//! primary = number | "pi" | variable
//!         | function , "(" , expr , { "," , expr } , ")"
//!         | "(" , expr , ")" ;
//! variable = "x1" | "x2" | "x" | "y" ;        (* x = x1, y = x2 *)
//! function = "sin" | "cos" | "exp" | "abs" | "floor" | "sqrt" | "min" | "max" ;
//! ```
//!
//! `^` is right-associative and binds tighter than unary minus on its left
//! operand: `-x^2 = -(x^2)`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("malformed expression `{source_text}`: {message} at byte {position}")]
    Syntax { source_text: String, message: String, position: usize },
    #[error("unknown variable `{name}` (space dimension {dim})")]
    UnknownVariable { name: String, dim: usize },
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
    #[error("function `{name}` takes {expected} argument(s), got {got}")]
    Arity { name: String, expected: usize, got: usize },
    #[error("table with cells {cells:?} needs {expected} values, got {got}")]
    TableShape { cells: Vec<usize>, expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func {
    Sin,
    Cos,
    Exp,
    Abs,
    Floor,
    Sqrt,
    Min,
    Max,
}

impl Func {
    fn lookup(name: &str) -> Option<(Func, usize)> {
        Some(match name {
            "sin" => (Func::Sin, 1),
            "cos" => (Func::Cos, 1),
            "exp" => (Func::Exp, 1),
            "abs" => (Func::Abs, 1),
            "floor" => (Func::Floor, 1),
            "sqrt" => (Func::Sqrt, 1),
            "min" => (Func::Min, 2),
            "max" => (Func::Max, 2),
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var(usize),
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

impl Node {
    fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Node::Num(v) => *v,
            Node::Var(i) => x[*i],
            Node::Neg(a) => -a.eval(x),
            Node::Add(a, b) => a.eval(x) + b.eval(x),
            Node::Sub(a, b) => a.eval(x) - b.eval(x),
            Node::Mul(a, b) => a.eval(x) * b.eval(x),
            Node::Div(a, b) => a.eval(x) / b.eval(x),
            Node::Pow(a, b) => a.eval(x).powf(b.eval(x)),
            Node::Call(f, args) => {
                let a = args[0].eval(x);
                match f {
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Exp => a.exp(),
                    Func::Abs => a.abs(),
                    Func::Floor => a.floor(),
                    Func::Sqrt => a.sqrt(),
                    Func::Min => a.min(args[1].eval(x)),
                    Func::Max => a.max(args[1].eval(x)),
                }
            }
        }
    }
}

/// A parsed expression in the variables `x1..xN`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    text: String,
    dim: usize,
    root: Node,
}

impl Expr {
    pub fn parse(text: &str, dim: usize) -> Result<Expr, ExprError> {
        let mut p = Parser { src: text, bytes: text.as_bytes(), pos: 0, dim };
        let root = p.expr()?;
        p.skip_ws();
        if p.pos != p.bytes.len() {
            return Err(p.error("unexpected trailing input"));
        }
        Ok(Expr { text: text.to_string(), dim, root })
    }

    /// Evaluates at `x` (at least `dim` coordinates).
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.root.eval(x)
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

struct Parser<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
    dim: usize,
}

impl Parser<'_> {
    fn error(&self, message: &str) -> ExprError {
        ExprError::Syntax { source_text: self.src.to_string(), message: message.to_string(), position: self.pos }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                lhs = Node::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat(b'-') {
                lhs = Node::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(b'*') {
                lhs = Node::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat(b'/') {
                lhs = Node::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        if self.eat(b'-') {
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        if self.eat(b'+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node, ExprError> {
        let base = self.primary()?;
        if self.eat(b'^') {
            return Ok(Node::Pow(Box::new(base), Box::new(self.unary()?)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Node, ExprError> {
        match self.peek() {
            None => Err(self.error("unexpected end of input")),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.error("expected `)`"));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.identifier(),
            Some(_) => Err(self.error("unexpected character")),
        }
    }

    fn number(&mut self) -> Result<Node, ExprError> {
        let start = self.pos;
        while self.pos < self.bytes.len() && (self.bytes[self.pos].is_ascii_digit() || self.bytes[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < self.bytes.len() && matches!(self.bytes[self.pos], b'e' | b'E') {
            let save = self.pos;
            self.pos += 1;
            if self.pos < self.bytes.len() && matches!(self.bytes[self.pos], b'+' | b'-') {
                self.pos += 1;
            }
            let digits = self.pos;
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if self.pos == digits {
                self.pos = save;
            }
        }
        self.src[start..self.pos]
            .parse::<f64>()
            .map(Node::Num)
            .map_err(|_| ExprError::Syntax {
                source_text: self.src.to_string(),
                message: "invalid number".into(),
                position: start,
            })
    }

    fn identifier(&mut self) -> Result<Node, ExprError> {
        let start = self.pos;
        while self.pos < self.bytes.len() && (self.bytes[self.pos].is_ascii_alphanumeric() || self.bytes[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = &self.src[start..self.pos];
        if self.peek() == Some(b'(') {
            let (func, arity) = Func::lookup(name).ok_or_else(|| ExprError::UnknownFunction(name.to_string()))?;
            self.pos += 1;
            let mut args = vec![self.expr()?];
            while self.eat(b',') {
                args.push(self.expr()?);
            }
            if !self.eat(b')') {
                return Err(self.error("expected `)` after function arguments"));
            }
            if args.len() != arity {
                return Err(ExprError::Arity { name: name.to_string(), expected: arity, got: args.len() });
            }
            return Ok(Node::Call(func, args));
        }
        let var = match name {
            "pi" => return Ok(Node::Num(std::f64::consts::PI)),
            "x" | "x1" => 0,
            "y" | "x2" => 1,
            _ => return Err(ExprError::UnknownVariable { name: name.to_string(), dim: self.dim }),
        };
        if var >= self.dim {
            return Err(ExprError::UnknownVariable { name: name.to_string(), dim: self.dim });
        }
        Ok(Node::Var(var))
    }
}

/// Piecewise-constant values on a uniform grid of `(0,1)^N`, first axis
/// fastest. Points outside the unit cell are clamped to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Table {
    pub cells: Vec<usize>,
    pub values: Vec<f64>,
}

impl Table {
    pub fn new(cells: Vec<usize>, values: Vec<f64>) -> Result<Table, ExprError> {
        let expected: usize = cells.iter().product();
        if cells.is_empty() || expected == 0 || expected != values.len() {
            return Err(ExprError::TableShape { cells, expected, got: values.len() });
        }
        Ok(Table { cells, values })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut index = 0;
        let mut stride = 1;
        for (axis, &k) in self.cells.iter().enumerate() {
            let t = ((x[axis].clamp(0.0, 1.0) * k as f64).floor() as usize).min(k - 1);
            index += t * stride;
            stride *= k;
        }
        self.values[index]
    }
}

/// A scalar function of position: constant, expression or table.
#[derive(Debug, Clone, PartialEq)]
pub enum ScalarFunction {
    Constant(f64),
    Expression(Expr),
    Table(Table),
}

impl ScalarFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            ScalarFunction::Constant(v) => *v,
            ScalarFunction::Expression(e) => e.eval(x),
            ScalarFunction::Table(t) => t.eval(x),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, ScalarFunction::Constant(v) if *v == 0.0)
    }
}

/// Serialized form of a [`ScalarFunction`]: a number, an expression string
/// or a `{ cells, values }` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarSpec {
    Number(f64),
    Expression(String),
    Table(Table),
}

impl ScalarSpec {
    pub fn build(&self, dim: usize) -> Result<ScalarFunction, ExprError> {
        Ok(match self {
            ScalarSpec::Number(v) => ScalarFunction::Constant(*v),
            ScalarSpec::Expression(s) => ScalarFunction::Expression(Expr::parse(s, dim)?),
            ScalarSpec::Table(t) => {
                if t.cells.len() != dim {
                    return Err(ExprError::TableShape {
                        cells: t.cells.clone(),
                        expected: dim,
                        got: t.cells.len(),
                    });
                }
                ScalarFunction::Table(Table::new(t.cells.clone(), t.values.clone())?)
            }
        })
    }
}
