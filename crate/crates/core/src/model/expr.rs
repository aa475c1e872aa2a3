//! Closed-form coefficient expressions for config files.
//!
//! The language is deliberately tiny: `+ - * /`, parentheses, unary minus,
//! the functions `sin`, `cos`, `exp`, `sqrt`, numeric literals, `pi`, and
//! the positional variables `x0, x1, ...` (slow) and `y0, y1, ...` (fast).
//! `x` and `y` are accepted as aliases for `x0`/`y0`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Sqrt,
}

/// Parsed coefficient expression, evaluable at `(x, y)`.
#[derive(Debug, Clone)]
pub enum Expr {
    Const(f64),
    VarX(usize),
    VarY(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

impl Expr {
    pub fn parse(src: &str) -> Result<Self> {
        let tokens = lex(src)?;
        let mut p = Parser { tokens, pos: 0, src };
        let e = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(p.error("trailing input"));
        }
        Ok(e)
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::VarX(i) => x[*i],
            Expr::VarY(i) => y[*i],
            Expr::Neg(a) => -a.eval(x, y),
            Expr::Add(a, b) => a.eval(x, y) + b.eval(x, y),
            Expr::Sub(a, b) => a.eval(x, y) - b.eval(x, y),
            Expr::Mul(a, b) => a.eval(x, y) * b.eval(x, y),
            Expr::Div(a, b) => a.eval(x, y) / b.eval(x, y),
            Expr::Call(f, a) => {
                let v = a.eval(x, y);
                match f {
                    Func::Sin => v.sin(),
                    Func::Cos => v.cos(),
                    Func::Exp => v.exp(),
                    Func::Sqrt => v.sqrt(),
                }
            }
        }
    }

    /// Largest variable indices referenced, as `(max_x + 1, max_y + 1)`.
    pub fn arity(&self) -> (usize, usize) {
        match self {
            Expr::Const(_) => (0, 0),
            Expr::VarX(i) => (i + 1, 0),
            Expr::VarY(i) => (0, i + 1),
            Expr::Neg(a) | Expr::Call(_, a) => a.arity(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                let (ax, ay) = a.arity();
                let (bx, by) = b.arity();
                (ax.max(bx), ay.max(by))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    LParen,
    RParen,
}

fn lex(src: &str) -> Result<Vec<Token>> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                out.push(Token::Plus);
                i += 1;
            }
            '-' => {
                out.push(Token::Minus);
                i += 1;
            }
            '*' => {
                out.push(Token::Star);
                i += 1;
            }
            '/' => {
                out.push(Token::Slash);
                i += 1;
            }
            '(' => {
                out.push(Token::LParen);
                i += 1;
            }
            ')' => {
                out.push(Token::RParen);
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_digit()
                        || bytes[i] == b'.'
                        || bytes[i] == b'e'
                        || bytes[i] == b'E'
                        || ((bytes[i] == b'+' || bytes[i] == b'-')
                            && i > start
                            && (bytes[i - 1] == b'e' || bytes[i - 1] == b'E')))
                {
                    i += 1;
                }
                let text = &src[start..i];
                let v: f64 = text
                    .parse()
                    .map_err(|_| Error::Config(format!("bad numeric literal `{text}`")))?;
                out.push(Token::Num(v));
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push(Token::Ident(src[start..i].to_string()));
            }
            _ => return Err(Error::Config(format!("unexpected character `{c}` in expression"))),
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    src: &'a str,
}

impl Parser<'_> {
    fn error(&self, msg: &str) -> Error {
        Error::Config(format!("{msg} in expression `{}`", self.src))
    }

    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn bump(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(op) = self.peek().cloned() {
            match op {
                Token::Plus => {
                    self.bump();
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Token::Minus => {
                    self.bump();
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.factor()?;
        while let Some(op) = self.peek().cloned() {
            match op {
                Token::Star => {
                    self.bump();
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.factor()?));
                }
                Token::Slash => {
                    self.bump();
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.factor()?));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Expr> {
        match self.bump() {
            Some(Token::Minus) => Ok(Expr::Neg(Box::new(self.factor()?))),
            Some(Token::Num(v)) => Ok(Expr::Const(v)),
            Some(Token::LParen) => {
                let e = self.expr()?;
                match self.bump() {
                    Some(Token::RParen) => Ok(e),
                    _ => Err(self.error("expected `)`")),
                }
            }
            Some(Token::Ident(name)) => self.ident(&name),
            _ => Err(self.error("expected a factor")),
        }
    }

    fn ident(&mut self, name: &str) -> Result<Expr> {
        let func = match name {
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "exp" => Some(Func::Exp),
            "sqrt" => Some(Func::Sqrt),
            _ => None,
        };
        if let Some(f) = func {
            if self.bump() != Some(Token::LParen) {
                return Err(self.error(&format!("expected `(` after `{name}`")));
            }
            let arg = self.expr()?;
            if self.bump() != Some(Token::RParen) {
                return Err(self.error("expected `)`"));
            }
            return Ok(Expr::Call(f, Box::new(arg)));
        }
        match name {
            "pi" => Ok(Expr::Const(std::f64::consts::PI)),
            "x" => Ok(Expr::VarX(0)),
            "y" => Ok(Expr::VarY(0)),
            _ => {
                let (head, idx) = name.split_at(1);
                let parsed: Option<usize> = idx.parse().ok();
                match (head, parsed) {
                    ("x", Some(i)) => Ok(Expr::VarX(i)),
                    ("y", Some(i)) => Ok(Expr::VarY(i)),
                    _ => Err(self.error(&format!("unknown identifier `{name}`"))),
                }
            }
        }
    }
}
