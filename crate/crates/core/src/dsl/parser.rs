use super::{BinOp, DslError, Expr, Func};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Field(String),
    Ident(String),
    LParen,
    RParen,
    Comma,
    Op(BinOp),
    End,
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn err(&self, offset: usize, message: impl Into<String>) -> DslError {
        DslError::SyntaxError {
            offset,
            message: message.into(),
        }
    }

    fn tokens(mut self) -> Result<Vec<(usize, Tok)>, DslError> {
        let bytes = self.src.as_bytes();
        let mut out = Vec::new();
        loop {
            while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            let start = self.pos;
            let Some(&c) = bytes.get(self.pos) else {
                out.push((start, Tok::End));
                return Ok(out);
            };
            let tok = match c {
                b'(' => Tok::LParen,
                b')' => Tok::RParen,
                b',' => Tok::Comma,
                b'+' => Tok::Op(BinOp::Add),
                b'-' => Tok::Op(BinOp::Sub),
                b'*' => Tok::Op(BinOp::Mul),
                b'/' => Tok::Op(BinOp::Div),
                b'$' => {
                    let name = self.ident_from(start + 1);
                    if name.is_empty() {
                        return Err(self.err(start, "expected field name after '$'"));
                    }
                    self.pos = start + 1 + name.len();
                    out.push((start, Tok::Field(name.to_string())));
                    continue;
                }
                b'0'..=b'9' | b'.' => {
                    let len = number_len(&bytes[start..]);
                    let text = &self.src[start..start + len];
                    let v: f64 = text
                        .parse()
                        .map_err(|_| self.err(start, format!("malformed number {text:?}")))?;
                    self.pos = start + len;
                    out.push((start, Tok::Num(v)));
                    continue;
                }
                c if c.is_ascii_alphabetic() || c == b'_' => {
                    let name = self.ident_from(start);
                    self.pos = start + name.len();
                    out.push((start, Tok::Ident(name.to_string())));
                    continue;
                }
                _ => {
                    let ch = self.src[start..].chars().next().unwrap_or('?');
                    return Err(self.err(start, format!("unexpected character {ch:?}")));
                }
            };
            self.pos += 1;
            out.push((start, tok));
        }
    }

    fn ident_from(&self, from: usize) -> &'a str {
        let rest = &self.src[from..];
        let len = rest
            .bytes()
            .take_while(|b| b.is_ascii_alphanumeric() || *b == b'_')
            .count();
        &rest[..len]
    }
}

fn number_len(b: &[u8]) -> usize {
    let mut k = 0;
    while k < b.len() && (b[k].is_ascii_digit() || b[k] == b'.') {
        k += 1;
    }
    if k < b.len() && (b[k] == b'e' || b[k] == b'E') {
        let mut j = k + 1;
        if j < b.len() && (b[j] == b'+' || b[j] == b'-') {
            j += 1;
        }
        if j < b.len() && b[j].is_ascii_digit() {
            while j < b.len() && b[j].is_ascii_digit() {
                j += 1;
            }
            k = j;
        }
    }
    k
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].1
    }

    fn offset(&self) -> usize {
        self.toks[self.at].0
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.at].1.clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn syntax(&self, message: impl Into<String>) -> DslError {
        DslError::SyntaxError {
            offset: self.offset(),
            message: message.into(),
        }
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), DslError> {
        if *self.peek() == tok {
            self.bump();
            Ok(())
        } else {
            Err(self.syntax(format!("expected {what}")))
        }
    }

    // sum := product (('+' | '-') product)*
    fn sum(&mut self) -> Result<Expr, DslError> {
        let mut lhs = self.product()?;
        while let Tok::Op(op @ (BinOp::Add | BinOp::Sub)) = *self.peek() {
            self.bump();
            let rhs = self.product()?;
            lhs = Expr::bin(op, lhs, rhs);
        }
        Ok(lhs)
    }

    // product := unary (('*' | '/') unary)*
    fn product(&mut self) -> Result<Expr, DslError> {
        let mut lhs = self.unary()?;
        while let Tok::Op(op @ (BinOp::Mul | BinOp::Div)) = *self.peek() {
            self.bump();
            let rhs = self.unary()?;
            lhs = Expr::bin(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, DslError> {
        if *self.peek() == Tok::Op(BinOp::Sub) {
            self.bump();
            // A minus glued to a numeric literal is part of the literal.
            if let Tok::Num(v) = *self.peek() {
                self.bump();
                return Ok(Expr::Num(-v));
            }
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr, DslError> {
        let start = self.offset();
        match self.bump() {
            Tok::Num(v) => Ok(Expr::Num(v)),
            Tok::Field(name) => Ok(Expr::Field(name)),
            Tok::LParen => {
                let e = self.sum()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(e)
            }
            Tok::Ident(name) => {
                let func = Func::from_name(&name).ok_or_else(|| DslError::UnknownOp(name.clone()))?;
                if *self.peek() != Tok::LParen {
                    return Err(self.syntax(format!("expected '(' after {name}")));
                }
                self.bump();
                let mut args = vec![self.sum()?];
                while *self.peek() == Tok::Comma {
                    self.bump();
                    args.push(self.sum()?);
                }
                self.expect(Tok::RParen, "',' or ')'")?;
                if args.len() != func.arity() {
                    return Err(DslError::ArityError {
                        op: name,
                        expected: func.arity(),
                        got: args.len(),
                    });
                }
                if func.takes_window() {
                    match args.last() {
                        Some(Expr::Num(w)) if *w >= 1.0 && w.fract() == 0.0 && *w <= 1e6 => {}
                        _ => return Err(DslError::BadWindow { op: name }),
                    }
                }
                Ok(Expr::Call(func, args))
            }
            Tok::End => Err(DslError::SyntaxError {
                offset: start,
                message: "unexpected end of input".into(),
            }),
            other => Err(DslError::SyntaxError {
                offset: start,
                message: format!("unexpected token {other:?}"),
            }),
        }
    }
}

/// Parses a formula. Operator names are case-sensitive.
pub fn parse(text: &str) -> Result<Expr, DslError> {
    let toks = Lexer { src: text, pos: 0 }.tokens()?;
    let mut p = Parser { toks, at: 0 };
    let e = p.sum()?;
    if *p.peek() != Tok::End {
        return Err(p.syntax("trailing input"));
    }
    Ok(e)
}
