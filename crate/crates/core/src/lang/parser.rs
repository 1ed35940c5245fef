// SPDX-License-Identifier: Apache-2.0

//! Lexer and recursive-descent parser for handler source text.

use std::collections::btree_map::Entry;

use thiserror::Error;

use super::ast::{BinOp, Expr, Handler, Program, Stmt, StmtKind};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at line {line}: {message}")]
    Syntax { line: u32, message: String },
    #[error("duplicate handler `{0}`")]
    DuplicateHandler(String),
}

impl ParseError {
    fn at(line: u32, message: impl Into<String>) -> Self {
        ParseError::Syntax {
            line,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Int(i64),
    Str(String),
    LBrace,
    RBrace,
    LParen,
    RParen,
    Semi,
    Comma,
    Dot,
    Assign,
    Op(BinOp),
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Int(i) => format!("integer {i}"),
            Tok::Str(_) => "string literal".to_string(),
            Tok::LBrace => "`{`".into(),
            Tok::RBrace => "`}`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Semi => "`;`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Dot => "`.`".into(),
            Tok::Assign => "`=`".into(),
            Tok::Op(op) => format!("`{}`", op.symbol()),
            Tok::Eof => "end of input".into(),
        }
    }
}

const KEYWORDS: &[&str] = &[
    "handler", "let", "if", "return", "true", "false", "null", "param", "db", "len", "concat",
];

fn lex(source: &str) -> Result<Vec<(Tok, u32)>, ParseError> {
    let mut out = Vec::new();
    let mut chars = source.chars().peekable();
    let mut line = 1u32;
    while let Some(&c) = chars.peek() {
        match c {
            '\n' => {
                line += 1;
                chars.next();
            }
            c if c.is_whitespace() => {
                chars.next();
            }
            '/' => {
                chars.next();
                if chars.peek() == Some(&'/') {
                    while let Some(&c) = chars.peek() {
                        if c == '\n' {
                            break;
                        }
                        chars.next();
                    }
                } else {
                    out.push((Tok::Op(BinOp::Div), line));
                }
            }
            '"' => {
                chars.next();
                let start = line;
                let mut s = String::new();
                loop {
                    match chars.next() {
                        None => return Err(ParseError::at(start, "unterminated string literal")),
                        Some('"') => break,
                        Some('\\') => match chars.next() {
                            Some('"') => s.push('"'),
                            Some('\\') => s.push('\\'),
                            Some(other) => {
                                return Err(ParseError::at(
                                    line,
                                    format!("unsupported escape `\\{other}`"),
                                ))
                            }
                            None => {
                                return Err(ParseError::at(start, "unterminated string literal"))
                            }
                        },
                        Some('\n') => {
                            line += 1;
                            s.push('\n');
                        }
                        Some(ch) => s.push(ch),
                    }
                }
                out.push((Tok::Str(s), start));
            }
            c if c.is_ascii_digit() => {
                let mut digits = String::new();
                while let Some(&d) = chars.peek() {
                    if !d.is_ascii_digit() {
                        break;
                    }
                    digits.push(d);
                    chars.next();
                }
                let value = digits
                    .parse::<i64>()
                    .map_err(|_| ParseError::at(line, format!("integer `{digits}` out of range")))?;
                out.push((Tok::Int(value), line));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut ident = String::new();
                while let Some(&d) = chars.peek() {
                    if !(d.is_ascii_alphanumeric() || d == '_') {
                        break;
                    }
                    ident.push(d);
                    chars.next();
                }
                out.push((Tok::Ident(ident), line));
            }
            _ => {
                chars.next();
                let tok = match c {
                    '{' => Tok::LBrace,
                    '}' => Tok::RBrace,
                    '(' => Tok::LParen,
                    ')' => Tok::RParen,
                    ';' => Tok::Semi,
                    ',' => Tok::Comma,
                    '.' => Tok::Dot,
                    '+' => Tok::Op(BinOp::Add),
                    '-' => Tok::Op(BinOp::Sub),
                    '*' => Tok::Op(BinOp::Mul),
                    '<' => Tok::Op(BinOp::Lt),
                    '>' => Tok::Op(BinOp::Gt),
                    '=' => {
                        if chars.peek() == Some(&'=') {
                            chars.next();
                            Tok::Op(BinOp::Eq)
                        } else {
                            Tok::Assign
                        }
                    }
                    '!' => {
                        if chars.peek() == Some(&'=') {
                            chars.next();
                            Tok::Op(BinOp::Ne)
                        } else {
                            return Err(ParseError::at(line, "expected `!=`"));
                        }
                    }
                    other => {
                        return Err(ParseError::at(line, format!("unexpected character `{other}`")))
                    }
                };
                out.push((tok, line));
            }
        }
    }
    out.push((Tok::Eof, line));
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, u32)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn peek_at(&self, offset: usize) -> &Tok {
        let i = (self.pos + offset).min(self.toks.len() - 1);
        &self.toks[i].0
    }

    fn line(&self) -> u32 {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        if self.pos < self.toks.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok) -> Result<(), ParseError> {
        if *self.peek() == want {
            self.bump();
            Ok(())
        } else {
            Err(self.unexpected(&want.describe()))
        }
    }

    fn unexpected(&self, wanted: &str) -> ParseError {
        ParseError::at(
            self.line(),
            format!("expected {wanted}, found {}", self.peek().describe()),
        )
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == kw)
    }

    fn ident(&mut self) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Ident(s) if !KEYWORDS.contains(&s.as_str()) => {
                self.bump();
                Ok(s)
            }
            _ => Err(self.unexpected("identifier")),
        }
    }

    fn program(&mut self) -> Result<Program, ParseError> {
        let mut program = Program::default();
        while *self.peek() != Tok::Eof {
            let handler = self.handler()?;
            match program.handlers.entry(handler.name.clone()) {
                Entry::Occupied(_) => return Err(ParseError::DuplicateHandler(handler.name)),
                Entry::Vacant(slot) => {
                    slot.insert(handler);
                }
            }
        }
        Ok(program)
    }

    fn handler(&mut self) -> Result<Handler, ParseError> {
        if !self.is_keyword("handler") {
            return Err(self.unexpected("`handler`"));
        }
        self.bump();
        let name = self.ident()?;
        let body = self.block()?;
        let mut handler = Handler { name, body };
        handler.renumber();
        Ok(handler)
    }

    fn block(&mut self) -> Result<Vec<Stmt>, ParseError> {
        self.expect(Tok::LBrace)?;
        let mut stmts = Vec::new();
        while *self.peek() != Tok::RBrace {
            if *self.peek() == Tok::Eof {
                return Err(self.unexpected("`}`"));
            }
            stmts.push(self.stmt()?);
        }
        self.bump();
        Ok(stmts)
    }

    fn stmt(&mut self) -> Result<Stmt, ParseError> {
        let kind = if self.is_keyword("let") {
            self.bump();
            let name = self.ident()?;
            self.expect(Tok::Assign)?;
            let value = self.expr()?;
            self.expect(Tok::Semi)?;
            StmtKind::Let { name, value }
        } else if self.is_keyword("if") {
            self.bump();
            let cond = self.expr()?;
            let body = self.block()?;
            StmtKind::If { cond, body }
        } else if self.is_keyword("return") {
            self.bump();
            let line = self.line();
            let status = match self.bump() {
                Tok::Int(i) if (100..=599).contains(&i) => i as u16,
                Tok::Int(i) => {
                    return Err(ParseError::at(line, format!("status {i} outside 100..=599")))
                }
                other => {
                    return Err(ParseError::at(
                        line,
                        format!("expected status code, found {}", other.describe()),
                    ))
                }
            };
            self.expect(Tok::Comma)?;
            let value = self.expr()?;
            self.expect(Tok::Semi)?;
            StmtKind::Return { status, value }
        } else if matches!(self.peek(), Tok::Ident(_)) && *self.peek_at(1) == Tok::Assign {
            let name = self.ident()?;
            self.expect(Tok::Assign)?;
            let value = self.expr()?;
            self.expect(Tok::Semi)?;
            StmtKind::Assign { name, value }
        } else {
            return Err(self.unexpected("statement"));
        };
        Ok(Stmt { line: 0, kind })
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        self.binary(1)
    }

    fn binary(&mut self, min_prec: u8) -> Result<Expr, ParseError> {
        let mut lhs = self.postfix()?;
        loop {
            let op = match self.peek() {
                Tok::Op(op) if op.precedence() >= min_prec => *op,
                _ => break,
            };
            self.bump();
            let rhs = self.binary(op.precedence() + 1)?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn postfix(&mut self) -> Result<Expr, ParseError> {
        let mut e = self.primary()?;
        while *self.peek() == Tok::Dot {
            self.bump();
            let field = match self.bump() {
                Tok::Ident(s) => s,
                other => {
                    return Err(ParseError::at(
                        self.line(),
                        format!("expected field name, found {}", other.describe()),
                    ))
                }
            };
            e = Expr::Field(Box::new(e), field);
        }
        Ok(e)
    }

    fn call_args(&mut self, n: usize) -> Result<Vec<Expr>, ParseError> {
        self.expect(Tok::LParen)?;
        let mut args = Vec::with_capacity(n);
        for i in 0..n {
            if i > 0 {
                self.expect(Tok::Comma)?;
            }
            args.push(self.expr()?);
        }
        self.expect(Tok::RParen)?;
        Ok(args)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        match self.peek().clone() {
            Tok::Int(i) => {
                self.bump();
                Ok(Expr::Int(i))
            }
            Tok::Str(s) => {
                self.bump();
                Ok(Expr::Str(s))
            }
            Tok::LParen => {
                self.bump();
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Tok::LBrace => {
                self.bump();
                self.expect(Tok::RBrace)?;
                Ok(Expr::EmptyMap)
            }
            Tok::Ident(word) => match word.as_str() {
                "true" => {
                    self.bump();
                    Ok(Expr::Bool(true))
                }
                "false" => {
                    self.bump();
                    Ok(Expr::Bool(false))
                }
                "null" => {
                    self.bump();
                    Ok(Expr::Null)
                }
                "param" | "len" => {
                    self.bump();
                    let mut args = self.call_args(1)?;
                    let a = Box::new(args.remove(0));
                    Ok(if word == "param" { Expr::Param(a) } else { Expr::Len(a) })
                }
                "concat" => {
                    self.bump();
                    let mut args = self.call_args(2)?.into_iter();
                    let (a, b) = (args.next().unwrap(), args.next().unwrap());
                    Ok(Expr::Concat(Box::new(a), Box::new(b)))
                }
                "db" => {
                    self.bump();
                    self.expect(Tok::Dot)?;
                    let line = self.line();
                    match self.bump() {
                        Tok::Ident(m) if m == "get" => {
                            let mut args = self.call_args(1)?;
                            Ok(Expr::DbGet(Box::new(args.remove(0))))
                        }
                        Tok::Ident(m) if m == "put" => {
                            let mut args = self.call_args(2)?.into_iter();
                            let (k, v) = (args.next().unwrap(), args.next().unwrap());
                            Ok(Expr::DbPut(Box::new(k), Box::new(v)))
                        }
                        other => Err(ParseError::at(
                            line,
                            format!("expected `get` or `put` after `db.`, found {}", other.describe()),
                        )),
                    }
                }
                _ if KEYWORDS.contains(&word.as_str()) => Err(self.unexpected("expression")),
                _ => {
                    self.bump();
                    Ok(Expr::Var(word))
                }
            },
            _ => Err(self.unexpected("expression")),
        }
    }
}

/// Parses handler source text into a [`Program`].
pub fn parse_program(source: &str) -> Result<Program, ParseError> {
    let toks = lex(source)?;
    Parser { toks, pos: 0 }.program()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_program() {
        let p = parse_program(r#"handler h { return 200, "ok"; }"#).unwrap();
        assert_eq!(p.handlers.len(), 1);
        let h = p.handler("h").unwrap();
        assert_eq!(h.body.len(), 1);
        assert_eq!(h.body[0].line, 1);
    }

    #[test]
    fn empty_source() {
        assert!(parse_program("").unwrap().handlers.is_empty());
        assert!(parse_program("  // nothing here\n").unwrap().handlers.is_empty());
    }

    #[test]
    fn empty_expression_is_syntax_error_on_line_one() {
        let err = parse_program("handler h { let x = ; }").unwrap_err();
        match err {
            ParseError::Syntax { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn syntax_error_reports_source_line() {
        let src = "handler h {\n  let a = 1;\n  let b = (2;\n}";
        assert!(matches!(
            parse_program(src),
            Err(ParseError::Syntax { line: 3, .. })
        ));
    }

    #[test]
    fn duplicate_handler_rejected() {
        let src = "handler h { return 200, 1; } handler h { return 200, 2; }";
        assert_eq!(
            parse_program(src),
            Err(ParseError::DuplicateHandler("h".into()))
        );
    }

    #[test]
    fn nested_lines_are_preorder() {
        let src = "handler h { let a = 1; if a == 1 { a = 2; a = 3; } return 200, a; }";
        let p = parse_program(src).unwrap();
        let lines: Vec<u32> = p.handler("h").unwrap().statements().iter().map(|s| s.line).collect();
        assert_eq!(lines, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn precedence_and_associativity() {
        let p = parse_program("handler h { let x = 1 - 2 - 3 * 4 == 5; }").unwrap();
        let e = p.handler("h").unwrap().body[0].kind.expr().clone();
        use Expr::*;
        let expected = Binary(
            BinOp::Eq,
            Box::new(Binary(
                BinOp::Sub,
                Box::new(Binary(BinOp::Sub, Box::new(Int(1)), Box::new(Int(2)))),
                Box::new(Binary(BinOp::Mul, Box::new(Int(3)), Box::new(Int(4)))),
            )),
            Box::new(Int(5)),
        );
        assert_eq!(e, expected);
    }

    #[test]
    fn builtins_and_escapes() {
        let src = r#"handler h { let u = db.get(param("id")); db_x = db.put("k", concat("a\"", len("\\"))); }"#;
        let p = parse_program(src).unwrap();
        assert_eq!(p.handler("h").unwrap().body.len(), 2);
    }

    #[test]
    fn bad_status_and_keywords() {
        assert!(parse_program("handler h { return 42, 1; }").is_err());
        assert!(parse_program("handler h { let if = 1; }").is_err());
        assert!(parse_program("handler h { let x = db.drop(1); }").is_err());
        assert!(parse_program("handler h { let x = \"open; }").is_err());
    }
}
