// SPDX-License-Identifier: Apache-2.0

//! Syntax tree for the handler language.

use std::collections::BTreeMap;
use std::fmt;

/// A parsed set of request handlers, keyed by handler name.
///
/// Handlers are kept in name order so rendering is deterministic.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Program {
    pub handlers: BTreeMap<String, Handler>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Handler {
    pub name: String,
    pub body: Vec<Stmt>,
}

/// A statement with its line number inside the handler.
///
/// Lines count statements in pre-order (nested `if` bodies included),
/// starting from 1. `(handler, line)` identifies a statement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stmt {
    pub line: u32,
    pub kind: StmtKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StmtKind {
    Let { name: String, value: Expr },
    Assign { name: String, value: Expr },
    If { cond: Expr, body: Vec<Stmt> },
    Return { status: u16, value: Expr },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Eq,
    Ne,
    Lt,
    Gt,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Gt => ">",
        }
    }

    pub(crate) fn precedence(self) -> u8 {
        match self {
            BinOp::Eq | BinOp::Ne | BinOp::Lt | BinOp::Gt => 1,
            BinOp::Add | BinOp::Sub => 2,
            BinOp::Mul | BinOp::Div => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Int(i64),
    Str(String),
    Bool(bool),
    Null,
    EmptyMap,
    Var(String),
    Field(Box<Expr>, String),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Param(Box<Expr>),
    DbGet(Box<Expr>),
    DbPut(Box<Expr>, Box<Expr>),
    Len(Box<Expr>),
    Concat(Box<Expr>, Box<Expr>),
}

impl Expr {
    /// Direct children in evaluation order.
    pub fn children(&self) -> Vec<&Expr> {
        match self {
            Expr::Int(_)
            | Expr::Str(_)
            | Expr::Bool(_)
            | Expr::Null
            | Expr::EmptyMap
            | Expr::Var(_) => Vec::new(),
            Expr::Field(base, _) => vec![base],
            Expr::Param(e) | Expr::DbGet(e) | Expr::Len(e) => vec![e],
            Expr::Binary(_, l, r) | Expr::DbPut(l, r) | Expr::Concat(l, r) => vec![l, r],
        }
    }

    pub fn children_mut(&mut self) -> Vec<&mut Expr> {
        match self {
            Expr::Int(_)
            | Expr::Str(_)
            | Expr::Bool(_)
            | Expr::Null
            | Expr::EmptyMap
            | Expr::Var(_) => Vec::new(),
            Expr::Field(base, _) => vec![base],
            Expr::Param(e) | Expr::DbGet(e) | Expr::Len(e) => vec![e],
            Expr::Binary(_, l, r) | Expr::DbPut(l, r) | Expr::Concat(l, r) => vec![l, r],
        }
    }

    /// Visits the tree in pre-order, passing each node's pre-order index.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(usize, &'a Expr)) {
        fn go<'a>(e: &'a Expr, next: &mut usize, f: &mut impl FnMut(usize, &'a Expr)) {
            f(*next, e);
            *next += 1;
            for c in e.children() {
                go(c, next, f);
            }
        }
        let mut next = 0;
        go(self, &mut next, f);
    }

    /// The node at `index` in pre-order.
    pub fn node(&self, index: usize) -> Option<&Expr> {
        let mut found = None;
        self.walk(&mut |i, e| {
            if i == index {
                found = Some(e);
            }
        });
        found
    }

    pub fn node_mut(&mut self, index: usize) -> Option<&mut Expr> {
        fn go<'a>(e: &'a mut Expr, target: usize, next: &mut usize) -> Option<&'a mut Expr> {
            if *next == target {
                return Some(e);
            }
            *next += 1;
            for c in e.children_mut() {
                if let Some(hit) = go(c, target, next) {
                    return Some(hit);
                }
            }
            None
        }
        let mut next = 0;
        go(self, index, &mut next)
    }
}

impl StmtKind {
    /// The expression evaluated by this statement itself (an `if` condition,
    /// not its body).
    pub fn expr(&self) -> &Expr {
        match self {
            StmtKind::Let { value, .. }
            | StmtKind::Assign { value, .. }
            | StmtKind::Return { value, .. } => value,
            StmtKind::If { cond, .. } => cond,
        }
    }

    pub fn expr_mut(&mut self) -> &mut Expr {
        match self {
            StmtKind::Let { value, .. }
            | StmtKind::Assign { value, .. }
            | StmtKind::Return { value, .. } => value,
            StmtKind::If { cond, .. } => cond,
        }
    }

    /// Variable bound by this statement, if any.
    pub fn binds(&self) -> Option<&str> {
        match self {
            StmtKind::Let { name, .. } | StmtKind::Assign { name, .. } => Some(name),
            _ => None,
        }
    }
}

impl Handler {
    /// Reassigns pre-order line numbers, starting from 1.
    pub fn renumber(&mut self) {
        fn go(stmts: &mut [Stmt], next: &mut u32) {
            for s in stmts {
                s.line = *next;
                *next += 1;
                if let StmtKind::If { body, .. } = &mut s.kind {
                    go(body, next);
                }
            }
        }
        let mut next = 1;
        go(&mut self.body, &mut next);
    }

    /// All statements in pre-order.
    pub fn statements(&self) -> Vec<&Stmt> {
        fn go<'a>(stmts: &'a [Stmt], out: &mut Vec<&'a Stmt>) {
            for s in stmts {
                out.push(s);
                if let StmtKind::If { body, .. } = &s.kind {
                    go(body, out);
                }
            }
        }
        let mut out = Vec::new();
        go(&self.body, &mut out);
        out
    }

    pub fn statement(&self, line: u32) -> Option<&Stmt> {
        self.statements().into_iter().find(|s| s.line == line)
    }

    /// The statement list holding `line`, and the statement's position in it.
    pub(crate) fn locate_mut(&mut self, line: u32) -> Option<(&mut Vec<Stmt>, usize)> {
        fn go(stmts: &mut Vec<Stmt>, line: u32) -> Option<(&mut Vec<Stmt>, usize)> {
            if let Some(pos) = stmts.iter().position(|s| s.line == line) {
                return Some((stmts, pos));
            }
            // Descend into the last `if` whose line precedes the target.
            let idx = stmts.iter().rposition(|s| s.line < line)?;
            match &mut stmts[idx].kind {
                StmtKind::If { body, .. } => go(body, line),
                _ => None,
            }
        }
        go(&mut self.body, line)
    }

    pub fn line_count(&self) -> u32 {
        self.statements().len() as u32
    }
}

impl Program {
    pub fn handler(&self, name: &str) -> Option<&Handler> {
        self.handlers.get(name)
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&super::render::render_program(self))
    }
}
