// SPDX-License-Identifier: Apache-2.0

//! Deterministic tree-walking evaluator for handlers.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ast::{BinOp, Expr, Program, Stmt, StmtKind};
use super::render::render_expr;
use super::value::Value;
use crate::message::{Request, Response};
use crate::state::KvState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FaultKind {
    NullDereference,
    TypeFault,
    Arithmetic,
}

/// Where a null dereference happened.
///
/// `expr_index` is the pre-order index, within the statement's own
/// expression, of the field access whose base evaluated to Null.
/// `variable` is the rendered source of that base expression.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FailurePoint {
    pub handler: String,
    pub line: u32,
    pub expr_index: usize,
    pub variable: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fault {
    pub kind: FaultKind,
    pub handler: String,
    pub line: u32,
    pub message: String,
    /// Present for `NullDereference`.
    pub point: Option<FailurePoint>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ExecOutcome {
    Completed { response: Response },
    Faulted { fault: Fault },
}

impl ExecOutcome {
    pub fn is_faulted(&self) -> bool {
        matches!(self, ExecOutcome::Faulted { .. })
    }

    pub fn fault(&self) -> Option<&Fault> {
        match self {
            ExecOutcome::Faulted { fault } => Some(fault),
            ExecOutcome::Completed { .. } => None,
        }
    }
}

/// Outcome plus the statement lines that began executing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Execution {
    pub outcome: ExecOutcome,
    pub executed_lines: BTreeSet<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecError {
    #[error("unknown handler `{0}`")]
    UnknownHandler(String),
}

struct FaultAt {
    kind: FaultKind,
    message: String,
    null_at: Option<(usize, String)>,
}

impl FaultAt {
    fn type_fault(message: String) -> Self {
        FaultAt {
            kind: FaultKind::TypeFault,
            message,
            null_at: None,
        }
    }

    fn arithmetic(message: &str) -> Self {
        FaultAt {
            kind: FaultKind::Arithmetic,
            message: message.to_string(),
            null_at: None,
        }
    }
}

enum Flow {
    Next,
    Return(u16, Value),
}

struct Frame<'a> {
    request: &'a Request,
    state: &'a mut KvState,
    env: HashMap<String, Value>,
    executed: BTreeSet<u32>,
}

fn size(e: &Expr) -> usize {
    1 + e.children().into_iter().map(size).sum::<usize>()
}

impl Frame<'_> {
    fn run_block(&mut self, stmts: &[Stmt]) -> Result<Flow, (u32, FaultAt)> {
        for stmt in stmts {
            self.executed.insert(stmt.line);
            let fail = |f| (stmt.line, f);
            match &stmt.kind {
                StmtKind::Let { name, value } | StmtKind::Assign { name, value } => {
                    let v = self.eval(value, 0).map_err(fail)?;
                    self.env.insert(name.clone(), v);
                }
                StmtKind::If { cond, body } => match self.eval(cond, 0).map_err(fail)? {
                    Value::Bool(true) => {
                        if let Flow::Return(s, v) = self.run_block(body)? {
                            return Ok(Flow::Return(s, v));
                        }
                    }
                    Value::Bool(false) => {}
                    other => {
                        return Err(fail(FaultAt::type_fault(format!(
                            "if condition must be bool, got {}",
                            other.type_name()
                        ))))
                    }
                },
                StmtKind::Return { status, value } => {
                    let v = self.eval(value, 0).map_err(fail)?;
                    return Ok(Flow::Return(*status, v));
                }
            }
        }
        Ok(Flow::Next)
    }

    /// `index` is the pre-order index of `e` within its statement.
    fn eval(&mut self, e: &Expr, index: usize) -> Result<Value, FaultAt> {
        Ok(match e {
            Expr::Int(i) => Value::Int(*i),
            Expr::Str(s) => Value::Str(s.clone()),
            Expr::Bool(b) => Value::Bool(*b),
            Expr::Null => Value::Null,
            Expr::EmptyMap => Value::Map(BTreeMap::new()),
            // Unbound variables read as Null.
            Expr::Var(v) => self.env.get(v).cloned().unwrap_or(Value::Null),
            Expr::Field(base, field) => match self.eval(base, index + 1)? {
                Value::Map(m) => m.get(field).cloned().unwrap_or(Value::Null),
                Value::Null => {
                    return Err(FaultAt {
                        kind: FaultKind::NullDereference,
                        message: format!("null dereference of `{}`", render_expr(base)),
                        null_at: Some((index, render_expr(base))),
                    })
                }
                other => {
                    return Err(FaultAt::type_fault(format!(
                        "field access `.{field}` on {}",
                        other.type_name()
                    )))
                }
            },
            Expr::Binary(op, l, r) => {
                let lv = self.eval(l, index + 1)?;
                let rv = self.eval(r, index + 1 + size(l))?;
                binary(*op, lv, rv)?
            }
            Expr::Param(k) => match self.eval(k, index + 1)? {
                Value::Null => Value::Null,
                key => self
                    .request
                    .param(&key.render())
                    .map(|v| Value::Str(v.to_string()))
                    .unwrap_or(Value::Null),
            },
            Expr::DbGet(k) => match self.eval(k, index + 1)? {
                Value::Null => Value::Null,
                key => self.state.get(&key.render()).cloned().unwrap_or(Value::Null),
            },
            Expr::DbPut(k, v) => {
                let key = self.eval(k, index + 1)?;
                let value = self.eval(v, index + 1 + size(k))?;
                if key.is_null() {
                    return Err(FaultAt::type_fault("db.put with null key".into()));
                }
                self.state.put(key.render(), value.clone());
                value
            }
            Expr::Len(a) => match self.eval(a, index + 1)? {
                Value::Str(s) => Value::Int(s.chars().count() as i64),
                Value::Map(m) => Value::Int(m.len() as i64),
                other => {
                    return Err(FaultAt::type_fault(format!("len of {}", other.type_name())))
                }
            },
            Expr::Concat(a, b) => {
                let av = self.eval(a, index + 1)?;
                let bv = self.eval(b, index + 1 + size(a))?;
                Value::Str(av.render() + &bv.render())
            }
        })
    }
}

fn binary(op: BinOp, l: Value, r: Value) -> Result<Value, FaultAt> {
    use Value::*;
    Ok(match (op, l, r) {
        (BinOp::Eq, l, r) => Bool(l == r),
        (BinOp::Ne, l, r) => Bool(l != r),
        (BinOp::Lt, Int(a), Int(b)) => Bool(a < b),
        (BinOp::Gt, Int(a), Int(b)) => Bool(a > b),
        (BinOp::Lt, Str(a), Str(b)) => Bool(a < b),
        (BinOp::Gt, Str(a), Str(b)) => Bool(a > b),
        (BinOp::Add, Int(a), Int(b)) => {
            Int(a.checked_add(b).ok_or_else(|| FaultAt::arithmetic("integer overflow"))?)
        }
        (BinOp::Sub, Int(a), Int(b)) => {
            Int(a.checked_sub(b).ok_or_else(|| FaultAt::arithmetic("integer overflow"))?)
        }
        (BinOp::Mul, Int(a), Int(b)) => {
            Int(a.checked_mul(b).ok_or_else(|| FaultAt::arithmetic("integer overflow"))?)
        }
        (BinOp::Div, Int(_), Int(0)) => return Err(FaultAt::arithmetic("division by zero")),
        (BinOp::Div, Int(a), Int(b)) => {
            Int(a.checked_div(b).ok_or_else(|| FaultAt::arithmetic("integer overflow"))?)
        }
        (op, l, r) => {
            return Err(FaultAt::type_fault(format!(
                "operator `{}` on {} and {}",
                op.symbol(),
                l.type_name(),
                r.type_name()
            )))
        }
    })
}

/// Runs handler `name` against `request`, mutating `state`.
pub fn execute_handler(
    program: &Program,
    name: &str,
    request: &Request,
    state: &mut KvState,
) -> Result<Execution, ExecError> {
    let handler = program
        .handler(name)
        .ok_or_else(|| ExecError::UnknownHandler(name.to_string()))?;
    let mut frame = Frame {
        request,
        state,
        env: HashMap::new(),
        executed: BTreeSet::new(),
    };
    let outcome = match frame.run_block(&handler.body) {
        Ok(Flow::Next) => ExecOutcome::Completed {
            response: Response::text(200, ""),
        },
        Ok(Flow::Return(status, value)) => ExecOutcome::Completed {
            response: Response::text(status, &value.render()),
        },
        Err((line, f)) => ExecOutcome::Faulted {
            fault: Fault {
                kind: f.kind,
                handler: name.to_string(),
                line,
                message: f.message,
                point: f.null_at.map(|(expr_index, variable)| FailurePoint {
                    handler: name.to_string(),
                    line,
                    expr_index,
                    variable,
                }),
            },
        },
    };
    Ok(Execution {
        outcome,
        executed_lines: frame.executed,
    })
}
