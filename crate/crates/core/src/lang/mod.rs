// SPDX-License-Identifier: Apache-2.0

//! The handler language: a tiny request-handling language with nullable
//! lookups and state side effects.
//!
//! ```text
//! handler NAME { stmt* }
//! stmt := let ID = expr; | ID = expr; | if expr { stmt* } | return INT, expr;
//! expr := literal | ID | expr.ID | expr OP expr | param(e) | db.get(e)
//!       | db.put(e, e) | len(e) | concat(e, e)
//! ```

mod ast;
mod interp;
mod parser;
mod render;
mod value;

pub use ast::{BinOp, Expr, Handler, Program, Stmt, StmtKind};
pub use interp::{execute_handler, ExecError, ExecOutcome, Execution, FailurePoint, Fault, FaultKind};
pub use parser::{parse_program, ParseError};
pub use render::{render_expr, render_handler, render_program, render_simple};
pub use value::Value;

/// Renders then parses. Structural identity on valid programs.
pub fn reparse(program: &Program) -> Result<Program, ParseError> {
    parse_program(&render_program(program))
}
