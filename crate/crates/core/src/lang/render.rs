// SPDX-License-Identifier: Apache-2.0

//! Canonical source rendering. One statement per line, two-space indent.

use std::fmt::Write;

use super::ast::{Expr, Handler, Program, Stmt, StmtKind};

pub fn render_program(program: &Program) -> String {
    let mut out = String::new();
    for (i, handler) in program.handlers.values().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&render_handler(handler));
    }
    out
}

pub fn render_handler(handler: &Handler) -> String {
    let mut out = format!("handler {} {{\n", handler.name);
    render_block(&handler.body, 1, &mut out);
    out.push_str("}\n");
    out
}

fn render_block(stmts: &[Stmt], depth: usize, out: &mut String) {
    for s in stmts {
        out.push_str(&"  ".repeat(depth));
        match &s.kind {
            StmtKind::If { cond, body } => {
                let _ = writeln!(out, "if {} {{", render_expr(cond));
                render_block(body, depth + 1, out);
                out.push_str(&"  ".repeat(depth));
                out.push_str("}\n");
            }
            other => {
                out.push_str(&render_simple(other));
                out.push('\n');
            }
        }
    }
}

/// Renders a non-block statement on one line.
pub fn render_simple(kind: &StmtKind) -> String {
    match kind {
        StmtKind::Let { name, value } => format!("let {name} = {};", render_expr(value)),
        StmtKind::Assign { name, value } => format!("{name} = {};", render_expr(value)),
        StmtKind::Return { status, value } => format!("return {status}, {};", render_expr(value)),
        StmtKind::If { cond, .. } => format!("if {} {{ ... }}", render_expr(cond)),
    }
}

pub fn render_expr(e: &Expr) -> String {
    let mut out = String::new();
    write_expr(e, 0, &mut out);
    out
}

fn write_str_literal(s: &str, out: &mut String) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c => out.push(c),
        }
    }
    out.push('"');
}

fn write_expr(e: &Expr, min_prec: u8, out: &mut String) {
    match e {
        Expr::Int(i) => {
            let _ = write!(out, "{i}");
        }
        Expr::Str(s) => write_str_literal(s, out),
        Expr::Bool(b) => {
            let _ = write!(out, "{b}");
        }
        Expr::Null => out.push_str("null"),
        Expr::EmptyMap => out.push_str("{}"),
        Expr::Var(v) => out.push_str(v),
        Expr::Field(base, field) => {
            let bare = matches!(
                **base,
                Expr::Var(_)
                    | Expr::Field(..)
                    | Expr::Param(_)
                    | Expr::DbGet(_)
                    | Expr::DbPut(..)
                    | Expr::Len(_)
                    | Expr::Concat(..)
            );
            if bare {
                write_expr(base, 0, out);
            } else {
                out.push('(');
                write_expr(base, 0, out);
                out.push(')');
            }
            out.push('.');
            out.push_str(field);
        }
        Expr::Binary(op, l, r) => {
            let prec = op.precedence();
            let wrap = prec < min_prec;
            if wrap {
                out.push('(');
            }
            write_expr(l, prec, out);
            let _ = write!(out, " {} ", op.symbol());
            write_expr(r, prec + 1, out);
            if wrap {
                out.push(')');
            }
        }
        Expr::Param(a) => call("param", &[a], out),
        Expr::DbGet(a) => call("db.get", &[a], out),
        Expr::DbPut(a, b) => call("db.put", &[a, b], out),
        Expr::Len(a) => call("len", &[a], out),
        Expr::Concat(a, b) => call("concat", &[a, b], out),
    }
}

fn call(name: &str, args: &[&Expr], out: &mut String) {
    out.push_str(name);
    out.push('(');
    for (i, a) in args.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        write_expr(a, 0, out);
    }
    out.push(')');
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::parse_program;

    const SAMPLE: &str = r#"handler users {
  let u = db.get(param("id"));
  let n = u.name;
  return 200, n;
}
"#;

    #[test]
    fn canonical_sample_renders_verbatim() {
        let p = parse_program(SAMPLE).unwrap();
        assert_eq!(render_program(&p), SAMPLE);
    }

    #[test]
    fn round_trip_single_statement() {
        let p = parse_program(r#"handler h { return 200, "ok"; }"#).unwrap();
        assert_eq!(parse_program(&render_program(&p)).unwrap(), p);
    }

    #[test]
    fn handlers_render_in_name_order() {
        let p = parse_program("handler zeta { return 200, 1; } handler alpha { return 200, 2; }")
            .unwrap();
        let text = render_program(&p);
        let a = text.find("handler alpha").unwrap();
        let z = text.find("handler zeta").unwrap();
        assert!(a < z);
        assert_eq!(parse_program(&text).unwrap(), p);
    }

    #[test]
    fn parens_where_needed() {
        let p = parse_program("handler h { let x = (1 - (2 - 3)) * 4; let y = ({}).k; let z = \"a\\\"b\"; }").unwrap();
        let text = render_program(&p);
        assert!(text.contains("let x = (1 - (2 - 3)) * 4;"), "{text}");
        assert!(text.contains("let y = ({}).k;"), "{text}");
        assert!(text.contains(r#"let z = "a\"b";"#), "{text}");
        assert_eq!(parse_program(&text).unwrap(), p);
    }
}
