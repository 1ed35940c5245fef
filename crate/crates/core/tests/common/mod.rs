// SPDX-License-Identifier: Apache-2.0

#![allow(dead_code)]

use std::collections::BTreeSet;

use itzal::lang::{parse_program, render_expr, Expr, FailurePoint, Stmt, StmtKind};
use itzal::patch::{enumerate_patches, ReturnEarlyDefaults};

/// Records the id being viewed and reads it back within one statement. A
/// guard placed before the statement sees the previous request's value.
pub const VIEWING_HANDLER: &str = r#"handler users {
  let line = concat(concat(db.put("viewing", param("id")), ": "), db.get(db.get("viewing")).name);
  return 200, line;
}
"#;

/// Handler sources, one statement per line.
pub const FIXTURES: &[&str] = &[
    // 0: the sample
    "handler users {\n  let u = db.get(param(\"id\"));\n  let n = u.name;\n  return 200, n;\n}\n",
    // 1: field access in the return value
    "handler h {\n  let u = db.get(param(\"id\"));\n  return 200, u.name;\n}\n",
    // 2: nested fields
    "handler h {\n  let u = db.get(param(\"id\"));\n  let c = u.address.city;\n  return 200, concat(c, u.zip);\n}\n",
    // 3: field inside an if condition and body
    "handler h {\n  let u = db.get(param(\"id\"));\n  let greeting = \"hi \";\n  if u.admin == true {\n    greeting = concat(greeting, u.title);\n  }\n  return 200, concat(greeting, u.name);\n}\n",
    // 4: several variables in scope
    "handler h {\n  let a = param(\"a\");\n  let b = param(\"b\");\n  let fallback = db.get(\"default\");\n  let u = db.get(a);\n  return 200, concat(u.name, b);\n}\n",
    // 5: assignment rebinds and arithmetic
    "handler h {\n  let n = 0;\n  let o = db.get(param(\"order\"));\n  n = n + o.qty * 2;\n  return 200, n;\n}\n",
    // 6: field on a call result
    "handler h {\n  return 200, db.get(param(\"id\")).name;\n}\n",
    // 7: two handlers
    "handler a {\n  let x = db.get(\"x\");\n  return 200, x.v;\n}\n\nhandler b {\n  let y = db.get(\"y\");\n  let z = y;\n  return 201, len(z.items);\n}\n",
    // 8: writes then reads
    "handler h {\n  let id = param(\"id\");\n  let saved = db.put(concat(\"seen:\", id), true);\n  let u = db.get(id);\n  let e = u.profile.email;\n  return 200, e;\n}\n",
    // 9: nested ifs with bindings inside
    "handler h {\n  let u = db.get(param(\"id\"));\n  if u != null {\n    let t = u.team;\n    if t.lead == u.name {\n      return 200, \"lead\";\n    }\n  }\n  let k = db.get(\"k\");\n  return 200, k.name;\n}\n",
    // 10: field in db.put arguments
    "handler h {\n  let u = db.get(param(\"id\"));\n  let w = db.put(u.key, u.value);\n  return 200, w;\n}\n",
    // 11: the invalidation fixture
    VIEWING_HANDLER,
];

/// A patch reduced to what identifies it: template, site, arguments.
pub type PatchKey = (FailurePoint, String);

fn key(fp: &FailurePoint, kind: &str, args: serde_json::Value) -> PatchKey {
    (fp.clone(), serde_json::json!({ "kind": kind, "args": args }).to_string())
}

/// Every field access in `e`, as (pre-order index, rendered base).
fn field_sites(e: &Expr, next: &mut usize, out: &mut Vec<(usize, String)>) {
    let here = *next;
    *next += 1;
    match e {
        Expr::Int(_) | Expr::Str(_) | Expr::Bool(_) | Expr::Null | Expr::EmptyMap | Expr::Var(_) => {}
        Expr::Field(base, _) => {
            out.push((here, render_expr(base)));
            field_sites(base, next, out);
        }
        Expr::Param(a) | Expr::DbGet(a) | Expr::Len(a) => field_sites(a, next, out),
        Expr::Binary(_, a, b) | Expr::DbPut(a, b) | Expr::Concat(a, b) => {
            field_sites(a, next, out);
            field_sites(b, next, out);
        }
    }
}

fn stmt_expr(s: &Stmt) -> &Expr {
    match &s.kind {
        StmtKind::Let { value, .. } | StmtKind::Assign { value, .. } | StmtKind::Return { value, .. } => value,
        StmtKind::If { cond, .. } => cond,
    }
}

fn flatten<'a>(body: &'a [Stmt], out: &mut Vec<&'a Stmt>) {
    for s in body {
        out.push(s);
        if let StmtKind::If { body, .. } = &s.kind {
            flatten(body, out);
        }
    }
}

/// Names bound on each statement line, read from the source text. Lines
/// are counted per handler; every statement sits on its own line.
type Bindings = Vec<(String, Vec<(u32, Option<String>)>)>;

fn textual_bindings(source: &str) -> Bindings {
    let header = regex::Regex::new(r"^\s*handler\s+([A-Za-z_]\w*)\s*\{").unwrap();
    let binder = regex::Regex::new(r"^\s*(?:let\s+)?([A-Za-z_]\w*)\s*=[^=]").unwrap();
    let stmt = regex::Regex::new(r"^\s*(let\s|if\s|return\s|[A-Za-z_]\w*\s*=[^=])").unwrap();
    let mut out: Bindings = Vec::new();
    for line in source.lines() {
        if let Some(c) = header.captures(line) {
            out.push((c[1].to_string(), Vec::new()));
            continue;
        }
        if stmt.is_match(line) {
            let (_, lines) = out.last_mut().expect("statement outside handler");
            let n = lines.len() as u32 + 1;
            let bound = binder.captures(line).map(|c| c[1].to_string());
            lines.push((n, bound));
        }
    }
    out
}

/// Independent template x site x argument enumeration over every field
/// access in the program.
pub fn brute_force(source: &str, early: &ReturnEarlyDefaults) -> BTreeSet<PatchKey> {
    let program = parse_program(source).expect("fixture parses");
    let bindings = textual_bindings(source);
    let mut out = BTreeSet::new();
    for (name, handler) in &program.handlers {
        let mut stmts = Vec::new();
        flatten(&handler.body, &mut stmts);
        let lines = &bindings.iter().find(|(h, _)| h == name).expect("handler in text").1;
        assert_eq!(lines.len(), stmts.len(), "fixture must have one statement per line");
        for (ordinal, s) in stmts.iter().enumerate() {
            let line = ordinal as u32 + 1;
            let mut sites = Vec::new();
            field_sites(stmt_expr(s), &mut 0, &mut sites);
            for (idx, base) in sites {
                let fp = FailurePoint { handler: name.clone(), line, expr_index: idx, variable: base.clone() };
                out.insert(key(&fp, "SkipStatement", serde_json::json!({ "kind": "none" })));
                for v in ["empty_map", "empty_string", "zero", "false"] {
                    out.insert(key(&fp, "ReplaceWithDefault", serde_json::json!({ "kind": "default", "value": v })));
                }
                let vars: BTreeSet<&String> = lines
                    .iter()
                    .filter(|(l, _)| *l < line)
                    .filter_map(|(_, b)| b.as_ref())
                    .filter(|b| **b != base)
                    .collect();
                for v in vars {
                    out.insert(key(&fp, "ReplaceWithVariable", serde_json::json!({ "kind": "variable", "name": v })));
                }
                out.insert(key(
                    &fp,
                    "ReturnEarly",
                    serde_json::json!({ "kind": "early", "status": early.status, "body": early.body }),
                ));
            }
        }
    }
    out
}

/// The library's enumeration over the same sites, in the same key form.
/// Also returns every site the library was asked about.
pub fn enumerated(source: &str, early: &ReturnEarlyDefaults) -> BTreeSet<PatchKey> {
    let program = parse_program(source).expect("fixture parses");
    let mut out = BTreeSet::new();
    for (name, handler) in &program.handlers {
        let mut stmts = Vec::new();
        flatten(&handler.body, &mut stmts);
        for (ordinal, s) in stmts.iter().enumerate() {
            let mut sites = Vec::new();
            field_sites(stmt_expr(s), &mut 0, &mut sites);
            for (idx, base) in sites {
                let fp = FailurePoint {
                    handler: name.clone(),
                    line: ordinal as u32 + 1,
                    expr_index: idx,
                    variable: base,
                };
                for p in enumerate_patches(&program, &fp, early).expect("field sites resolve") {
                    let args = serde_json::to_value(&p.args).unwrap();
                    let kind = serde_json::to_value(p.kind).unwrap();
                    out.insert(key(&p.site, kind.as_str().unwrap(), args));
                }
            }
        }
    }
    out
}

/// Nearest-rank percentile of `samples` (any order), in the same unit.
pub fn percentile(samples: &[f64], p: f64) -> f64 {
    assert!(!samples.is_empty());
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((p / 100.0) * s.len() as f64).ceil() as usize;
    s[rank.clamp(1, s.len()) - 1]
}
