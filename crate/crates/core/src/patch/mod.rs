// SPDX-License-Identifier: Apache-2.0

//! Null-dereference patch templates.
//!
//! Four template families are applied at a failure point:
//!
//! * `SkipStatement` guards the failing statement with `if <e> != null`.
//! * `ReplaceWithDefault` substitutes a default literal for the null
//!   expression at the failing occurrence only.
//! * `ReplaceWithVariable` substitutes a local variable bound on an
//!   earlier line.
//! * `ReturnEarly` inserts `if <e> == null { return S, B; }` before the
//!   failing statement.

mod search;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lang::{
    render_expr, render_handler, BinOp, Expr, FailurePoint, Handler, Program, Stmt, StmtKind,
};
use crate::message::Request;
use crate::oracle::{FailureContext, FailureKind};

pub use search::{program_fingerprint, Budget, CandidateSink, PatchEngine, SearchReport, SearchStats};
pub(crate) use search::now_ms;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PatchError {
    #[error("failure point {0} does not resolve in the program")]
    UnresolvableSite(String),
    #[error("patch search only handles null dereferences, got {0:?}")]
    NotNullDereference(FailureKind),
    #[error("failure context carries no failure point")]
    MissingFailurePoint,
    #[error("no sandbox available: {0}")]
    SandboxUnavailable(String),
    #[error("production snapshot for state version {0} is no longer available")]
    SnapshotUnavailable(u64),
    #[error("envelope is not addressed to the patch service")]
    WrongEnvelope,
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub enum TemplateKind {
    SkipStatement,
    ReplaceWithDefault,
    ReplaceWithVariable,
    ReturnEarly,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 4] = [
        TemplateKind::SkipStatement,
        TemplateKind::ReplaceWithDefault,
        TemplateKind::ReplaceWithVariable,
        TemplateKind::ReturnEarly,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefaultValue {
    EmptyMap,
    EmptyString,
    Zero,
    False,
}

impl DefaultValue {
    pub const ALL: [DefaultValue; 4] = [
        DefaultValue::EmptyMap,
        DefaultValue::EmptyString,
        DefaultValue::Zero,
        DefaultValue::False,
    ];

    pub fn expr(self) -> Expr {
        match self {
            DefaultValue::EmptyMap => Expr::EmptyMap,
            DefaultValue::EmptyString => Expr::Str(String::new()),
            DefaultValue::Zero => Expr::Int(0),
            DefaultValue::False => Expr::Bool(false),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TemplateArgs {
    None,
    Default { value: DefaultValue },
    Variable { name: String },
    Early { status: u16, body: String },
}

impl TemplateArgs {
    /// Source text of the argument; orders patches within a template kind.
    pub fn sort_key(&self) -> String {
        match self {
            TemplateArgs::None => String::new(),
            TemplateArgs::Default { value } => render_expr(&value.expr()),
            TemplateArgs::Variable { name } => name.clone(),
            TemplateArgs::Early { status, body } => {
                format!("{status}, {}", render_expr(&Expr::Str(body.clone())))
            }
        }
    }
}

/// Status and body used by `ReturnEarly`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReturnEarlyDefaults {
    pub status: u16,
    pub body: String,
}

impl Default for ReturnEarlyDefaults {
    fn default() -> Self {
        ReturnEarlyDefaults {
            status: 200,
            body: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PatchId(pub String);

impl fmt::Display for PatchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub id: PatchId,
    pub kind: TemplateKind,
    pub site: FailurePoint,
    pub args: TemplateArgs,
    pub diff: String,
}

impl Patch {
    /// Builds a patch, computing its id and diff against `program`.
    pub fn new(
        program: &Program,
        kind: TemplateKind,
        site: FailurePoint,
        args: TemplateArgs,
    ) -> Result<Patch, PatchError> {
        let id = patch_id(kind, &site, &args);
        let mut patch = Patch {
            id,
            kind,
            site,
            args,
            diff: String::new(),
        };
        let before = program
            .handler(&patch.site.handler)
            .ok_or_else(|| unresolvable(&patch.site))?;
        let after = apply_patch(program, &patch)?;
        patch.diff = handler_diff(before, after.program.handler(&patch.site.handler).unwrap());
        Ok(patch)
    }

    /// Lines the diff adds, without the `+` marker.
    pub fn added_lines(&self) -> Vec<&str> {
        self.diff
            .lines()
            .filter(|l| l.starts_with('+') && !l.starts_with("+++"))
            .map(|l| &l[1..])
            .collect()
    }
}

pub fn patch_id(kind: TemplateKind, site: &FailurePoint, args: &TemplateArgs) -> PatchId {
    let mut h = Sha256::new();
    let canonical = serde_json::to_string(&(kind, site, args)).expect("plain data serializes");
    h.update(canonical.as_bytes());
    let digest = h.finalize();
    PatchId(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

/// A program with one patch applied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchedProgram {
    pub program: Program,
    pub handler: String,
    /// Line of the edited or inserted statement in the patched handler.
    pub patched_line: u32,
}

fn unresolvable(fp: &FailurePoint) -> PatchError {
    PatchError::UnresolvableSite(format!(
        "{}:{}#{} `{}`",
        fp.handler, fp.line, fp.expr_index, fp.variable
    ))
}

/// The null base expression at the failure point, if the site still holds
/// a field access on that expression.
pub fn resolve_site<'a>(program: &'a Program, fp: &FailurePoint) -> Result<(&'a Handler, &'a Expr), PatchError> {
    let handler = program.handler(&fp.handler).ok_or_else(|| unresolvable(fp))?;
    let stmt = handler.statement(fp.line).ok_or_else(|| unresolvable(fp))?;
    match stmt.kind.expr().node(fp.expr_index) {
        Some(Expr::Field(base, _)) if render_expr(base) == fp.variable => Ok((handler, base)),
        _ => Err(unresolvable(fp)),
    }
}

/// Variables bound on lines before the failure point, sorted, without the
/// failing variable.
pub fn variables_before(handler: &Handler, fp: &FailurePoint) -> Vec<String> {
    let mut vars: BTreeSet<String> = handler
        .statements()
        .into_iter()
        .filter(|s| s.line < fp.line)
        .filter_map(|s| s.kind.binds().map(str::to_string))
        .collect();
    vars.remove(&fp.variable);
    vars.into_iter().collect()
}

/// All patches for `fp`, ordered by template kind then argument text.
pub fn enumerate_patches(
    program: &Program,
    fp: &FailurePoint,
    early: &ReturnEarlyDefaults,
) -> Result<Vec<Patch>, PatchError> {
    let (handler, _) = resolve_site(program, fp)?;
    let mut args: Vec<(TemplateKind, TemplateArgs)> = Vec::new();
    args.push((TemplateKind::SkipStatement, TemplateArgs::None));
    for value in DefaultValue::ALL {
        args.push((TemplateKind::ReplaceWithDefault, TemplateArgs::Default { value }));
    }
    for name in variables_before(handler, fp) {
        args.push((TemplateKind::ReplaceWithVariable, TemplateArgs::Variable { name }));
    }
    args.push((
        TemplateKind::ReturnEarly,
        TemplateArgs::Early {
            status: early.status,
            body: early.body.clone(),
        },
    ));
    args.sort_by_cached_key(|(kind, a)| (*kind, a.sort_key()));
    args.into_iter()
        .map(|(kind, a)| Patch::new(program, kind, fp.clone(), a))
        .collect()
}

/// Rejects failures other than null dereferences before enumerating.
pub fn enumerate_for_failure(
    program: &Program,
    context: &FailureContext,
    early: &ReturnEarlyDefaults,
) -> Result<Vec<Patch>, PatchError> {
    if context.kind != FailureKind::NullDereference {
        return Err(PatchError::NotNullDereference(context.kind));
    }
    let fp = context.point.as_ref().ok_or(PatchError::MissingFailurePoint)?;
    enumerate_patches(program, fp, early)
}

/// Applies `patch`, returning a new program. `program` is not modified.
pub fn apply_patch(program: &Program, patch: &Patch) -> Result<PatchedProgram, PatchError> {
    let fp = &patch.site;
    let (_, base) = resolve_site(program, fp)?;
    let base = base.clone();
    let mut out = program.clone();
    let handler = out.handlers.get_mut(&fp.handler).expect("resolved above");
    let (block, pos) = handler.locate_mut(fp.line).ok_or_else(|| unresolvable(fp))?;
    let guard = |op: BinOp| Expr::Binary(op, Box::new(base.clone()), Box::new(Expr::Null));
    match &patch.args {
        TemplateArgs::None if patch.kind == TemplateKind::SkipStatement => {
            let original = block.remove(pos);
            block.insert(
                pos,
                Stmt {
                    line: 0,
                    kind: StmtKind::If {
                        cond: guard(BinOp::Ne),
                        body: vec![original],
                    },
                },
            );
        }
        TemplateArgs::Default { value } if patch.kind == TemplateKind::ReplaceWithDefault => {
            substitute_base(&mut block[pos], fp.expr_index, value.expr());
        }
        TemplateArgs::Variable { name } if patch.kind == TemplateKind::ReplaceWithVariable => {
            substitute_base(&mut block[pos], fp.expr_index, Expr::Var(name.clone()));
        }
        TemplateArgs::Early { status, body } if patch.kind == TemplateKind::ReturnEarly => {
            block.insert(
                pos,
                Stmt {
                    line: 0,
                    kind: StmtKind::If {
                        cond: guard(BinOp::Eq),
                        body: vec![Stmt {
                            line: 0,
                            kind: StmtKind::Return {
                                status: *status,
                                value: Expr::Str(body.clone()),
                            },
                        }],
                    },
                },
            );
        }
        _ => return Err(unresolvable(fp)),
    }
    handler.renumber();
    Ok(PatchedProgram {
        program: out,
        handler: fp.handler.clone(),
        patched_line: fp.line,
    })
}

fn substitute_base(stmt: &mut Stmt, field_index: usize, replacement: Expr) {
    match stmt.kind.expr_mut().node_mut(field_index) {
        Some(Expr::Field(base, _)) => **base = replacement,
        _ => unreachable!("site resolved before substitution"),
    }
}

/// Line diff of one handler, trimmed to the changed region.
pub fn handler_diff(before: &Handler, after: &Handler) -> String {
    let a_text = render_handler(before);
    let b_text = render_handler(after);
    let a: Vec<&str> = a_text.lines().collect();
    let b: Vec<&str> = b_text.lines().collect();
    let prefix = a.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let max_suffix = a.len().min(b.len()) - prefix;
    let suffix = a
        .iter()
        .rev()
        .zip(b.iter().rev())
        .take(max_suffix)
        .take_while(|(x, y)| x == y)
        .count();
    let removed = &a[prefix..a.len() - suffix];
    let added = &b[prefix..b.len() - suffix];
    // An empty range starts at the line before it, as in unified diffs.
    let start = |n: usize| if n == 0 { prefix } else { prefix + 1 };
    let mut out = format!(
        "--- a/{name}\n+++ b/{name}\n@@ -{},{} +{},{} @@\n",
        start(removed.len()),
        removed.len(),
        start(added.len()),
        added.len(),
        name = before.name
    );
    for l in removed {
        out.push('-');
        out.push_str(l);
        out.push('\n');
    }
    for l in added {
        out.push('+');
        out.push_str(l);
        out.push('\n');
    }
    out
}

/// A patch that made its triggering request pass the oracle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePatch {
    pub patch: Patch,
    pub request_id: String,
    /// Milliseconds since the Unix epoch.
    pub created_at_ms: u64,
    pub fixes: u32,
    pub triggering_request: Request,
    pub state_version: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::{parse_program, render_program};
    use crate::sample;

    fn site(line: u32, variable: &str) -> FailurePoint {
        FailurePoint {
            handler: "users".into(),
            line,
            expr_index: 0,
            variable: variable.into(),
        }
    }

    #[test]
    fn sample_enumerates_six() {
        let p = sample::program();
        let patches = enumerate_patches(&p, &site(2, "u"), &ReturnEarlyDefaults::default()).unwrap();
        let kinds: Vec<TemplateKind> = patches.iter().map(|p| p.kind).collect();
        use TemplateKind::*;
        assert_eq!(
            kinds,
            vec![SkipStatement, ReplaceWithDefault, ReplaceWithDefault, ReplaceWithDefault, ReplaceWithDefault, ReturnEarly]
        );
        let defaults: Vec<String> = patches[1..5].iter().map(|p| p.args.sort_key()).collect();
        assert_eq!(defaults, vec!["\"\"", "0", "false", "{}"]);
    }

    #[test]
    fn skip_wraps_failing_line() {
        let p = sample::program();
        let patch = Patch::new(&p, TemplateKind::SkipStatement, site(2, "u"), TemplateArgs::None).unwrap();
        let out = apply_patch(&p, &patch).unwrap();
        let text = render_program(&out.program);
        assert!(text.contains("  if u != null {\n    let n = u.name;\n  }\n"), "{text}");
        for added in patch.added_lines() {
            assert!(text.contains(added));
        }
        assert_eq!(p, sample::program(), "original untouched");
    }

    #[test]
    fn reapplying_is_unresolvable() {
        let p = sample::program();
        for patch in enumerate_patches(&p, &site(2, "u"), &ReturnEarlyDefaults::default()).unwrap() {
            let once = apply_patch(&p, &patch).unwrap();
            assert!(
                matches!(apply_patch(&once.program, &patch), Err(PatchError::UnresolvableSite(_))),
                "{:?} applied twice",
                patch.kind
            );
        }
    }

    #[test]
    fn default_substitutes_only_failing_occurrence() {
        let p = parse_program("handler users { let u = db.get(param(\"id\")); let n = concat(u.name, u.nick); }").unwrap();
        // Index 0 is the `concat` call, not a field access.
        let wrong = Patch::new(&p, TemplateKind::ReplaceWithDefault, site(2, "u"), TemplateArgs::Default { value: DefaultValue::EmptyMap });
        assert!(matches!(wrong, Err(PatchError::UnresolvableSite(_))));
        let fp = FailurePoint { expr_index: 1, ..site(2, "u") };
        let patch = Patch::new(&p, TemplateKind::ReplaceWithDefault, fp, TemplateArgs::Default { value: DefaultValue::EmptyMap }).unwrap();
        let text = render_program(&apply_patch(&p, &patch).unwrap().program);
        assert!(text.contains("let n = concat(({}).name, u.nick);"), "{text}");
    }

    #[test]
    fn replace_with_default_map_renders() {
        let p = sample::program();
        let patch = Patch::new(&p, TemplateKind::ReplaceWithDefault, site(2, "u"), TemplateArgs::Default { value: DefaultValue::EmptyMap }).unwrap();
        let text = render_program(&apply_patch(&p, &patch).unwrap().program);
        assert!(text.contains("let n = ({}).name;"), "{text}");
    }

    #[test]
    fn two_prior_variables() {
        let src = r#"handler users {
  let a = 1;
  let b = "x";
  let u = db.get(param("id"));
  let n = u.name;
  return 200, n;
}"#;
        let p = parse_program(src).unwrap();
        let patches = enumerate_patches(&p, &site(4, "u"), &ReturnEarlyDefaults::default()).unwrap();
        let vars: Vec<&TemplateArgs> = patches.iter().filter(|p| p.kind == TemplateKind::ReplaceWithVariable).map(|p| &p.args).collect();
        assert_eq!(
            vars,
            vec![&TemplateArgs::Variable { name: "a".into() }, &TemplateArgs::Variable { name: "b".into() }]
        );
    }

    #[test]
    fn type_fault_is_not_enumerated() {
        let ctx = FailureContext {
            request_id: "r".into(),
            kind: FailureKind::TypeFault,
            point: None,
            state_version: 0,
            status: 500,
            message: String::new(),
        };
        assert_eq!(
            enumerate_for_failure(&sample::program(), &ctx, &ReturnEarlyDefaults::default()),
            Err(PatchError::NotNullDereference(FailureKind::TypeFault))
        );
    }

    #[test]
    fn stale_site_is_unresolvable() {
        let p = sample::program();
        assert!(matches!(enumerate_patches(&p, &site(3, "u"), &ReturnEarlyDefaults::default()), Err(PatchError::UnresolvableSite(_))));
        assert!(matches!(enumerate_patches(&p, &site(2, "v"), &ReturnEarlyDefaults::default()), Err(PatchError::UnresolvableSite(_))));
        assert!(matches!(enumerate_patches(&p, &site(9, "u"), &ReturnEarlyDefaults::default()), Err(PatchError::UnresolvableSite(_))));
    }

    #[test]
    fn ids_are_deterministic_and_distinct() {
        let p = sample::program();
        let a = enumerate_patches(&p, &site(2, "u"), &ReturnEarlyDefaults::default()).unwrap();
        let b = enumerate_patches(&p, &site(2, "u"), &ReturnEarlyDefaults::default()).unwrap();
        assert_eq!(a, b);
        let ids: BTreeSet<&PatchId> = a.iter().map(|p| &p.id).collect();
        assert_eq!(ids.len(), a.len());
    }

    #[test]
    fn nested_site_return_early() {
        let src = r#"handler users {
  let u = db.get(param("id"));
  if param("full") == "1" {
    let n = u.name;
    return 200, n;
  }
  return 200, "short";
}"#;
        let p = parse_program(src).unwrap();
        let patch = Patch::new(&p, TemplateKind::ReturnEarly, site(3, "u"), TemplateArgs::Early { status: 200, body: String::new() }).unwrap();
        let out = apply_patch(&p, &patch).unwrap();
        let text = render_program(&out.program);
        assert!(text.contains("    if u == null {\n      return 200, \"\";\n    }\n    let n = u.name;"), "{text}");
        assert_eq!(out.patched_line, 3);
        assert_eq!(crate::lang::reparse(&out.program).unwrap(), out.program);
    }
}
