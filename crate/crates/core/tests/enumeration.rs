// SPDX-License-Identifier: Apache-2.0

mod common;

use itzal::lang::{execute_handler, parse_program, render_program, ExecOutcome, FailurePoint};
use itzal::message::Request;
use itzal::patch::{apply_patch, enumerate_patches, ReturnEarlyDefaults, TemplateArgs, TemplateKind};
use itzal::sample;

macro_rules! fixture_matches_brute_force {
    ($($name:ident => $i:expr),* $(,)?) => {$(
        #[test]
        fn $name() {
            for early in [ReturnEarlyDefaults::default(), ReturnEarlyDefaults { status: 404, body: "gone".into() }] {
                let src = common::FIXTURES[$i];
                let expected = common::brute_force(src, &early);
                assert!(!expected.is_empty());
                assert_eq!(common::enumerated(src, &early), expected);
            }
        }
    )*};
}

fixture_matches_brute_force! {
    sample_handler => 0,
    field_in_return => 1,
    nested_fields => 2,
    field_in_if => 3,
    many_variables => 4,
    rebinding_and_arithmetic => 5,
    field_on_call_result => 6,
    two_handlers => 7,
    writes_then_reads => 8,
    nested_ifs => 9,
    field_in_put_arguments => 10,
    viewing => 11,
}

fn sample_site() -> FailurePoint {
    FailurePoint { handler: "users".into(), line: 2, expr_index: 0, variable: "u".into() }
}

#[test]
fn order_is_kind_then_argument() {
    let p = sample::program();
    let patches = enumerate_patches(&p, &sample_site(), &ReturnEarlyDefaults::default()).unwrap();
    let keys: Vec<_> = patches.iter().map(|p| (p.kind, p.args.sort_key())).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    assert_eq!(patches.first().unwrap().kind, TemplateKind::SkipStatement);
    assert_eq!(patches.last().unwrap().kind, TemplateKind::ReturnEarly);
}

#[test]
fn enumeration_does_not_touch_the_program() {
    let p = sample::program();
    let before = render_program(&p);
    for patch in enumerate_patches(&p, &sample_site(), &ReturnEarlyDefaults::default()).unwrap() {
        apply_patch(&p, &patch).unwrap();
    }
    assert_eq!(render_program(&p), before);
}

fn run(program: &itzal::lang::Program, id: &str) -> ExecOutcome {
    let mut state = sample::seed_state();
    let req = Request::get("/users").with_query("id", id);
    execute_handler(program, "users", &req, &mut state).unwrap().outcome
}

#[test]
fn applied_templates_render_as_expected() {
    let p = sample::program();
    let early = ReturnEarlyDefaults { status: 404, body: "no user".into() };
    for patch in enumerate_patches(&p, &sample_site(), &early).unwrap() {
        let patched = apply_patch(&p, &patch).unwrap();
        let text = render_program(&patched.program);
        assert_eq!(parse_program(&text).unwrap(), patched.program);
        match (&patch.kind, &patch.args) {
            (TemplateKind::SkipStatement, _) => {
                assert!(text.contains("if u != null {"), "{text}");
                assert!(text.contains("let n = u.name;"), "{text}");
            }
            (TemplateKind::ReplaceWithDefault, TemplateArgs::Default { .. }) => {
                assert!(!text.contains("u.name"), "{text}");
            }
            (TemplateKind::ReturnEarly, _) => {
                assert!(text.contains("if u == null {"), "{text}");
                assert!(text.contains("return 404, \"no user\";"), "{text}");
                match run(&patched.program, "ghost-1") {
                    ExecOutcome::Completed { response } => {
                        assert_eq!(response.status, 404);
                        assert_eq!(response.body, b"no user");
                    }
                    other => panic!("{other:?}"),
                }
            }
            other => panic!("unexpected template {other:?}"),
        }
        assert!(!patch.added_lines().is_empty(), "{}", patch.diff);
    }
}

#[test]
fn every_sample_patch_survives_the_ghost_request() {
    let p = sample::program();
    let ExecOutcome::Faulted { fault } = run(&p, "ghost-3") else {
        panic!("sample must fault on an unknown id");
    };
    let fp = fault.point.expect("null dereference has a point");
    assert_eq!(fp, sample_site());
    for patch in enumerate_patches(&p, &fp, &ReturnEarlyDefaults::default()).unwrap() {
        let patched = apply_patch(&p, &patch).unwrap();
        let outcome = run(&patched.program, "ghost-3");
        let faulted = matches!(outcome, ExecOutcome::Faulted { .. });
        // `{}.name` is null, not a fault; defaults of other types fault.
        let expect_fault = matches!(
            patch.args,
            TemplateArgs::Default { value } if value != itzal::patch::DefaultValue::EmptyMap
        );
        assert_eq!(faulted, expect_fault, "{:?} {:?} -> {outcome:?}", patch.kind, patch.args);
    }
}

#[test]
fn variables_exclude_the_base_and_later_bindings() {
    let src = "handler h {\n  let a = 1;\n  let u = db.get(\"k\");\n  let n = u.name;\n  let z = 2;\n  return 200, n;\n}\n";
    let p = parse_program(src).unwrap();
    let fp = FailurePoint { handler: "h".into(), line: 3, expr_index: 0, variable: "u".into() };
    let names: Vec<_> = enumerate_patches(&p, &fp, &ReturnEarlyDefaults::default())
        .unwrap()
        .into_iter()
        .filter_map(|p| match p.args {
            TemplateArgs::Variable { name } => Some(name),
            _ => None,
        })
        .collect();
    assert_eq!(names, ["a"]);
}
