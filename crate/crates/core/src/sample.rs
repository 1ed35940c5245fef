// SPDX-License-Identifier: Apache-2.0

//! The demo application: a user lookup with a seeded null dereference.

use std::collections::BTreeMap;

use crate::app::{AppRuntime, Route, RouteTable};
use crate::lang::{parse_program, Program, Value};
use crate::state::KvState;

pub const USERS_HANDLER: &str = r#"handler users {
  let u = db.get(param("id"));
  let n = u.name;
  return 200, n;
}
"#;

/// Users known to the seed state, with display names.
pub const USERS: &[(&str, &str)] = &[
    ("ada", "Ada"),
    ("alan", "Alan"),
    ("barbara", "Barbara"),
    ("edsger", "Edsger"),
    ("grace", "Grace"),
    ("john", "John"),
    ("ken", "Ken"),
    ("margaret", "Margaret"),
];

pub fn program() -> Program {
    parse_program(USERS_HANDLER).expect("sample handler parses")
}

pub fn routes() -> RouteTable {
    RouteTable::new(vec![Route {
        method: "GET".into(),
        path: "/users".into(),
        handler: "users".into(),
    }])
}

pub fn seed_state() -> KvState {
    let entries = USERS
        .iter()
        .map(|(id, name)| {
            let user = BTreeMap::from([("name".to_string(), Value::from(*name))]);
            (id.to_string(), Value::Map(user))
        })
        .collect();
    KvState::from_entries(entries)
}

pub fn valid_ids() -> Vec<String> {
    USERS.iter().map(|(id, _)| id.to_string()).collect()
}

pub fn production_app() -> AppRuntime {
    AppRuntime::production(program(), routes(), seed_state())
}
