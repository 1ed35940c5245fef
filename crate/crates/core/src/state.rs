// SPDX-License-Identifier: Apache-2.0

//! In-process key-value application state and its snapshots.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::lang::Value;

static SNAPSHOT_SEQ: AtomicU64 = AtomicU64::new(1);

/// Mutable key-value store. `version` counts writes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvState {
    entries: BTreeMap<String, Value>,
    version: u64,
}

impl KvState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: BTreeMap<String, Value>) -> Self {
        KvState {
            entries,
            version: 0,
        }
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.entries.get(key)
    }

    pub fn put(&mut self, key: impl Into<String>, value: Value) {
        self.entries.insert(key.into(), value);
        self.version += 1;
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn entries(&self) -> &BTreeMap<String, Value> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Deep copy. Later writes to `self` do not affect the snapshot.
    pub fn snapshot(&self) -> StateSnapshot {
        StateSnapshot {
            seq: SNAPSHOT_SEQ.fetch_add(1, Ordering::Relaxed),
            state_version: self.version,
            entries: self.entries.clone(),
        }
    }

    /// Replaces the contents with the snapshot's.
    pub(crate) fn load(&mut self, snapshot: &StateSnapshot) {
        self.entries = snapshot.entries.clone();
        self.version = snapshot.state_version;
    }
}

/// Immutable deep copy of a [`KvState`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSnapshot {
    /// Strictly increasing across all snapshots taken in this process.
    pub seq: u64,
    /// Write counter of the state at the time of the copy.
    pub state_version: u64,
    pub entries: BTreeMap<String, Value>,
}

impl StateSnapshot {
    pub fn empty() -> Self {
        KvState::new().snapshot()
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.entries.get(key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_is_a_copy() {
        let mut s = KvState::new();
        let empty = s.snapshot();
        assert!(empty.entries.is_empty());
        s.put("k", Value::Int(1));
        let snap = s.snapshot();
        s.put("k", Value::Int(2));
        assert_eq!(snap.get("k"), Some(&Value::Int(1)));
        assert_eq!(s.get("k"), Some(&Value::Int(2)));
    }

    #[test]
    fn successive_snapshots_have_increasing_seq() {
        let s = KvState::new();
        let a = s.snapshot();
        let b = s.snapshot();
        assert!(b.seq > a.seq);
        assert_eq!(a.state_version, b.state_version);
    }

    #[test]
    fn version_counts_writes() {
        let mut s = KvState::new();
        assert_eq!(s.version(), 0);
        s.put("a", Value::Null);
        s.put("a", Value::Null);
        assert_eq!(s.version(), 2);
    }
}
