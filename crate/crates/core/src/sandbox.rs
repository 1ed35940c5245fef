// SPDX-License-Identifier: Apache-2.0

//! Fixed pool of in-process application replicas.
//!
//! A lease restores the requested snapshot and installs the requested
//! program before handing the replica out, so each lease starts clean
//! regardless of what the previous holder did.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::app::{AppRuntime, Handled, RouteTable};
use crate::lang::Program;
use crate::message::Request;
use crate::state::StateSnapshot;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SandboxError {
    #[error("no sandbox became free within {0:?}")]
    LeaseTimeout(Duration),
    #[error("sandbox lease already released")]
    DoubleRelease,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct PoolStats {
    pub size: usize,
    pub leased: usize,
    pub total_leases: u64,
    pub timeouts: u64,
}

struct Slots {
    free: Vec<usize>,
    /// Current lease id per slot, if leased.
    holders: Vec<Option<u64>>,
}

struct Shared {
    replicas: Vec<AppRuntime>,
    slots: Mutex<Slots>,
    freed: Condvar,
    timeout: Duration,
    next_lease: AtomicU64,
    timeouts: AtomicU64,
}

#[derive(Clone)]
pub struct SandboxPool {
    shared: Arc<Shared>,
}

/// Exclusive handle on one replica. Dropping it releases the lease.
pub struct Sandbox {
    shared: Arc<Shared>,
    slot: usize,
    lease: u64,
    owner: String,
    restored_seq: u64,
    released: bool,
}

impl SandboxPool {
    pub fn new(size: usize, routes: RouteTable, timeout: Duration) -> Self {
        assert!(size > 0, "sandbox pool needs at least one replica");
        let empty = Arc::new(Program::default());
        SandboxPool {
            shared: Arc::new(Shared {
                replicas: (0..size)
                    .map(|_| AppRuntime::sandbox(empty.clone(), routes.clone()))
                    .collect(),
                slots: Mutex::new(Slots {
                    free: (0..size).rev().collect(),
                    holders: vec![None; size],
                }),
                freed: Condvar::new(),
                timeout,
                next_lease: AtomicU64::new(1),
                timeouts: AtomicU64::new(0),
            }),
        }
    }

    pub fn size(&self) -> usize {
        self.shared.replicas.len()
    }

    pub fn stats(&self) -> PoolStats {
        let slots = self.shared.slots.lock().unwrap();
        PoolStats {
            size: self.size(),
            leased: self.size() - slots.free.len(),
            total_leases: self.shared.next_lease.load(Ordering::Relaxed) - 1,
            timeouts: self.shared.timeouts.load(Ordering::Relaxed),
        }
    }

    /// Blocks until a replica is free (up to the pool timeout), then loads
    /// `snapshot` and `program` into it.
    pub fn lease(
        &self,
        owner: &str,
        snapshot: &StateSnapshot,
        program: Arc<Program>,
    ) -> Result<Sandbox, SandboxError> {
        let shared = &self.shared;
        let deadline = Instant::now() + shared.timeout;
        let mut slots = shared.slots.lock().unwrap();
        let slot = loop {
            if let Some(slot) = slots.free.pop() {
                break slot;
            }
            let now = Instant::now();
            if now >= deadline {
                shared.timeouts.fetch_add(1, Ordering::Relaxed);
                return Err(SandboxError::LeaseTimeout(shared.timeout));
            }
            slots = shared.freed.wait_timeout(slots, deadline - now).unwrap().0;
        };
        let lease = shared.next_lease.fetch_add(1, Ordering::Relaxed);
        slots.holders[slot] = Some(lease);
        drop(slots);

        let replica = &shared.replicas[slot];
        replica.install(program);
        replica
            .restore(snapshot)
            .expect("pool replicas are sandbox instances");
        Ok(Sandbox {
            shared: shared.clone(),
            slot,
            lease,
            owner: owner.to_string(),
            restored_seq: snapshot.seq,
            released: false,
        })
    }

    pub fn release(&self, sandbox: &mut Sandbox) -> Result<(), SandboxError> {
        sandbox.release()
    }
}

impl Sandbox {
    pub fn runtime(&self) -> &AppRuntime {
        &self.shared.replicas[self.slot]
    }

    pub fn handle(&self, request: &Request) -> Handled {
        self.runtime().handle_traced(request)
    }

    /// Reloads the replica without giving up the lease.
    pub fn reset(&mut self, snapshot: &StateSnapshot, program: Arc<Program>) {
        let replica = self.runtime();
        replica.install(program);
        replica
            .restore(snapshot)
            .expect("pool replicas are sandbox instances");
        self.restored_seq = snapshot.seq;
    }

    pub fn owner(&self) -> &str {
        &self.owner
    }

    /// Sequence number of the snapshot this lease was restored from.
    pub fn restored_seq(&self) -> u64 {
        self.restored_seq
    }

    pub fn release(&mut self) -> Result<(), SandboxError> {
        if self.released {
            return Err(SandboxError::DoubleRelease);
        }
        let mut slots = self.shared.slots.lock().unwrap();
        if slots.holders[self.slot] != Some(self.lease) {
            return Err(SandboxError::DoubleRelease);
        }
        slots.holders[self.slot] = None;
        slots.free.push(self.slot);
        self.released = true;
        drop(slots);
        self.shared.freed.notify_one();
        Ok(())
    }
}

impl Drop for Sandbox {
    fn drop(&mut self) {
        if !self.released {
            let _ = self.release();
        }
    }
}
