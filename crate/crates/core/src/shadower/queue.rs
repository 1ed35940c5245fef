// SPDX-License-Identifier: Apache-2.0

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::envelope::{EnvelopeSink, ShadowEnvelope};

pub const DEFAULT_CAPACITY: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PushOutcome {
    Accepted,
    /// Accepted after discarding the oldest queued item.
    DisplacedOldest,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Pop<T> {
    Item(T),
    TimedOut,
    Closed,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct QueueStats {
    pub capacity: usize,
    pub len: usize,
    pub pushed: u64,
    pub popped: u64,
    pub dropped: u64,
    pub paused: bool,
}

struct Inner<T> {
    items: VecDeque<T>,
    closed: bool,
    paused: bool,
}

/// Multi-producer, multi-consumer FIFO that never blocks producers. When
/// full, the oldest item is discarded to make room.
pub struct BoundedQueue<T> {
    capacity: usize,
    inner: Mutex<Inner<T>>,
    ready: Condvar,
    pushed: AtomicU64,
    popped: AtomicU64,
    dropped: AtomicU64,
}

impl<T> BoundedQueue<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        BoundedQueue {
            capacity,
            inner: Mutex::new(Inner {
                items: VecDeque::with_capacity(capacity.min(4096)),
                closed: false,
                paused: false,
            }),
            ready: Condvar::new(),
            pushed: AtomicU64::new(0),
            popped: AtomicU64::new(0),
            dropped: AtomicU64::new(0),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&self, item: T) -> PushOutcome {
        let mut inner = self.inner.lock().unwrap();
        if inner.closed {
            return PushOutcome::Closed;
        }
        let mut outcome = PushOutcome::Accepted;
        if inner.items.len() >= self.capacity {
            inner.items.pop_front();
            self.dropped.fetch_add(1, Ordering::Relaxed);
            outcome = PushOutcome::DisplacedOldest;
        }
        inner.items.push_back(item);
        self.pushed.fetch_add(1, Ordering::Relaxed);
        drop(inner);
        self.ready.notify_one();
        outcome
    }

    /// Waits up to `timeout` for an item. Paused queues hand out nothing;
    /// closed queues drain what is left before reporting `Closed`.
    pub fn pop_timeout(&self, timeout: Duration) -> Pop<T> {
        let deadline = Instant::now() + timeout;
        let mut inner = self.inner.lock().unwrap();
        loop {
            if !inner.paused || inner.closed {
                if let Some(item) = inner.items.pop_front() {
                    self.popped.fetch_add(1, Ordering::Relaxed);
                    return Pop::Item(item);
                }
                if inner.closed {
                    return Pop::Closed;
                }
            }
            let now = Instant::now();
            if now >= deadline {
                return Pop::TimedOut;
            }
            inner = self.ready.wait_timeout(inner, deadline - now).unwrap().0;
        }
    }

    pub fn try_pop(&self) -> Option<T> {
        match self.pop_timeout(Duration::ZERO) {
            Pop::Item(x) => Some(x),
            _ => None,
        }
    }

    pub fn set_paused(&self, paused: bool) {
        self.inner.lock().unwrap().paused = paused;
        self.ready.notify_all();
    }

    pub fn close(&self) {
        self.inner.lock().unwrap().closed = true;
        self.ready.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.inner.lock().unwrap().closed
    }

    pub fn stats(&self) -> QueueStats {
        let inner = self.inner.lock().unwrap();
        QueueStats {
            capacity: self.capacity,
            len: inner.items.len(),
            pushed: self.pushed.load(Ordering::Relaxed),
            popped: self.popped.load(Ordering::Relaxed),
            dropped: self.dropped.load(Ordering::Relaxed),
            paused: inner.paused,
        }
    }
}

impl EnvelopeSink for BoundedQueue<ShadowEnvelope> {
    fn submit(&self, envelope: ShadowEnvelope) -> bool {
        self.push(envelope) != PushOutcome::Closed
    }
}
