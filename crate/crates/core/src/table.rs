// SPDX-License-Identifier: Apache-2.0
// Copyright The opp-engine Authors

use std::sync::atomic::{AtomicUsize, Ordering};

use parking_lot::{Mutex, MutexGuard};
use rustc_hash::{FxBuildHasher, FxHashMap};
use serde::{Deserialize, Serialize};

use crate::key::FlowKey;
use crate::packet::Timestamp;
use crate::program::{NextState, MAX_FLOW_REGS};

/// Per-flow persistent state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FlowContext {
    pub state: u16,
    pub regs: [u32; MAX_FLOW_REGS],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idle_timeout_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hard_timeout_ms: Option<u64>,
    pub last_seen: Timestamp,
    pub created_at: Timestamp,
}

impl FlowContext {
    pub fn is_expired(&self, now: Timestamp) -> bool {
        let idle = self
            .idle_timeout_ms
            .is_some_and(|t| self.last_seen.plus_millis(t) <= now);
        let hard = self
            .hard_timeout_ms
            .is_some_and(|t| self.created_at.plus_millis(t) <= now);
        idle || hard
    }

    /// The context a commit of `next` with `regs` produces over `prev`.
    pub fn committed(
        prev: Option<&FlowContext>,
        next: &NextState,
        regs: [u32; MAX_FLOW_REGS],
        now: Timestamp,
    ) -> Self {
        FlowContext {
            state: next.label,
            regs,
            idle_timeout_ms: next.idle_timeout_ms,
            hard_timeout_ms: next.hard_timeout_ms,
            last_seen: now,
            created_at: prev.map_or(now, |p| p.created_at),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lookup {
    Hit(FlowContext),
    Miss,
    /// The key was present but expired; it has been removed.
    Expired,
}

impl Lookup {
    pub fn context(&self) -> FlowContext {
        match self {
            Lookup::Hit(c) => *c,
            _ => FlowContext::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CommitOutcome {
    pub stored: bool,
    /// Expired contexts removed while making room.
    pub evicted: usize,
}

/// Flow context table of one stage. Not synchronized.
#[derive(Clone, Debug, Default)]
pub struct ContextTable {
    map: FxHashMap<FlowKey, FlowContext>,
    capacity: usize,
}

impl ContextTable {
    pub fn new(capacity: usize) -> Self {
        ContextTable {
            map: FxHashMap::with_capacity_and_hasher(capacity.min(1024), FxBuildHasher),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Returns the live context for `key`, refreshing its idle timer, or
    /// drops it if it has expired.
    pub fn lookup(&mut self, key: &FlowKey, now: Timestamp) -> Lookup {
        match self.map.get_mut(key) {
            None => Lookup::Miss,
            Some(ctx) if ctx.is_expired(now) => {
                self.map.remove(key);
                Lookup::Expired
            }
            Some(ctx) => {
                ctx.last_seen = ctx.last_seen.max(now);
                Lookup::Hit(*ctx)
            }
        }
    }

    /// Stored context without expiry checks or refresh.
    pub fn get(&self, key: &FlowKey) -> Option<&FlowContext> {
        self.map.get(key)
    }

    pub fn contains(&self, key: &FlowKey) -> bool {
        self.map.contains_key(key)
    }

    pub fn commit(
        &mut self,
        key: &FlowKey,
        next: &NextState,
        regs: [u32; MAX_FLOW_REGS],
        now: Timestamp,
    ) -> CommitOutcome {
        let mut evicted = 0;
        if !self.map.contains_key(key) && self.map.len() >= self.capacity {
            evicted = self.evict_expired(now);
            if self.map.len() >= self.capacity {
                return CommitOutcome {
                    stored: false,
                    evicted,
                };
            }
        }
        self.write_commit(key, next, regs, now);
        CommitOutcome {
            stored: true,
            evicted,
        }
    }

    fn write_commit(
        &mut self,
        key: &FlowKey,
        next: &NextState,
        regs: [u32; MAX_FLOW_REGS],
        now: Timestamp,
    ) {
        let prev = self.map.get(key).filter(|c| !c.is_expired(now));
        let ctx = FlowContext::committed(prev, next, regs, now);
        self.map.insert(key.clone(), ctx);
    }

    /// Installs a context verbatim. Fails only when the table is full.
    pub fn install(&mut self, key: FlowKey, ctx: FlowContext) -> bool {
        if !self.map.contains_key(&key) && self.map.len() >= self.capacity {
            return false;
        }
        self.map.insert(key, ctx);
        true
    }

    pub fn remove(&mut self, key: &FlowKey) -> Option<FlowContext> {
        self.map.remove(key)
    }

    pub fn evict_expired(&mut self, now: Timestamp) -> usize {
        let before = self.map.len();
        self.map.retain(|_, c| !c.is_expired(now));
        before - self.map.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&FlowKey, &FlowContext)> {
        self.map.iter()
    }

    pub fn drain(&mut self) -> impl Iterator<Item = (FlowKey, FlowContext)> + '_ {
        self.map.drain()
    }
}

const STRIPES: usize = 64;

/// A context table shared by all workers, split into lock stripes. The
/// capacity bound is global across stripes.
#[derive(Debug)]
pub struct SharedTable {
    stripes: Vec<Mutex<ContextTable>>,
    len: AtomicUsize,
    capacity: usize,
}

impl SharedTable {
    pub fn new(capacity: usize) -> Self {
        SharedTable {
            stripes: (0..STRIPES)
                .map(|_| Mutex::new(ContextTable::new(usize::MAX)))
                .collect(),
            len: AtomicUsize::new(0),
            capacity,
        }
    }

    pub fn from_table(table: ContextTable) -> Self {
        let mut table = table;
        let mut shared = SharedTable::new(table.capacity());
        let n = table.len();
        for (k, c) in table.drain() {
            let i = shared.stripe_of(&k);
            shared.stripes[i].get_mut().map.insert(k, c);
        }
        shared.len = AtomicUsize::new(n);
        shared
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len.load(Ordering::SeqCst)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stripe_of(&self, key: &FlowKey) -> usize {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in key.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        (h % STRIPES as u64) as usize
    }

    /// Exclusive access to the contexts of both keys. Stripes are locked in
    /// ascending index order so that any two acquisitions agree on order.
    pub fn acquire(&self, lookup: &FlowKey, update: &FlowKey) -> SharedGuard<'_> {
        let a = self.stripe_of(lookup);
        let b = self.stripe_of(update);
        let (lo, hi) = (a.min(b), a.max(b));
        let first = self.stripes[lo].lock();
        let second = (hi != lo).then(|| self.stripes[hi].lock());
        SharedGuard {
            table: self,
            lo,
            first,
            second,
        }
    }

    pub fn evict_expired(&self, now: Timestamp) -> usize {
        let mut total = 0;
        for s in &self.stripes {
            let n = s.lock().evict_expired(now);
            total += n;
        }
        self.len.fetch_sub(total, Ordering::SeqCst);
        total
    }

    pub fn snapshot(&self) -> Vec<(FlowKey, FlowContext)> {
        let mut out = Vec::with_capacity(self.len());
        for s in &self.stripes {
            out.extend(s.lock().iter().map(|(k, c)| (k.clone(), *c)));
        }
        out
    }

    pub fn install(&self, key: FlowKey, ctx: FlowContext) -> bool {
        let mut stripe = self.stripes[self.stripe_of(&key)].lock();
        if !stripe.contains(&key) && !self.reserve() {
            return false;
        }
        stripe.map.insert(key, ctx);
        true
    }

    pub fn remove(&self, key: &FlowKey) -> Option<FlowContext> {
        let r = self.stripes[self.stripe_of(key)].lock().remove(key);
        if r.is_some() {
            self.len.fetch_sub(1, Ordering::SeqCst);
        }
        r
    }

    pub fn into_table(self) -> ContextTable {
        let mut table = ContextTable::new(self.capacity);
        for s in self.stripes {
            table.map.extend(s.into_inner().map);
        }
        table
    }

    fn reserve(&self) -> bool {
        self.len
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| {
                (n < self.capacity).then_some(n + 1)
            })
            .is_ok()
    }
}

/// Held locks over the stripes of a lookup key and an update key.
pub struct SharedGuard<'a> {
    table: &'a SharedTable,
    lo: usize,
    first: MutexGuard<'a, ContextTable>,
    second: Option<MutexGuard<'a, ContextTable>>,
}

impl SharedGuard<'_> {
    fn stripe(&mut self, key: &FlowKey) -> &mut ContextTable {
        let i = self.table.stripe_of(key);
        if i == self.lo {
            &mut self.first
        } else {
            self.second
                .as_mut()
                .expect("key stripe is held by this guard")
        }
    }

    pub fn lookup(&mut self, key: &FlowKey, now: Timestamp) -> Lookup {
        let r = self.stripe(key).lookup(key, now);
        if r == Lookup::Expired {
            self.table.len.fetch_sub(1, Ordering::SeqCst);
        }
        r
    }

    pub fn commit(
        &mut self,
        key: &FlowKey,
        next: &NextState,
        regs: [u32; MAX_FLOW_REGS],
        now: Timestamp,
    ) -> CommitOutcome {
        let table = self.table;
        let stripe = self.stripe(key);
        let mut evicted = 0;
        if !stripe.contains(key) && !table.reserve() {
            evicted = stripe.evict_expired(now);
            table.len.fetch_sub(evicted, Ordering::SeqCst);
            if !table.reserve() {
                return CommitOutcome {
                    stored: false,
                    evicted,
                };
            }
        }
        stripe.write_commit(key, next, regs, now);
        CommitOutcome {
            stored: true,
            evicted,
        }
    }
}
