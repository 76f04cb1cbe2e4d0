// SPDX-License-Identifier: Apache-2.0
// Copyright The opp-engine Authors

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::globals::GlobalRegisters;
use crate::key::FlowKey;
use crate::packet::{PacketView, Timestamp};
use crate::program::{
    Action, Condition, EfsmEntry, EngineParams, NextState, Operand, StageConfig, StageKind,
    TableDefault, UpdateDst, UpdateInstruction, MAX_FLOW_REGS,
};
use crate::table::{CommitOutcome, ContextTable, FlowContext, Lookup, SharedGuard, SharedTable};

/// Condition results, bit `i` holding `c_i`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ConditionVector(pub u32);

impl ConditionVector {
    pub fn get(self, i: usize) -> bool {
        self.0 >> i & 1 == 1
    }
}

pub fn read_operand(
    op: Operand,
    pkt: &PacketView,
    state: u16,
    regs: &[u32],
    globals: &[u32],
) -> u32 {
    match op {
        Operand::Field(f) => pkt.get(f) as u32,
        Operand::FlowReg(i) => regs[i as usize],
        Operand::GlobalReg(i) => globals[i as usize],
        Operand::Const(c) => c,
        Operand::State => state as u32,
    }
}

pub fn evaluate_conditions(
    conds: &[Condition],
    pkt: &PacketView,
    state: u16,
    regs: &[u32],
    globals: &[u32],
) -> ConditionVector {
    let mut bits = 0;
    for (i, c) in conds.iter().enumerate() {
        let lhs = read_operand(c.lhs, pkt, state, regs, globals);
        let rhs = read_operand(c.rhs, pkt, state, regs, globals);
        if c.op.eval(lhs, rhs) {
            bits |= 1 << i;
        }
    }
    ConditionVector(bits)
}

pub fn entry_matches(entry: &EfsmEntry, state: u16, cv: ConditionVector, pkt: &PacketView) -> bool {
    if let Some(sm) = entry.state {
        if !sm.matches(state) {
            return false;
        }
    }
    let (care, value) = entry.conds.masks();
    if cv.0 & care != value {
        return false;
    }
    entry.fields.iter().all(|m| m.matches(pkt.get(m.field)))
}

/// Entry indices sorted by priority value, ties kept in table order.
pub fn priority_order(entries: &[EfsmEntry]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by_key(|&i| entries[i].priority);
    order
}

pub fn match_entry(
    entries: &[EfsmEntry],
    order: &[usize],
    state: u16,
    cv: ConditionVector,
    pkt: &PacketView,
) -> Option<usize> {
    order
        .iter()
        .copied()
        .find(|&i| entry_matches(&entries[i], state, cv, pkt))
}

/// Runs an update list with parallel-read semantics: every source is read
/// before any destination is written.
pub fn execute_updates(
    updates: &[UpdateInstruction],
    pkt: &mut PacketView,
    state: u16,
    regs: &mut [u32],
    globals: &mut [u32],
) {
    let mut results = [0u32; crate::program::MAX_ALUS];
    for (slot, u) in results.iter_mut().zip(updates) {
        let a = read_operand(u.src1, pkt, state, regs, globals);
        let b = u
            .src2
            .map_or(0, |s| read_operand(s, pkt, state, regs, globals));
        *slot = u.op.apply(a, b);
    }
    for (u, v) in updates.iter().zip(results) {
        match u.dst {
            UpdateDst::FlowReg(i) => regs[i as usize] = v,
            UpdateDst::GlobalReg(i) => globals[i as usize] = v,
            UpdateDst::Meta(r) => pkt.metadata = r.insert(pkt.metadata, v),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Forward(u16),
    Drop,
    Continue(usize),
}

/// Runs an action list on `pkt` in order. Returns a terminal verdict if
/// one was hit and the last GOTO target seen before it.
pub fn apply_actions(
    actions: &[Action],
    pkt: &mut PacketView,
    state: u16,
    regs: &[u32],
    globals: &[u32],
) -> (Option<Verdict>, Option<usize>) {
    let mut goto = None;
    for a in actions {
        match *a {
            Action::Output(port) => return (Some(Verdict::Forward(port)), goto),
            Action::Drop => return (Some(Verdict::Drop), goto),
            Action::SetField { field, value } => pkt.set(field, value),
            Action::SetFieldFrom { field, src } => {
                let v = read_operand(src, pkt, state, regs, globals);
                pkt.set(field, v as u64);
            }
            Action::SetMeta { range, value } => pkt.metadata = range.insert(pkt.metadata, value),
            Action::SetMetaFrom { range, src } => {
                let v = read_operand(src, pkt, state, regs, globals);
                pkt.metadata = range.insert(pkt.metadata, v);
            }
            Action::GotoStage(s) => goto = Some(s),
        }
    }
    (None, goto)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageOutcome {
    pub verdict: Verdict,
    pub packet: PacketView,
    /// Position of this packet's global-register access in the stage's
    /// lock order, if it took the lock.
    pub grant: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageStats {
    pub packets: u64,
    pub lookups: u64,
    pub hits: u64,
    pub misses: u64,
    pub commits: u64,
    pub rejected_commits: u64,
    pub evictions: u64,
    pub default_hits: u64,
    pub entry_matches: Vec<u64>,
}

impl StageStats {
    pub fn new(entries: usize) -> Self {
        StageStats {
            entry_matches: vec![0; entries],
            ..Default::default()
        }
    }

    pub fn merge(&mut self, other: &StageStats) {
        self.packets += other.packets;
        self.lookups += other.lookups;
        self.hits += other.hits;
        self.misses += other.misses;
        self.commits += other.commits;
        self.rejected_commits += other.rejected_commits;
        self.evictions += other.evictions;
        self.default_hits += other.default_hits;
        if self.entry_matches.len() < other.entry_matches.len() {
            self.entry_matches.resize(other.entry_matches.len(), 0);
        }
        for (a, b) in self.entry_matches.iter_mut().zip(&other.entry_matches) {
            *a += b;
        }
    }
}

/// What one stage did with one packet, recorded when tracing is on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: usize,
    /// Matched entry index in table order; `None` means the table default.
    pub entry: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    pub state_in: u16,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_out: Option<u16>,
    pub committed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub globals: Option<Vec<u32>>,
    pub metadata_out: u32,
    pub verdict: Verdict,
}

/// Storage behind a stage's flow contexts.
#[derive(Debug)]
pub enum TableHandle {
    None,
    Local(ContextTable),
    Shared(Arc<SharedTable>),
}

trait Contexts {
    fn lookup(&mut self, key: &FlowKey, now: Timestamp) -> Lookup;
    fn commit(
        &mut self,
        key: &FlowKey,
        next: &NextState,
        regs: [u32; MAX_FLOW_REGS],
        now: Timestamp,
    ) -> CommitOutcome;
}

impl Contexts for ContextTable {
    fn lookup(&mut self, key: &FlowKey, now: Timestamp) -> Lookup {
        ContextTable::lookup(self, key, now)
    }

    fn commit(
        &mut self,
        key: &FlowKey,
        next: &NextState,
        regs: [u32; MAX_FLOW_REGS],
        now: Timestamp,
    ) -> CommitOutcome {
        ContextTable::commit(self, key, next, regs, now)
    }
}

impl Contexts for SharedGuard<'_> {
    fn lookup(&mut self, key: &FlowKey, now: Timestamp) -> Lookup {
        SharedGuard::lookup(self, key, now)
    }

    fn commit(
        &mut self,
        key: &FlowKey,
        next: &NextState,
        regs: [u32; MAX_FLOW_REGS],
        now: Timestamp,
    ) -> CommitOutcome {
        SharedGuard::commit(self, key, next, regs, now)
    }
}

struct NoContexts;

impl Contexts for NoContexts {
    fn lookup(&mut self, _: &FlowKey, _: Timestamp) -> Lookup {
        Lookup::Miss
    }

    fn commit(
        &mut self,
        _: &FlowKey,
        _: &NextState,
        _: [u32; MAX_FLOW_REGS],
        _: Timestamp,
    ) -> CommitOutcome {
        CommitOutcome {
            stored: false,
            evicted: 0,
        }
    }
}

/// Immutable program of a loaded stage.
#[derive(Debug, Clone)]
struct Program {
    index: usize,
    config: Arc<StageConfig>,
    order: Vec<usize>,
    conds_read_globals: bool,
    entry_touches_globals: Vec<bool>,
}

fn operand_is_global(op: Operand) -> bool {
    matches!(op, Operand::GlobalReg(_))
}

fn entry_touches_globals(e: &EfsmEntry) -> bool {
    let in_actions = e.actions.iter().any(|a| match a {
        Action::SetFieldFrom { src, .. } | Action::SetMetaFrom { src, .. } => {
            operand_is_global(*src)
        }
        _ => false,
    });
    let in_updates = e
        .updates
        .iter()
        .any(|u| matches!(u.dst, UpdateDst::GlobalReg(_)) || u.operands().any(operand_is_global));
    in_actions || in_updates
}

/// One loaded stage: its program, context storage, globals and counters.
#[derive(Debug)]
pub struct Stage {
    program: Program,
    table: TableHandle,
    globals: Arc<GlobalRegisters>,
    stats: StageStats,
}

impl Stage {
    pub fn new(index: usize, config: &StageConfig, params: &EngineParams) -> Self {
        let table = match config.kind {
            StageKind::Stateful => TableHandle::Local(ContextTable::new(config.capacity())),
            StageKind::Stateless => TableHandle::None,
        };
        let globals = Arc::new(GlobalRegisters::new(params.h, &config.globals_init));
        Self::with_parts(index, Arc::new(config.clone()), table, globals)
    }

    fn with_parts(
        index: usize,
        config: Arc<StageConfig>,
        table: TableHandle,
        globals: Arc<GlobalRegisters>,
    ) -> Self {
        let program = Program {
            index,
            order: priority_order(&config.entries),
            conds_read_globals: config
                .conditions
                .iter()
                .any(|c| operand_is_global(c.lhs) || operand_is_global(c.rhs)),
            entry_touches_globals: config.entries.iter().map(entry_touches_globals).collect(),
            config,
        };
        let stats = StageStats::new(program.config.entries.len());
        Stage {
            program,
            table,
            globals,
            stats,
        }
    }

    /// A stage running the same program over different storage, sharing
    /// this stage's global registers.
    pub fn sibling(&self, table: TableHandle) -> Self {
        Self::with_parts(
            self.program.index,
            self.program.config.clone(),
            table,
            self.globals.clone(),
        )
    }

    pub fn index(&self) -> usize {
        self.program.index
    }

    pub fn config(&self) -> &StageConfig {
        &self.program.config
    }

    pub fn is_stateful(&self) -> bool {
        self.program.config.kind == StageKind::Stateful
    }

    pub fn table(&self) -> &TableHandle {
        &self.table
    }

    pub fn replace_table(&mut self, table: TableHandle) -> TableHandle {
        std::mem::replace(&mut self.table, table)
    }

    pub fn globals(&self) -> &Arc<GlobalRegisters> {
        &self.globals
    }

    pub fn stats(&self) -> &StageStats {
        &self.stats
    }

    pub fn take_stats(&mut self) -> StageStats {
        let fresh = StageStats::new(self.program.config.entries.len());
        std::mem::replace(&mut self.stats, fresh)
    }

    pub fn merge_stats(&mut self, other: &StageStats) {
        self.stats.merge(other);
    }

    pub fn process(&mut self, pkt: &PacketView, now: Timestamp) -> StageOutcome {
        self.process_traced(pkt, now, false).0
    }

    pub fn process_traced(
        &mut self,
        pkt: &PacketView,
        now: Timestamp,
        trace: bool,
    ) -> (StageOutcome, Option<StageTrace>) {
        let p = &self.program;
        let stats = &mut self.stats;
        let globals = &self.globals;
        match (&mut self.table, &p.config.lookup, &p.config.update) {
            (TableHandle::Local(t), Some(l), Some(u)) => {
                let (lk, uk) = (l.extract(pkt), u.extract(pkt));
                run(p, stats, globals, t, Some((&lk, &uk)), pkt, now, trace)
            }
            (TableHandle::Shared(t), Some(l), Some(u)) => {
                let (lk, uk) = (l.extract(pkt), u.extract(pkt));
                let mut guard = t.acquire(&lk, &uk);
                run(
                    p,
                    stats,
                    globals,
                    &mut guard,
                    Some((&lk, &uk)),
                    pkt,
                    now,
                    trace,
                )
            }
            _ => run(p, stats, globals, &mut NoContexts, None, pkt, now, trace),
        }
    }

    pub fn evict_expired(&mut self, now: Timestamp) -> usize {
        let n = match &mut self.table {
            TableHandle::None => 0,
            TableHandle::Local(t) => t.evict_expired(now),
            TableHandle::Shared(t) => t.evict_expired(now),
        };
        self.stats.evictions += n as u64;
        n
    }

    /// Stored contexts sorted by key.
    pub fn contexts(&self) -> Vec<(FlowKey, FlowContext)> {
        let mut out: Vec<_> = match &self.table {
            TableHandle::None => Vec::new(),
            TableHandle::Local(t) => t.iter().map(|(k, c)| (k.clone(), *c)).collect(),
            TableHandle::Shared(t) => t.snapshot(),
        };
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn remove(&mut self, key: &FlowKey) -> Option<FlowContext> {
        match &mut self.table {
            TableHandle::None => None,
            TableHandle::Local(t) => t.remove(key),
            TableHandle::Shared(t) => t.remove(key),
        }
    }

    /// Installs a context verbatim. Returns false when the table is full
    /// or the stage has no table.
    pub fn install(&mut self, key: FlowKey, ctx: FlowContext) -> bool {
        match &mut self.table {
            TableHandle::None => false,
            TableHandle::Local(t) => t.install(key, ctx),
            TableHandle::Shared(t) => t.install(key, ctx),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run(
    p: &Program,
    stats: &mut StageStats,
    globals: &GlobalRegisters,
    store: &mut impl Contexts,
    keys: Option<(&FlowKey, &FlowKey)>,
    pkt: &PacketView,
    now: Timestamp,
    trace: bool,
) -> (StageOutcome, Option<StageTrace>) {
    let cfg = &*p.config;
    stats.packets += 1;
    let ctx = match keys {
        Some((lk, _)) => {
            stats.lookups += 1;
            let r = store.lookup(lk, now);
            match r {
                Lookup::Hit(_) => stats.hits += 1,
                Lookup::Miss => stats.misses += 1,
                Lookup::Expired => {
                    stats.misses += 1;
                    stats.evictions += 1;
                }
            }
            r.context()
        }
        None => FlowContext::default(),
    };
    let state = ctx.state;
    let mut regs = ctx.regs;
    let mut out = *pkt;

    let mut grant = None;
    let mut guard = p.conds_read_globals.then(|| {
        let (g, n) = globals.lock_ordered();
        grant = Some(n);
        g
    });
    let cv = evaluate_conditions(
        &cfg.conditions,
        pkt,
        state,
        &regs,
        guard.as_deref().map_or(&[], |g| g.as_slice()),
    );
    let matched = match_entry(&cfg.entries, &p.order, state, cv, pkt);

    let mut committed = false;
    let mut globals_after = None;
    let verdict = match matched {
        None => {
            drop(guard);
            stats.default_hits += 1;
            match cfg.table_default {
                TableDefault::Drop => Verdict::Drop,
                TableDefault::GotoNext => Verdict::Continue(p.index + 1),
                TableDefault::Goto(s) => Verdict::Continue(s),
            }
        }
        Some(i) => {
            let entry = &cfg.entries[i];
            stats.entry_matches[i] += 1;
            if guard.is_none() && p.entry_touches_globals[i] {
                let (g, n) = globals.lock_ordered();
                grant = Some(n);
                guard = Some(g);
            }
            let mut empty: [u32; 0] = [];
            let held = guard.is_some();
            let g: &mut [u32] = match guard.as_deref_mut() {
                Some(v) => v.as_mut_slice(),
                None => &mut empty,
            };
            let (terminal, goto) = apply_actions(&entry.actions, &mut out, state, &regs, g);
            execute_updates(&entry.updates, &mut out, state, &mut regs, g);
            if trace && held {
                globals_after = Some(g.to_vec());
            }
            drop(guard);
            if let (Some(next), Some((_, uk))) = (&entry.next_state, keys) {
                let r = store.commit(uk, next, regs, now);
                stats.evictions += r.evicted as u64;
                if r.stored {
                    stats.commits += 1;
                    committed = true;
                } else {
                    stats.rejected_commits += 1;
                }
            }
            terminal.unwrap_or(Verdict::Continue(goto.unwrap_or(p.index + 1)))
        }
    };

    let record = trace.then(|| StageTrace {
        stage: p.index,
        entry: matched,
        tag: matched.and_then(|i| cfg.entries[i].tag.clone()),
        state_in: state,
        state_out: matched.and_then(|i| cfg.entries[i].next_state.map(|n| n.label)),
        committed,
        globals: globals_after,
        metadata_out: out.metadata,
        verdict,
    });
    (
        StageOutcome {
            verdict,
            packet: out,
            grant,
        },
        record,
    )
}
