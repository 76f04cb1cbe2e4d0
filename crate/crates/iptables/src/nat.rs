// SPDX-License-Identifier: Apache-2.0
// Copyright The opp-engine Authors

//! NAT port bucket and the periodic controller helper that keeps the
//! port-stack stage filled.
//!
//! The stack lives in the port-stack stage as contexts keyed by slot number
//! `1..=sp` whose label is the port; `sp` is the classify stage's G1. The
//! data path pops by reading G1 into the metadata and decrementing it.

use std::collections::{BTreeMap, BTreeSet};

use opp_core::{ControlPlane, ExtractorConfig, FlowKey, StateError, StateWrite, Timestamp};
use serde::{Deserialize, Serialize};

use crate::translate::{Translation, NAT_STORED, NAT_TRANSLATED, STACK_POINTER};

#[derive(Clone, Debug, PartialEq, Eq)]
struct NatStages {
    classify: usize,
    stack: usize,
    reverse: usize,
    rewrite: usize,
    stack_key: ExtractorConfig,
    reverse_key: ExtractorConfig,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PortBucket {
    range: (u16, u16),
    free: BTreeSet<u16>,
    in_use: BTreeMap<u16, FlowKey>,
    stages: NatStages,
    exhaustions: u64,
}

/// What one sync pass did.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncReport {
    /// Ports written onto the stack, in push order.
    pub pushed: Vec<u16>,
    /// Pushed ports that had been handed out before.
    pub reclaimed: Vec<u16>,
    pub stack_depth: u32,
    pub in_use: usize,
    /// The stack is empty: new outbound flows hit the classify stage's
    /// table default until ports come back.
    pub exhausted: bool,
    /// Ports claimed by more than one live translation.
    pub conflicts: Vec<u16>,
}

fn decode(ex: &ExtractorConfig, hex: &str) -> Option<Vec<u64>> {
    let key = FlowKey::from_hex(hex)?;
    Some(ex.decode(&key).into_iter().map(|(_, v)| v).collect())
}

impl PortBucket {
    /// `None` when the translation has no MASQUERADE rule.
    pub fn for_translation(t: &Translation) -> Option<PortBucket> {
        let nat = t.nat.as_ref()?;
        let l = &t.layout;
        let (classify, stack, reverse, rewrite) = (l.classify?, l.stack?, l.reverse?, l.rewrite?);
        let cfg = &t.config;
        Some(PortBucket {
            range: nat.ports,
            free: BTreeSet::new(),
            in_use: BTreeMap::new(),
            stages: NatStages {
                classify,
                stack,
                reverse,
                rewrite,
                stack_key: cfg.stages[stack].update.clone()?,
                reverse_key: cfg.stages[reverse].update.clone()?,
            },
            exhaustions: 0,
        })
    }

    pub fn range(&self) -> (u16, u16) {
        self.range
    }

    pub fn free(&self) -> &BTreeSet<u16> {
        &self.free
    }

    pub fn in_use(&self) -> &BTreeMap<u16, FlowKey> {
        &self.in_use
    }

    /// Sync passes that ended with an empty stack.
    pub fn exhaustions(&self) -> u64 {
        self.exhaustions
    }

    fn ports(&self) -> impl DoubleEndedIterator<Item = u16> {
        self.range.0..=self.range.1
    }
}

/// Evicts expired contexts, works out which ports live translations hold,
/// and pushes every other port of the range that is not already on the
/// stack. Ports are pushed highest first so the lowest pops first.
pub fn port_bucket_sync(
    bucket: &mut PortBucket,
    pl: &mut impl ControlPlane,
    now: Timestamp,
) -> Result<SyncReport, StateError> {
    let st = bucket.stages.clone();
    pl.evict_expired(now);
    let dump = pl.inspect_state();
    let sp = pl
        .read_global(st.classify, STACK_POINTER as usize)
        .ok_or(StateError::NoSuchStage(st.classify))?;

    let mut slots: BTreeMap<u64, u16> = BTreeMap::new();
    for c in &dump.stages[st.stack].contexts {
        if let Some(v) = decode(&st.stack_key, &c.key_hex) {
            slots.insert(v[0], c.state);
        }
    }
    let on_stack: BTreeSet<u16> = (1..=sp as u64)
        .filter_map(|s| slots.get(&s).copied())
        .collect();

    let mut owners: BTreeMap<u16, FlowKey> = BTreeMap::new();
    let mut conflicts = BTreeSet::new();
    for c in &dump.stages[st.rewrite].contexts {
        if c.state == NAT_TRANSLATED {
            let port = c.regs[0] as u16;
            let key = FlowKey::from_hex(&c.key_hex).unwrap_or_default();
            if owners.insert(port, key).is_some() {
                conflicts.insert(port);
            }
        }
    }
    let mut reverse_ports = BTreeSet::new();
    for c in &dump.stages[st.reverse].contexts {
        if c.state != NAT_STORED {
            continue;
        }
        if let Some(v) = decode(&st.reverse_key, &c.key_hex) {
            let port = v[2] as u16;
            if !reverse_ports.insert(port) {
                conflicts.insert(port);
            }
            owners
                .entry(port)
                .or_insert_with(|| FlowKey::from_hex(&c.key_hex).unwrap_or_default());
        }
    }

    let mut depth = sp;
    let mut pushed = Vec::new();
    let mut reclaimed = Vec::new();
    let candidates: Vec<u16> = bucket
        .ports()
        .rev()
        .filter(|p| !on_stack.contains(p) && !owners.contains_key(p))
        .collect();
    for port in candidates {
        depth += 1;
        pl.write_state_values(
            st.stack,
            &[depth as u64],
            &StateWrite {
                label: port as u32,
                at: now,
                ..Default::default()
            },
        )?;
        if bucket.in_use.contains_key(&port) || bucket.free.contains(&port) {
            reclaimed.push(port);
        }
        pushed.push(port);
    }
    if depth != sp {
        pl.write_global(st.classify, STACK_POINTER as usize, depth)?;
    }

    bucket.free = on_stack.into_iter().chain(pushed.iter().copied()).collect();
    bucket.in_use = owners;
    let exhausted = depth == 0;
    if exhausted {
        bucket.exhaustions += 1;
    }
    Ok(SyncReport {
        pushed,
        reclaimed,
        stack_depth: depth,
        in_use: bucket.in_use.len(),
        exhausted,
        conflicts: conflicts.into_iter().collect(),
    })
}
