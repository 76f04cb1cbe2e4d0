// SPDX-License-Identifier: Apache-2.0
// Copyright The opp-engine Authors

//! Which packets may run on different workers.
//!
//! A stage's table can be split across workers when any two packets that
//! reach it with equal lookup (or update) keys are always sent to the same
//! worker. That holds when the steering key is a function of each stage key.
//! Stages for which it fails keep one table shared by all workers.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::field::FieldId;
use crate::key::{ExtractorConfig, FlowKey};
use crate::packet::PacketView;
use crate::program::{Action, PipelineConfig, StageKind, TableDefault};

pub const DEFAULT_HASH_SEED: u64 = 0x9e37_79b9_7f4a_7c15;
pub const DEFAULT_BATCH: usize = 32;

const SRC_PAIR: [FieldId; 2] = [FieldId::IpSrc, FieldId::L4Src];
const DST_PAIR: [FieldId; 2] = [FieldId::IpDst, FieldId::L4Dst];

/// How a packet's steering key is formed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SteeringKey {
    Fields {
        selectors: Vec<FieldId>,
        bidirectional: bool,
    },
    /// The address/port pair of the outside host: the source pair of a
    /// packet entering on one of `ports`, the destination pair otherwise.
    /// Sound when outside hosts only ever send through external ports.
    External {
        ports: Vec<u16>,
    },
    Constant,
}

impl SteeringKey {
    fn fields(selectors: &[FieldId], bidirectional: bool) -> Self {
        SteeringKey::Fields {
            selectors: selectors.to_vec(),
            bidirectional,
        }
    }

    /// Fields the key reads for a packet arriving on `port`.
    fn required(&self, port: u16) -> Vec<FieldId> {
        match self {
            SteeringKey::Fields { selectors, .. } => selectors.clone(),
            SteeringKey::External { ports } if ports.contains(&port) => {
                vec![FieldId::InPort, SRC_PAIR[0], SRC_PAIR[1]]
            }
            SteeringKey::External { .. } => vec![FieldId::InPort, DST_PAIR[0], DST_PAIR[1]],
            SteeringKey::Constant => Vec::new(),
        }
    }

    fn info_bits(&self) -> u32 {
        match self {
            SteeringKey::Fields {
                selectors,
                bidirectional,
            } => selectors.iter().map(|f| f.bits() as u32).sum::<u32>() - *bidirectional as u32,
            SteeringKey::External { .. } => 48,
            SteeringKey::Constant => 0,
        }
    }

    /// Whether equal stage keys under `ex` imply equal steering keys for
    /// packets arriving on `port`, given fields rewritten upstream.
    fn determined_by(
        &self,
        ex: &ExtractorConfig,
        port: u16,
        rewritten: &BTreeSet<FieldId>,
    ) -> bool {
        let sel = &ex.selectors;
        let needs = |fs: &[FieldId]| fs.iter().all(|f| sel.contains(f) && !rewritten.contains(f));
        match self {
            SteeringKey::Constant => true,
            SteeringKey::Fields {
                selectors,
                bidirectional,
            } => (*bidirectional || !ex.bidirectional) && needs(selectors),
            SteeringKey::External { .. } => {
                let req = self.required(port);
                !rewritten.contains(&FieldId::InPort) && needs(&req[1..])
            }
        }
    }

    pub fn render(&self) -> String {
        match self {
            SteeringKey::Fields {
                selectors,
                bidirectional,
            } => {
                let names: Vec<String> = selectors.iter().map(|f| f.to_string()).collect();
                let dir = if *bidirectional { "bidirectional " } else { "" };
                format!("{dir}{{{}}}", names.join(","))
            }
            SteeringKey::External { ports } => {
                format!("external endpoint (external ports {ports:?})")
            }
            SteeringKey::Constant => "constant".to_string(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageMode {
    Stateless,
    /// Each worker owns a disjoint part of the table.
    Sharded,
    /// One table, with per-packet exclusive access to both keys' contexts.
    Shared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Shardability {
    FullyShardable,
    PartiallyShardable,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SteeringPlan {
    pub key: SteeringKey,
    pub stage_modes: Vec<StageMode>,
    pub shardability: Shardability,
    /// Stateful stages that cannot be sharded under `key`.
    pub shared_stages: Vec<usize>,
    /// Stages whose keys read metadata, which no header-derived key can
    /// determine.
    pub metadata_keyed: Vec<usize>,
    pub workers: usize,
    pub hash_seed: u64,
    pub batch: usize,
}

impl SteeringPlan {
    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.hash_seed = seed;
        self
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.batch = batch.max(1);
        self
    }

    pub fn steering_key(&self, pkt: &PacketView) -> FlowKey {
        match &self.key {
            SteeringKey::Fields {
                selectors,
                bidirectional,
            } => ExtractorConfig {
                selectors: selectors.clone(),
                bidirectional: *bidirectional,
            }
            .extract(pkt),
            SteeringKey::External { ports } => {
                let (ip, port) = if ports.contains(&pkt.in_port) {
                    (pkt.ip_src, pkt.l4_src)
                } else {
                    (pkt.ip_dst, pkt.l4_dst)
                };
                let mut b = [0u8; 6];
                b[..4].copy_from_slice(&ip.to_be_bytes());
                b[4..].copy_from_slice(&port.to_be_bytes());
                FlowKey::from_bytes(&b)
            }
            SteeringKey::Constant => FlowKey::default(),
        }
    }

    pub fn hash(&self, pkt: &PacketView) -> u64 {
        seeded_hash(self.hash_seed, self.steering_key(pkt).as_bytes())
    }

    pub fn worker_of(&self, pkt: &PacketView) -> usize {
        (self.hash(pkt) % self.workers as u64) as usize
    }
}

/// FNV-1a over the seed and the bytes, finished with the splitmix64 mixer.
pub fn seeded_hash(seed: u64, bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Input ports that can bring a packet to each stage.
pub fn stage_reachability(cfg: &PipelineConfig) -> Vec<BTreeSet<u16>> {
    let n = cfg.stages.len();
    let mut reach = vec![BTreeSet::new(); n];
    if n == 0 {
        return reach;
    }
    reach[0] = cfg.ports.iter().map(|p| p.port).collect();
    for s in 0..n {
        let here = reach[s].clone();
        if here.is_empty() {
            continue;
        }
        let stage = &cfg.stages[s];
        for e in &stage.entries {
            let ports: BTreeSet<u16> = here
                .iter()
                .copied()
                .filter(|p| {
                    e.fields
                        .iter()
                        .filter(|m| m.field == FieldId::InPort)
                        .all(|m| m.matches(*p as u64))
                })
                .collect();
            let mut goto = None;
            let mut terminal = false;
            for a in &e.actions {
                match a {
                    Action::Output(_) | Action::Drop => {
                        terminal = true;
                        break;
                    }
                    Action::GotoStage(t) => goto = Some(*t),
                    _ => {}
                }
            }
            if !terminal {
                let t = goto.unwrap_or(s + 1);
                if t < n {
                    reach[t].extend(ports);
                }
            }
        }
        let t = match stage.table_default {
            TableDefault::Drop => None,
            TableDefault::GotoNext => Some(s + 1),
            TableDefault::Goto(t) => Some(t),
        };
        if let Some(t) = t.filter(|t| *t < n) {
            reach[t].extend(here);
        }
    }
    reach
}

/// Header fields that some stage before `s` may rewrite, per stage.
fn rewritten_upstream(cfg: &PipelineConfig) -> Vec<BTreeSet<FieldId>> {
    let mut acc = BTreeSet::new();
    let mut out = Vec::with_capacity(cfg.stages.len());
    for stage in &cfg.stages {
        out.push(acc.clone());
        for e in &stage.entries {
            for a in &e.actions {
                if let Action::SetField { field, .. } | Action::SetFieldFrom { field, .. } = a {
                    acc.insert(*field);
                }
            }
        }
    }
    out
}

fn candidates(cfg: &PipelineConfig) -> Vec<SteeringKey> {
    use FieldId::*;
    let mut c = vec![
        SteeringKey::fields(&[IpSrc, L4Src, IpDst, L4Dst], true),
        SteeringKey::fields(&[IpSrc, L4Src, IpDst, L4Dst], false),
        SteeringKey::fields(&[IpSrc, IpDst], true),
        SteeringKey::fields(&SRC_PAIR, false),
        SteeringKey::fields(&DST_PAIR, false),
        SteeringKey::fields(&[IpSrc], false),
        SteeringKey::fields(&[IpDst], false),
    ];
    let external: Vec<u16> = cfg
        .ports
        .iter()
        .filter(|p| p.external)
        .map(|p| p.port)
        .collect();
    if !external.is_empty() {
        c.push(SteeringKey::External { ports: external });
    }
    for s in &cfg.stages {
        for ex in [&s.lookup, &s.update].into_iter().flatten() {
            if ex.uses_metadata() || ex.selectors.is_empty() {
                continue;
            }
            let k = SteeringKey::fields(&ex.selectors, ex.bidirectional);
            if !c.contains(&k) {
                c.push(k);
            }
        }
    }
    c
}

struct Coverage {
    stages: Vec<bool>,
    triples: usize,
}

fn coverage(
    key: &SteeringKey,
    cfg: &PipelineConfig,
    reach: &[BTreeSet<u16>],
    rewritten: &[BTreeSet<FieldId>],
) -> Coverage {
    let mut stages = Vec::with_capacity(cfg.stages.len());
    let mut triples = 0;
    for (s, stage) in cfg.stages.iter().enumerate() {
        if stage.kind == StageKind::Stateless {
            stages.push(true);
            continue;
        }
        let mut all = true;
        for ex in [&stage.lookup, &stage.update].into_iter().flatten() {
            for &port in &reach[s] {
                if key.determined_by(ex, port, &rewritten[s]) {
                    triples += 1;
                } else {
                    all = false;
                }
            }
        }
        stages.push(all);
    }
    Coverage { stages, triples }
}

/// Picks the steering key that lets the most stages run sharded, then
/// covers the most (stage, extractor, port) combinations, then spreads
/// flows most finely.
pub fn derive_steering(cfg: &PipelineConfig) -> SteeringPlan {
    let reach = stage_reachability(cfg);
    let rewritten = rewritten_upstream(cfg);
    let mut best: Option<(SteeringKey, Coverage, (usize, usize, u32))> = None;
    for key in candidates(cfg) {
        let cov = coverage(&key, cfg, &reach, &rewritten);
        let sharded = cov
            .stages
            .iter()
            .zip(&cfg.stages)
            .filter(|(ok, st)| **ok && st.kind == StageKind::Stateful)
            .count();
        let score = (sharded, cov.triples, key.info_bits());
        if best.as_ref().is_none_or(|(_, _, b)| score > *b) {
            best = Some((key, cov, score));
        }
    }
    let (key, cov, _) = best.expect("candidate list is never empty");

    let stage_modes: Vec<StageMode> = cfg
        .stages
        .iter()
        .zip(&cov.stages)
        .map(|(st, ok)| match (st.kind, ok) {
            (StageKind::Stateless, _) => StageMode::Stateless,
            (StageKind::Stateful, true) => StageMode::Sharded,
            (StageKind::Stateful, false) => StageMode::Shared,
        })
        .collect();
    let shared_stages: Vec<usize> = stage_modes
        .iter()
        .enumerate()
        .filter(|(_, m)| **m == StageMode::Shared)
        .map(|(i, _)| i)
        .collect();
    let metadata_keyed = cfg
        .stages
        .iter()
        .enumerate()
        .filter(|(_, st)| {
            [&st.lookup, &st.update]
                .into_iter()
                .flatten()
                .any(|e| e.uses_metadata())
        })
        .map(|(i, _)| i)
        .collect();
    SteeringPlan {
        key,
        stage_modes,
        shardability: if shared_stages.is_empty() {
            Shardability::FullyShardable
        } else {
            Shardability::PartiallyShardable
        },
        shared_stages,
        metadata_keyed,
        workers: 1,
        hash_seed: DEFAULT_HASH_SEED,
        batch: DEFAULT_BATCH,
    }
}
