// SPDX-License-Identifier: Apache-2.0
// Copyright The opp-engine Authors

//! Replays a packet stream through a flow-steered engine in chunks, runs
//! the controller between chunks, digests the outcome, and checks it
//! against serial execution.
//!
//! The oracle rebuilds the serial schedule the parallel run realized: each
//! worker's processing order, merged so that every stage's global-register
//! lock grants keep their order. Replaying that schedule on one worker must
//! reproduce every decision and the final state bit for bit. Packets that
//! touch no global register keep their relative input order, so outcomes
//! that do not depend on cross-flow ordering equal the plain input-order
//! run as well.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::time::Instant;

use opp_core::{
    derive_steering, ControlPlane, Decision, ExtractorConfig, FieldId, FlowKey, ForwardingDecision,
    LoadError, PacketView, ParallelEngine, Pipeline, PipelineConfig, StageMode, StageStats,
    StateDump, StateError, Timestamp,
};
use opp_iptables::{port_bucket_sync, PortBucket, SyncReport, Translation};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_SYNC_EVERY: usize = 1024;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("controller: {0}")]
    Control(#[from] StateError),
}

/// A pipeline plus the controller state that runs beside it.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub config: PipelineConfig,
    pub bucket: Option<PortBucket>,
}

impl Scenario {
    pub fn from_config(config: PipelineConfig) -> Scenario {
        Scenario {
            config,
            bucket: None,
        }
    }

    pub fn from_translation(t: &Translation) -> Scenario {
        Scenario {
            config: t.config.clone(),
            bucket: PortBucket::for_translation(t),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayOptions {
    pub workers: usize,
    pub batch: usize,
    pub hash_seed: u64,
    /// Packets between controller passes; 0 runs the stream as one chunk.
    pub sync_every: usize,
    pub trace: bool,
    /// Keep every flow's digest in the report, not just their combination.
    pub flow_digests: bool,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        ReplayOptions {
            workers: 1,
            batch: opp_core::steering::DEFAULT_BATCH,
            hash_seed: opp_core::steering::DEFAULT_HASH_SEED,
            sync_every: DEFAULT_SYNC_EVERY,
            trace: false,
            flow_digests: false,
        }
    }
}

impl ReplayOptions {
    pub fn with_workers(self, workers: usize) -> Self {
        ReplayOptions {
            workers: workers.max(1),
            ..self
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerRate {
    pub packets: usize,
    pub pps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub packets: usize,
    pub workers: usize,
    pub batch: usize,
    pub hash_seed: u64,
    pub steering: String,
    pub stage_modes: Vec<StageMode>,
    pub elapsed_secs: f64,
    pub pps: f64,
    pub per_worker: Vec<WorkerRate>,
    pub forwarded: usize,
    pub dropped: usize,
    /// Digest of the multiset of (flow, position in flow, output).
    pub verdict_digest: String,
    pub flows: usize,
    /// Digest over every flow's ordered output digest, by flow key.
    pub flow_order_digest: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub flow_digests: BTreeMap<String, String>,
    pub stages: Vec<StageStats>,
    pub state_digest: String,
    pub controller_passes: usize,
    pub ports_pushed: usize,
    pub ports_reclaimed: usize,
    pub exhausted_passes: usize,
    pub port_conflicts: usize,
}

/// Everything a replay produced.
#[derive(Debug)]
pub struct Run {
    pub report: RunReport,
    /// By input index.
    pub decisions: Vec<ForwardingDecision>,
    /// Global-register grants by input index.
    pub grants: Vec<Vec<(usize, u64)>>,
    /// Per chunk, per worker: input indices in processing order.
    pub schedule: Vec<Vec<Vec<usize>>>,
    pub syncs: Vec<SyncReport>,
    pub state: StateDump,
}

/// Identity of the connection a packet belongs to: its bidirectional
/// 4-tuple and protocol.
pub fn flow_extractor() -> ExtractorConfig {
    ExtractorConfig::bidirectional(vec![
        FieldId::IpProto,
        FieldId::IpSrc,
        FieldId::L4Src,
        FieldId::IpDst,
        FieldId::L4Dst,
    ])
}

/// What leaves the switch: the verdict and, for forwarded packets, the
/// rewritten headers.
fn wire_bytes(d: &ForwardingDecision, out: &mut Vec<u8>) {
    match d.verdict {
        Decision::Drop => out.push(0),
        Decision::Output(port) => {
            let p = &d.packet;
            out.push(1);
            out.extend_from_slice(&port.to_be_bytes());
            out.extend_from_slice(&p.eth_src.to_be_bytes()[2..]);
            out.extend_from_slice(&p.eth_dst.to_be_bytes()[2..]);
            out.extend_from_slice(&p.eth_type.to_be_bytes());
            out.extend_from_slice(&p.ip_src.to_be_bytes());
            out.extend_from_slice(&p.ip_dst.to_be_bytes());
            out.push(p.ip_proto);
            out.extend_from_slice(&p.l4_src.to_be_bytes());
            out.extend_from_slice(&p.l4_dst.to_be_bytes());
        }
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Input indices grouped by flow, each group in input order.
pub fn flows_of(packets: &[PacketView]) -> BTreeMap<FlowKey, Vec<usize>> {
    let ex = flow_extractor();
    let mut flows: BTreeMap<FlowKey, Vec<usize>> = BTreeMap::new();
    for (i, p) in packets.iter().enumerate() {
        flows.entry(ex.extract(p)).or_default().push(i);
    }
    flows
}

struct Digests {
    verdict: String,
    flow_order: String,
    per_flow: BTreeMap<String, String>,
    flows: usize,
}

fn digests(packets: &[PacketView], decisions: &[ForwardingDecision]) -> Digests {
    let flows = flows_of(packets);
    let mut entries = Vec::with_capacity(packets.len());
    let mut per_flow = BTreeMap::new();
    let mut order = Sha256::new();
    for (key, idx) in &flows {
        let mut seq = Vec::new();
        for (pos, &i) in idx.iter().enumerate() {
            let mut e = key.as_bytes().to_vec();
            e.extend_from_slice(&(pos as u64).to_be_bytes());
            wire_bytes(&decisions[i], &mut e);
            wire_bytes(&decisions[i], &mut seq);
            entries.push(e);
        }
        let d = hex_digest(&seq);
        order.update(key.as_bytes());
        order.update(d.as_bytes());
        per_flow.insert(key.to_hex(), d);
    }
    entries.sort_unstable();
    let mut multiset = Sha256::new();
    for e in &entries {
        multiset.update((e.len() as u32).to_be_bytes());
        multiset.update(e);
    }
    Digests {
        verdict: hex::encode(multiset.finalize()),
        flow_order: hex::encode(order.finalize()),
        flows: per_flow.len(),
        per_flow,
    }
}

fn control(
    ctl: &mut impl ControlPlane,
    bucket: &mut Option<PortBucket>,
    now: Timestamp,
) -> Result<Option<SyncReport>, StateError> {
    match bucket {
        Some(b) => port_bucket_sync(b, ctl, now).map(Some),
        None => {
            ctl.evict_expired(now);
            Ok(None)
        }
    }
}

fn chunks(n: usize, every: usize) -> Vec<std::ops::Range<usize>> {
    let step = if every == 0 { n.max(1) } else { every };
    (0..n).step_by(step).map(|s| s..(s + step).min(n)).collect()
}

fn build_pipeline(scn: &Scenario, trace: bool) -> Result<Pipeline, LoadError> {
    let mut pl = Pipeline::new(scn.config.clone())?;
    pl.set_tracing(trace);
    Ok(pl)
}

/// Runs `packets` with `opts.workers` workers. The controller runs once
/// before the first packet and after every chunk, at the timestamp of the
/// chunk's last packet.
pub fn replay(
    scn: &Scenario,
    packets: &[PacketView],
    opts: &ReplayOptions,
) -> Result<Run, ReplayError> {
    let plan = derive_steering(&scn.config)
        .with_workers(opts.workers)
        .with_batch(opts.batch)
        .with_seed(opts.hash_seed);
    let steering = plan.key.render();
    let mut engine = ParallelEngine::new(build_pipeline(scn, opts.trace)?, plan);
    let mut bucket = scn.bucket.clone();
    let mut syncs = Vec::new();
    let start_ts = packets.first().map_or(Timestamp(0), |p| p.ts);
    syncs.extend(control(&mut engine, &mut bucket, start_ts)?);

    let w = engine.workers();
    let mut decisions = Vec::with_capacity(packets.len());
    let mut grants = Vec::with_capacity(packets.len());
    let mut schedule = Vec::new();
    let mut per_worker = vec![0usize; w];
    let mut elapsed = 0.0;
    for range in chunks(packets.len(), opts.sync_every) {
        let base = range.start;
        let now = packets[range.end - 1].ts;
        let t0 = Instant::now();
        let r = engine.run(&packets[range]);
        elapsed += t0.elapsed().as_secs_f64();
        for (acc, n) in per_worker.iter_mut().zip(&r.processed) {
            *acc += n;
        }
        schedule.push(
            r.assignments
                .into_iter()
                .map(|l| l.into_iter().map(|i| i + base).collect())
                .collect(),
        );
        decisions.extend(r.decisions);
        grants.extend(r.grants);
        syncs.extend(control(&mut engine, &mut bucket, now)?);
    }
    let stats = engine.stats();
    let modes = engine.stage_modes().to_vec();
    let state = engine.into_pipeline().inspect_state();

    let dg = digests(packets, &decisions);
    let rate = |n: usize| {
        if elapsed > 0.0 {
            n as f64 / elapsed
        } else {
            0.0
        }
    };
    let forwarded = decisions
        .iter()
        .filter(|d| matches!(d.verdict, Decision::Output(_)))
        .count();
    let report = RunReport {
        packets: packets.len(),
        workers: w,
        batch: opts.batch,
        hash_seed: opts.hash_seed,
        steering,
        stage_modes: modes,
        elapsed_secs: elapsed,
        pps: rate(packets.len()),
        per_worker: per_worker
            .iter()
            .map(|&n| WorkerRate {
                packets: n,
                pps: rate(n),
            })
            .collect(),
        forwarded,
        dropped: packets.len() - forwarded,
        verdict_digest: dg.verdict,
        flows: dg.flows,
        flow_order_digest: dg.flow_order,
        flow_digests: if opts.flow_digests {
            dg.per_flow
        } else {
            BTreeMap::new()
        },
        stages: stats,
        state_digest: hex_digest(state.to_json().as_bytes()),
        controller_passes: syncs.len(),
        ports_pushed: syncs.iter().map(|s| s.pushed.len()).sum(),
        ports_reclaimed: syncs.iter().map(|s| s.reclaimed.len()).sum(),
        exhausted_passes: syncs.iter().filter(|s| s.exhausted).count(),
        port_conflicts: syncs.iter().map(|s| s.conflicts.len()).sum(),
    };
    Ok(Run {
        report,
        decisions,
        grants,
        schedule,
        syncs,
        state,
    })
}

/// Merges per-worker processing orders into one serial order that keeps
/// each worker's order and each stage's global-register grant order.
/// Ready packets are taken lowest input index first. `None` if the two
/// orders contradict each other.
pub fn linearize(workers: &[Vec<usize>], grants: &[Vec<(usize, u64)>]) -> Option<Vec<usize>> {
    let nodes: Vec<usize> = workers.iter().flatten().copied().collect();
    let mut succ: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut indeg: BTreeMap<usize, usize> = nodes.iter().map(|&i| (i, 0)).collect();
    let mut edge = |a: usize, b: usize, indeg: &mut BTreeMap<usize, usize>| {
        succ.entry(a).or_default().push(b);
        *indeg.get_mut(&b).expect("node") += 1;
    };
    for list in workers {
        for pair in list.windows(2) {
            edge(pair[0], pair[1], &mut indeg);
        }
    }
    let mut by_stage: BTreeMap<usize, Vec<(u64, usize)>> = BTreeMap::new();
    for &i in &nodes {
        for &(stage, n) in &grants[i] {
            by_stage.entry(stage).or_default().push((n, i));
        }
    }
    for order in by_stage.values_mut() {
        order.sort_unstable();
        for pair in order.windows(2) {
            if pair[0].1 != pair[1].1 {
                edge(pair[0].1, pair[1].1, &mut indeg);
            }
        }
    }
    let mut ready: BinaryHeap<Reverse<usize>> = indeg
        .iter()
        .filter(|(_, d)| **d == 0)
        .map(|(i, _)| Reverse(*i))
        .collect();
    let mut out = Vec::with_capacity(nodes.len());
    while let Some(Reverse(i)) = ready.pop() {
        out.push(i);
        for &j in succ.get(&i).map(Vec::as_slice).unwrap_or(&[]) {
            let d = indeg.get_mut(&j).expect("node");
            *d -= 1;
            if *d == 0 {
                ready.push(Reverse(j));
            }
        }
    }
    (out.len() == nodes.len()).then_some(out)
}

/// Single-worker run of `packets` in the given per-chunk orders, with the
/// controller at the same chunk boundaries as `replay`. Decisions come
/// back by input index.
pub fn replay_serial(
    scn: &Scenario,
    packets: &[PacketView],
    orders: &[Vec<usize>],
    opts: &ReplayOptions,
) -> Result<(Vec<ForwardingDecision>, StateDump), ReplayError> {
    let mut pl = build_pipeline(scn, opts.trace)?;
    let mut bucket = scn.bucket.clone();
    control(
        &mut pl,
        &mut bucket,
        packets.first().map_or(Timestamp(0), |p| p.ts),
    )?;
    let mut out: Vec<Option<ForwardingDecision>> = vec![None; packets.len()];
    for (range, order) in chunks(packets.len(), opts.sync_every)
        .into_iter()
        .zip(orders)
    {
        for &i in order {
            out[i] = Some(pl.process_packet(&packets[i]));
        }
        control(&mut pl, &mut bucket, packets[range.end - 1].ts)?;
    }
    let decisions = out
        .into_iter()
        .map(|d| d.expect("schedule covers every packet"))
        .collect();
    Ok((decisions, pl.inspect_state()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub expected: ForwardingDecision,
    pub actual: ForwardingDecision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub flow: String,
    /// Position within the flow of the first differing packet.
    pub position: usize,
    /// The flow's packets from the first difference on, at most 16.
    pub steps: Vec<Step>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub workers: usize,
    pub packets: usize,
    pub flows: usize,
    /// Every decision equals the serial replay of the realized schedule.
    pub decisions_equal: bool,
    /// Final contexts and globals equal the serial replay's.
    pub state_equal: bool,
    /// The realized schedule keeps every flow's packets in input order.
    pub flow_order_kept: bool,
    /// Worker order and grant order admit a serial schedule.
    pub serializable: bool,
    /// Packets the realized schedule moved relative to input order.
    pub reordered: usize,
    /// Flows whose outputs differ from the input-order single-worker run:
    /// outcomes that hinge on cross-flow ordering of global updates.
    pub order_dependent_flows: usize,
    pub first_divergence: Option<Divergence>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.serializable && self.flow_order_kept && self.decisions_equal && self.state_equal
    }
}

fn strip(d: &ForwardingDecision) -> ForwardingDecision {
    ForwardingDecision {
        trace: Vec::new(),
        ..d.clone()
    }
}

fn first_divergence(
    packets: &[PacketView],
    expected: &[ForwardingDecision],
    actual: &[ForwardingDecision],
) -> Option<Divergence> {
    let ex = flow_extractor();
    let flows = flows_of(packets);
    let mut best: Option<(usize, &FlowKey, usize)> = None;
    for (key, idx) in &flows {
        if let Some(pos) = idx
            .iter()
            .position(|&i| strip(&expected[i]) != strip(&actual[i]))
        {
            if best.is_none_or(|(first, _, _)| idx[pos] < first) {
                best = Some((idx[pos], key, pos));
            }
        }
    }
    let (_, key, pos) = best?;
    let steps = flows[key][pos..]
        .iter()
        .take(16)
        .map(|&i| Step {
            index: i,
            expected: strip(&expected[i]),
            actual: strip(&actual[i]),
        })
        .collect();
    Some(Divergence {
        flow: ex.render(key),
        position: pos,
        steps,
    })
}

fn divergent_flows(
    packets: &[PacketView],
    a: &[ForwardingDecision],
    b: &[ForwardingDecision],
) -> usize {
    flows_of(packets)
        .values()
        .filter(|idx| idx.iter().any(|&i| strip(&a[i]) != strip(&b[i])))
        .count()
}

/// Replays with `opts.workers` workers, then checks the run against the
/// serial replay of the schedule it realized.
pub fn replay_with_oracle(
    scn: &Scenario,
    packets: &[PacketView],
    opts: &ReplayOptions,
) -> Result<(Run, OracleReport), ReplayError> {
    let run = replay(scn, packets, opts)?;
    let serial_opts = ReplayOptions {
        trace: false,
        ..*opts
    };
    let mut orders = Vec::with_capacity(run.schedule.len());
    let mut serializable = true;
    for workers in &run.schedule {
        match linearize(workers, &run.grants) {
            Some(o) => orders.push(o),
            None => {
                serializable = false;
                orders.push(workers.iter().flatten().copied().collect());
            }
        }
    }
    let position: Vec<usize> = {
        let mut pos = vec![0; packets.len()];
        for (p, &i) in orders.iter().flatten().enumerate() {
            pos[i] = p;
        }
        pos
    };
    let flows = flows_of(packets);
    let flow_order_kept = flows
        .values()
        .all(|idx| idx.windows(2).all(|w| position[w[0]] < position[w[1]]));
    let reordered = position
        .iter()
        .enumerate()
        .filter(|(i, p)| *i != **p)
        .count();

    let (expected, state) = replay_serial(scn, packets, &orders, &serial_opts)?;
    let in_order: Vec<Vec<usize>> = chunks(packets.len(), opts.sync_every)
        .into_iter()
        .map(|r| r.collect())
        .collect();
    let (plain, _) = replay_serial(scn, packets, &in_order, &serial_opts)?;

    let first = first_divergence(packets, &expected, &run.decisions);
    let report = OracleReport {
        workers: run.report.workers,
        packets: packets.len(),
        flows: flows.len(),
        decisions_equal: first.is_none(),
        state_equal: state == run.state,
        flow_order_kept,
        serializable,
        reordered,
        order_dependent_flows: divergent_flows(packets, &plain, &run.decisions),
        first_divergence: first,
    };
    Ok((run, report))
}
