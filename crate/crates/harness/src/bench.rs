// SPDX-License-Identifier: Apache-2.0
// Copyright The opp-engine Authors

//! Throughput sweeps over synthetic N-stage pipelines. Rates use the wall
//! clock; everything the pipelines see runs on virtual time.

use std::fmt::Write as _;
use std::time::Instant;

use opp_core::{
    derive_steering, Action, AluOp, EfsmEntry, ExtractorConfig, FieldId, FieldMatch, NextState,
    Operand, PacketView, ParallelEngine, Pipeline, PipelineConfig, StageConfig, UpdateDst,
    UpdateInstruction,
};
use serde::{Deserialize, Serialize};

use crate::traffic::{gen_traffic, Pattern, TrafficSpec, ETH_IPV4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    /// Plain match-action stages.
    Stateless,
    /// Flow-keyed stages that commit on a flow's first packet only.
    Stateful,
    /// Flow-keyed stages where every packet performs a state update.
    EveryPacketUpdates,
}

impl BenchMode {
    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Stateless => "stateless",
            BenchMode::Stateful => "stateful",
            BenchMode::EveryPacketUpdates => "every-packet-updates",
        }
    }
}

fn hop(stage: usize, stages: usize) -> Action {
    if stage + 1 == stages {
        Action::Output(1)
    } else {
        Action::GotoStage(stage + 1)
    }
}

/// `stages` stages that forward IPv4 from port 0 to port 1. Stateful
/// stages key on the 4-tuple; a flow's first packet moves it to state 1
/// and, with `EveryPacketUpdates`, each later packet bumps a counter
/// register and commits.
pub fn bench_pipeline(mode: BenchMode, stages: usize) -> PipelineConfig {
    let stages = stages.max(1);
    let ipv4 = || FieldMatch::exact(FieldId::EthType, ETH_IPV4 as u64);
    let from0 = || FieldMatch::exact(FieldId::InPort, 0);
    let bump = || {
        UpdateInstruction::binary(
            UpdateDst::FlowReg(0),
            AluOp::Add,
            Operand::FlowReg(0),
            Operand::Const(1),
        )
    };
    let list = (0..stages)
        .map(|s| match mode {
            BenchMode::Stateless => StageConfig::stateless().with_entries(vec![EfsmEntry::new(0)
                .matching(ipv4())
                .matching(from0())
                .action(hop(s, stages))]),
            BenchMode::Stateful | BenchMode::EveryPacketUpdates => {
                let mut established = EfsmEntry::new(0)
                    .in_state(1)
                    .matching(ipv4())
                    .action(hop(s, stages));
                if mode == BenchMode::EveryPacketUpdates {
                    established = established.update(bump()).set_state(NextState::label(1));
                }
                StageConfig::stateful(ExtractorConfig::four_tuple()).with_entries(vec![
                    EfsmEntry::new(0)
                        .in_state(0)
                        .matching(ipv4())
                        .update(bump())
                        .set_state(NextState::label(1))
                        .action(hop(s, stages)),
                    established,
                ])
            }
        })
        .collect();
    PipelineConfig::with_port_count(2, list)
}

/// `packets` minimum-size packets spread over `flows` unidirectional flows.
pub fn bench_stream(packets: usize, flows: usize, seed: u64) -> Vec<PacketView> {
    if packets == 0 || flows == 0 {
        return Vec::new();
    }
    let per_flow = packets.div_ceil(flows) as u32;
    let spec = TrafficSpec::simple(flows, per_flow, Pattern::Unidirectional);
    let mut t = gen_traffic(&spec, seed)
        .expect("simple spec is valid")
        .packets;
    t.truncate(packets);
    t
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchOptions {
    /// Timed runs per point; the fastest counts.
    pub repeats: usize,
    /// Packets handed to the engine per call.
    pub chunk: usize,
    pub batch: usize,
    pub hash_seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            repeats: 3,
            chunk: 1 << 16,
            batch: opp_core::steering::DEFAULT_BATCH,
            hash_seed: opp_core::steering::DEFAULT_HASH_SEED,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub mode: BenchMode,
    pub stages: usize,
    pub workers: usize,
    pub packets: usize,
    pub forwarded: usize,
    pub secs: f64,
    pub pps: f64,
}

/// Best-of-`repeats` throughput of `config` over `packets`, each repeat on
/// fresh state.
pub fn measure(
    mode: BenchMode,
    stages: usize,
    config: &PipelineConfig,
    packets: &[PacketView],
    workers: usize,
    opts: &BenchOptions,
) -> BenchPoint {
    let mut best: Option<(f64, usize)> = None;
    for _ in 0..opts.repeats.max(1) {
        let plan = derive_steering(config)
            .with_workers(workers)
            .with_batch(opts.batch)
            .with_seed(opts.hash_seed);
        let mut engine = ParallelEngine::new(
            Pipeline::new(config.clone()).expect("bench pipelines validate"),
            plan,
        );
        let mut forwarded = 0;
        let t0 = Instant::now();
        for chunk in packets.chunks(opts.chunk.max(1)) {
            let r = engine.run(chunk);
            forwarded += r
                .decisions
                .iter()
                .filter(|d| d.verdict != opp_core::Decision::Drop)
                .count();
        }
        let secs = t0.elapsed().as_secs_f64();
        if best.is_none_or(|(b, _)| secs < b) {
            best = Some((secs, forwarded));
        }
    }
    let (secs, forwarded) = best.expect("at least one repeat");
    BenchPoint {
        mode,
        stages,
        workers,
        packets: packets.len(),
        forwarded,
        secs,
        pps: if packets.is_empty() || secs <= 0.0 {
            0.0
        } else {
            packets.len() as f64 / secs
        },
    }
}

/// Every (stage count, worker count) combination over one stream.
pub fn sweep(
    mode: BenchMode,
    stage_counts: &[usize],
    worker_counts: &[usize],
    packets: &[PacketView],
    opts: &BenchOptions,
) -> Vec<BenchPoint> {
    let mut out = Vec::new();
    for &n in stage_counts {
        let cfg = bench_pipeline(mode, n);
        for &w in worker_counts {
            out.push(measure(mode, n, &cfg, packets, w, opts));
        }
    }
    out
}

/// Tab-separated table, one row per point, with the speedup over the
/// single-worker point of the same mode and stage count.
pub fn table(points: &[BenchPoint]) -> String {
    let mut s = String::from("mode\tstages\tworkers\tpackets\tsecs\tmpps\tspeedup\n");
    for p in points {
        let base = points
            .iter()
            .find(|q| q.mode == p.mode && q.stages == p.stages && q.workers == 1)
            .map(|q| q.pps);
        let speedup = match base {
            Some(b) if b > 0.0 => format!("{:.2}", p.pps / b),
            _ => "-".to_string(),
        };
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{:.4}\t{:.3}\t{}",
            p.mode.name(),
            p.stages,
            p.workers,
            p.packets,
            p.secs,
            p.pps / 1e6,
            speedup
        );
    }
    s
}
