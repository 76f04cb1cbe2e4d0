// SPDX-License-Identifier: Apache-2.0
// Copyright The opp-engine Authors

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::StateError;
use crate::key::FlowKey;
use crate::packet::{PacketView, Timestamp};
use crate::pipeline::{stage_state, ForwardingDecision, Pipeline, StateDump, StateWrite};
use crate::program::PipelineConfig;
use crate::stage::{Stage, StageStats, TableHandle};
use crate::steering::{StageMode, SteeringPlan};
use crate::table::{ContextTable, SharedTable};

/// Splits a batch into per-worker index lists. Each list keeps input order.
pub fn dispatch(batch: &[PacketView], plan: &SteeringPlan) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::with_capacity(batch.len() / plan.workers + 1); plan.workers];
    for (i, p) in batch.iter().enumerate() {
        out[plan.worker_of(p)].push(i);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerReport {
    /// Packets handled by each worker.
    pub processed: Vec<usize>,
    /// Input indices in the order each worker handled them.
    pub assignments: Vec<Vec<usize>>,
    /// One decision per input packet, by input index.
    pub decisions: Vec<ForwardingDecision>,
    /// Per-stage counters summed over workers.
    pub stats: Vec<StageStats>,
    /// Global-register lock grants of each input packet, by input index,
    /// as (stage, position in that stage's lock order).
    pub grants: Vec<Vec<(usize, u64)>>,
}

/// One logical pipeline executed by several workers.
#[derive(Debug)]
pub struct ParallelEngine {
    plan: SteeringPlan,
    config: PipelineConfig,
    modes: Vec<StageMode>,
    workers: Vec<Pipeline>,
}

impl ParallelEngine {
    /// Distributes `pipeline` over `plan.workers` workers. Sharded stages
    /// whose tables already hold contexts run shared instead.
    pub fn new(pipeline: Pipeline, plan: SteeringPlan) -> Self {
        let w = plan.workers.max(1);
        let tracing = pipeline.tracing();
        let (config, stages) = pipeline.into_parts();
        if w == 1 {
            let modes = stages
                .iter()
                .map(|s| {
                    if s.is_stateful() {
                        StageMode::Sharded
                    } else {
                        StageMode::Stateless
                    }
                })
                .collect();
            return ParallelEngine {
                plan,
                modes,
                workers: vec![Pipeline::from_stages(config.clone(), stages, tracing)],
                config,
            };
        }

        let mut modes = Vec::with_capacity(stages.len());
        let mut per_worker: Vec<Vec<Stage>> =
            (0..w).map(|_| Vec::with_capacity(stages.len())).collect();
        for (i, mut stage) in stages.into_iter().enumerate() {
            let capacity = stage.config().capacity();
            let planned = plan
                .stage_modes
                .get(i)
                .copied()
                .unwrap_or(StageMode::Shared);
            let mode = match (stage.is_stateful(), planned, stage.table()) {
                (false, _, _) => StageMode::Stateless,
                (true, StageMode::Sharded, TableHandle::Local(t)) if t.is_empty() => {
                    StageMode::Sharded
                }
                (true, _, _) => StageMode::Shared,
            };
            let stats = stage.take_stats();
            let table = stage.replace_table(TableHandle::None);
            let shared = match (mode, table) {
                (StageMode::Shared, TableHandle::Local(t)) => {
                    Some(Arc::new(SharedTable::from_table(t)))
                }
                (StageMode::Shared, TableHandle::Shared(t)) => Some(t),
                _ => None,
            };
            for (wi, stages) in per_worker.iter_mut().enumerate() {
                let handle = match mode {
                    StageMode::Stateless => TableHandle::None,
                    StageMode::Sharded => TableHandle::Local(ContextTable::new(capacity)),
                    StageMode::Shared => {
                        TableHandle::Shared(shared.clone().expect("shared table built above"))
                    }
                };
                let mut sib = stage.sibling(handle);
                if wi == 0 {
                    sib.merge_stats(&stats);
                }
                stages.push(sib);
            }
            modes.push(mode);
        }
        let workers = per_worker
            .into_iter()
            .map(|stages| Pipeline::from_stages(config.clone(), stages, tracing))
            .collect();
        ParallelEngine {
            plan,
            config,
            modes,
            workers,
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn plan(&self) -> &SteeringPlan {
        &self.plan
    }

    pub fn workers(&self) -> usize {
        self.workers.len()
    }

    pub fn stage_modes(&self) -> &[StageMode] {
        &self.modes
    }

    pub fn run(&mut self, packets: &[PacketView]) -> WorkerReport {
        let lists = if self.workers.len() == 1 {
            vec![(0..packets.len()).collect()]
        } else {
            dispatch(packets, &self.plan)
        };
        let batch = self.plan.batch.max(1);
        let mut results: Vec<Vec<Processed>> = if self.workers.len() == 1 {
            vec![run_worker(&mut self.workers[0], packets, &lists[0], batch)]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = self
                    .workers
                    .iter_mut()
                    .zip(&lists)
                    .map(|(w, list)| s.spawn(move || run_worker(w, packets, list, batch)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("worker panicked"))
                    .collect()
            })
        };
        let mut decisions: Vec<Option<ForwardingDecision>> = vec![None; packets.len()];
        let mut grants = vec![Vec::new(); packets.len()];
        for r in results.iter_mut() {
            for (i, d, g) in r.drain(..) {
                decisions[i] = Some(d);
                grants[i] = g;
            }
        }
        WorkerReport {
            processed: lists.iter().map(Vec::len).collect(),
            assignments: lists,
            decisions: decisions
                .into_iter()
                .map(|d| d.expect("every packet dispatched"))
                .collect(),
            stats: self.stats(),
            grants,
        }
    }

    pub fn stats(&self) -> Vec<StageStats> {
        let mut total = self.workers[0].stats();
        for w in &self.workers[1..] {
            for (t, s) in total.iter_mut().zip(w.stats()) {
                t.merge(&s);
            }
        }
        total
    }

    pub fn evict_expired(&mut self, now: Timestamp) -> usize {
        let mut n = 0;
        for (i, mode) in self.modes.iter().enumerate() {
            match mode {
                StageMode::Stateless => {}
                StageMode::Shared => {
                    n += self.workers[0]
                        .stage_mut(i)
                        .expect("stage")
                        .evict_expired(now)
                }
                StageMode::Sharded => {
                    for w in &mut self.workers {
                        n += w.stage_mut(i).expect("stage").evict_expired(now);
                    }
                }
            }
        }
        n
    }

    pub fn inspect_state(&self) -> StateDump {
        let k = self.config.params.k;
        let mut dump = self.workers[0].inspect_state();
        for (i, mode) in self.modes.iter().enumerate() {
            if *mode == StageMode::Sharded {
                for w in &self.workers[1..] {
                    dump.stages[i]
                        .contexts
                        .extend(stage_state(&w.stages()[i], k).contexts);
                }
                dump.stages[i]
                    .contexts
                    .sort_by(|a, b| a.key_hex.cmp(&b.key_hex));
            }
        }
        dump
    }

    fn writable(&self, stage: usize) -> Result<(), StateError> {
        if self.workers.len() > 1 && self.modes.get(stage) == Some(&StageMode::Sharded) {
            return Err(StateError::Sharded(stage));
        }
        Ok(())
    }

    pub fn write_state(
        &mut self,
        stage: usize,
        key: FlowKey,
        write: &StateWrite,
    ) -> Result<(), StateError> {
        self.writable(stage)?;
        self.workers[0].write_state(stage, key, write)
    }

    pub fn write_state_values(
        &mut self,
        stage: usize,
        values: &[u64],
        write: &StateWrite,
    ) -> Result<(), StateError> {
        self.writable(stage)?;
        self.workers[0].write_state_values(stage, values, write)
    }

    pub fn remove_state(&mut self, stage: usize, key: &FlowKey) -> Result<(), StateError> {
        self.writable(stage)?;
        self.workers[0].remove_state(stage, key).map(|_| ())
    }

    pub fn write_global(
        &mut self,
        stage: usize,
        index: usize,
        value: u32,
    ) -> Result<(), StateError> {
        self.workers[0].write_global(stage, index, value)
    }

    pub fn read_global(&self, stage: usize, index: usize) -> Option<u32> {
        self.workers[0].read_global(stage, index)
    }

    /// Merges the workers back into one single-owner pipeline.
    pub fn into_pipeline(self) -> Pipeline {
        let ParallelEngine {
            config,
            modes,
            workers,
            ..
        } = self;
        let tracing = workers[0].tracing();
        let mut worker_stages: Vec<std::vec::IntoIter<Stage>> = workers
            .into_iter()
            .map(|w| w.into_parts().1.into_iter())
            .collect();
        if worker_stages.len() == 1 {
            let stages = worker_stages.pop().expect("one worker").collect();
            return Pipeline::from_stages(config, stages, tracing);
        }
        let mut merged = Vec::with_capacity(modes.len());
        for (i, mode) in modes.iter().enumerate() {
            let mut copies: Vec<Stage> = worker_stages
                .iter_mut()
                .map(|it| it.next().expect("stage"))
                .collect();
            let mut stats = StageStats::new(copies[0].config().entries.len());
            for c in &mut copies {
                stats.merge(&c.take_stats());
            }
            let capacity = config.stages[i].capacity();
            let table = match mode {
                StageMode::Stateless => TableHandle::None,
                StageMode::Sharded => {
                    let mut t = ContextTable::new(capacity);
                    for c in &mut copies {
                        if let TableHandle::Local(mut shard) = c.replace_table(TableHandle::None) {
                            for (k, v) in shard.drain() {
                                t.install(k, v);
                            }
                        }
                    }
                    TableHandle::Local(t)
                }
                StageMode::Shared => {
                    let mut arc = None;
                    for c in &mut copies {
                        if let TableHandle::Shared(a) = c.replace_table(TableHandle::None) {
                            arc = Some(a);
                        }
                    }
                    let arc = arc.expect("shared table present");
                    let table = Arc::try_unwrap(arc)
                        .map(SharedTable::into_table)
                        .unwrap_or_else(|a| {
                            let mut t = ContextTable::new(capacity);
                            for (k, v) in a.snapshot() {
                                t.install(k, v);
                            }
                            t
                        });
                    TableHandle::Local(table)
                }
            };
            let mut stage = copies[0].sibling(table);
            stage.merge_stats(&stats);
            merged.push(stage);
        }
        Pipeline::from_stages(config, merged, tracing)
    }
}

type Processed = (usize, ForwardingDecision, Vec<(usize, u64)>);

fn run_worker(
    pipeline: &mut Pipeline,
    packets: &[PacketView],
    list: &[usize],
    batch: usize,
) -> Vec<Processed> {
    let mut out = Vec::with_capacity(list.len());
    for chunk in list.chunks(batch) {
        for &i in chunk {
            let d = pipeline.process_packet(&packets[i]);
            out.push((i, d, pipeline.last_grants().to_vec()));
        }
    }
    out
}

/// Runs `packets` through `pipeline` with `plan.workers` workers and hands
/// back the merged pipeline.
pub fn run_parallel(
    pipeline: Pipeline,
    packets: &[PacketView],
    plan: SteeringPlan,
) -> (WorkerReport, Pipeline) {
    let mut engine = ParallelEngine::new(pipeline, plan);
    let report = engine.run(packets);
    (report, engine.into_pipeline())
}
