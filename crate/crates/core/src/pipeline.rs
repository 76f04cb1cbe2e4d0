// SPDX-License-Identifier: Apache-2.0
// Copyright The opp-engine Authors

use serde::{Deserialize, Serialize};

use crate::error::{LoadError, StateError};
use crate::key::FlowKey;
use crate::load::{parse_pipeline, validate};
use crate::packet::{PacketView, Timestamp};
use crate::program::{PipelineConfig, StageKind, MAX_FLOW_REGS};
use crate::stage::{Stage, StageStats, StageTrace, Verdict};
use crate::table::FlowContext;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Output(u16),
    Drop,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardingDecision {
    pub verdict: Decision,
    pub packet: PacketView,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<StageTrace>,
}

/// A context as shown in a state dump.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextRecord {
    pub key: String,
    pub key_hex: String,
    pub state: u16,
    pub regs: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idle_timeout_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hard_timeout_ms: Option<u64>,
    pub last_seen: Timestamp,
    pub created_at: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageState {
    pub stage: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub kind: StageKind,
    pub contexts: Vec<ContextRecord>,
    pub globals: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateDump {
    pub stages: Vec<StageState>,
}

impl StateDump {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("state dumps always serialize")
    }
}

/// A controller write of one flow context.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateWrite {
    /// Checked against the 16-bit label width before installing.
    pub label: u32,
    #[serde(default)]
    pub regs: Vec<u32>,
    #[serde(default)]
    pub idle_timeout_ms: Option<u64>,
    #[serde(default)]
    pub hard_timeout_ms: Option<u64>,
    /// Stamped as both creation and last-access time.
    #[serde(default)]
    pub at: Timestamp,
}

impl StateWrite {
    pub fn label(label: u32) -> Self {
        StateWrite {
            label,
            ..Default::default()
        }
    }
}

pub(crate) fn stage_state(stage: &Stage, k: usize) -> StageState {
    let cfg = stage.config();
    let render = cfg.update.as_ref();
    let contexts = stage
        .contexts()
        .into_iter()
        .map(|(key, c)| ContextRecord {
            key: render.map_or_else(|| key.to_hex(), |ex| ex.render(&key)),
            key_hex: key.to_hex(),
            state: c.state,
            regs: c.regs[..k].to_vec(),
            idle_timeout_ms: c.idle_timeout_ms,
            hard_timeout_ms: c.hard_timeout_ms,
            last_seen: c.last_seen,
            created_at: c.created_at,
        })
        .collect();
    StageState {
        stage: stage.index(),
        name: cfg.name.clone(),
        kind: cfg.kind,
        contexts,
        globals: stage.globals().snapshot(),
    }
}

fn build_context(w: &StateWrite, k: usize) -> Result<FlowContext, StateError> {
    let state = u16::try_from(w.label).map_err(|_| StateError::LabelTooWide(w.label))?;
    if w.regs.len() > k {
        return Err(StateError::TooManyRegisters {
            given: w.regs.len(),
            k,
        });
    }
    let mut regs = [0; MAX_FLOW_REGS];
    regs[..w.regs.len()].copy_from_slice(&w.regs);
    Ok(FlowContext {
        state,
        regs,
        idle_timeout_ms: w.idle_timeout_ms,
        hard_timeout_ms: w.hard_timeout_ms,
        last_seen: w.at,
        created_at: w.at,
    })
}

/// A loaded, single-owner pipeline.
#[derive(Debug)]
pub struct Pipeline {
    config: PipelineConfig,
    stages: Vec<Stage>,
    tracing: bool,
    isolate_metadata: bool,
    grants: Vec<(usize, u64)>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self, LoadError> {
        validate(&config)?;
        let stages = config
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| Stage::new(i, s, &config.params))
            .collect();
        Ok(Pipeline {
            config,
            stages,
            tracing: false,
            isolate_metadata: false,
            grants: Vec::new(),
        })
    }

    pub fn from_document(text: &str) -> Result<Self, LoadError> {
        Self::new(parse_pipeline(text)?)
    }

    pub(crate) fn from_stages(config: PipelineConfig, stages: Vec<Stage>, tracing: bool) -> Self {
        Pipeline {
            config,
            stages,
            tracing,
            isolate_metadata: false,
            grants: Vec::new(),
        }
    }

    pub(crate) fn into_parts(self) -> (PipelineConfig, Vec<Stage>) {
        (self.config, self.stages)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn set_tracing(&mut self, on: bool) {
        self.tracing = on;
    }

    pub fn tracing(&self) -> bool {
        self.tracing
    }

    /// Clears the metadata word at every stage boundary. A diagnostic for
    /// checking that programs carry nothing between stages except metadata.
    pub fn set_metadata_isolation(&mut self, on: bool) {
        self.isolate_metadata = on;
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn stage_mut(&mut self, index: usize) -> Option<&mut Stage> {
        self.stages.get_mut(index)
    }

    pub fn process_packet(&mut self, pkt: &PacketView) -> ForwardingDecision {
        let mut packet = *pkt;
        let mut trace = Vec::new();
        let mut idx = 0;
        self.grants.clear();
        while idx < self.stages.len() {
            let (out, record) = self.stages[idx].process_traced(&packet, pkt.ts, self.tracing);
            trace.extend(record);
            if let Some(n) = out.grant {
                self.grants.push((idx, n));
            }
            packet = out.packet;
            match out.verdict {
                Verdict::Forward(port) => {
                    return ForwardingDecision {
                        verdict: Decision::Output(port),
                        packet,
                        trace,
                    }
                }
                Verdict::Drop => break,
                Verdict::Continue(next) => {
                    idx = next;
                    if self.isolate_metadata {
                        packet.metadata = 0;
                    }
                }
            }
        }
        ForwardingDecision {
            verdict: Decision::Drop,
            packet,
            trace,
        }
    }

    /// (stage, lock-order position) of every global-register access made
    /// by the last processed packet.
    pub fn last_grants(&self) -> &[(usize, u64)] {
        &self.grants
    }

    pub fn inspect_state(&self) -> StateDump {
        StateDump {
            stages: self
                .stages
                .iter()
                .map(|s| stage_state(s, self.config.params.k))
                .collect(),
        }
    }

    fn stateful_stage(&mut self, stage: usize) -> Result<&mut Stage, StateError> {
        let s = self
            .stages
            .get_mut(stage)
            .ok_or(StateError::NoSuchStage(stage))?;
        if !s.is_stateful() {
            return Err(StateError::Stateless(stage));
        }
        Ok(s)
    }

    pub fn write_state(
        &mut self,
        stage: usize,
        key: FlowKey,
        write: &StateWrite,
    ) -> Result<(), StateError> {
        let k = self.config.params.k;
        let s = self.stateful_stage(stage)?;
        let ctx = build_context(write, k)?;
        if s.install(key, ctx) {
            Ok(())
        } else {
            Err(StateError::TableFull(stage))
        }
    }

    /// Like [`Pipeline::write_state`] with the key given as one value per
    /// selector of the stage's update extractor.
    pub fn write_state_values(
        &mut self,
        stage: usize,
        values: &[u64],
        write: &StateWrite,
    ) -> Result<(), StateError> {
        let key = self.update_key(stage, values)?;
        self.write_state(stage, key, write)
    }

    pub fn update_key(&self, stage: usize, values: &[u64]) -> Result<FlowKey, StateError> {
        let s = self
            .stages
            .get(stage)
            .ok_or(StateError::NoSuchStage(stage))?;
        let ex = s
            .config()
            .update
            .as_ref()
            .ok_or(StateError::Stateless(stage))?;
        if values.len() != ex.selectors.len() {
            return Err(StateError::KeyArity {
                given: values.len(),
                expected: ex.selectors.len(),
            });
        }
        Ok(ex.key_from_values(values)?)
    }

    pub fn remove_state(
        &mut self,
        stage: usize,
        key: &FlowKey,
    ) -> Result<Option<FlowContext>, StateError> {
        Ok(self.stateful_stage(stage)?.remove(key))
    }

    pub fn write_global(
        &mut self,
        stage: usize,
        index: usize,
        value: u32,
    ) -> Result<(), StateError> {
        let h = self.config.params.h;
        let s = self
            .stages
            .get(stage)
            .ok_or(StateError::NoSuchStage(stage))?;
        if index >= h {
            return Err(StateError::GlobalRegister { index, h });
        }
        s.globals().set(index, value);
        Ok(())
    }

    pub fn read_global(&self, stage: usize, index: usize) -> Option<u32> {
        let s = self.stages.get(stage)?;
        (index < self.config.params.h).then(|| s.globals().get(index))
    }

    pub fn evict_expired(&mut self, now: Timestamp) -> usize {
        self.stages.iter_mut().map(|s| s.evict_expired(now)).sum()
    }

    pub fn stats(&self) -> Vec<StageStats> {
        self.stages.iter().map(|s| s.stats().clone()).collect()
    }
}

#[cfg(test)]
mod test {
    use super::*;
    use crate::field::{FieldId, MetaRange};
    use crate::key::ExtractorConfig;
    use crate::program::{Action, EfsmEntry, FieldMatch, NextState, StageConfig, TableDefault};
    use std::net::Ipv4Addr;

    fn pkt(port: u16, sp: u16) -> PacketView {
        PacketView::tcp(
            port,
            (Ipv4Addr::new(10, 0, 0, 2), sp),
            (Ipv4Addr::new(8, 0, 0, 5), 678),
            Timestamp(0),
        )
    }

    fn two_stage() -> PipelineConfig {
        let flag = MetaRange::new(3, 0).unwrap();
        PipelineConfig::with_port_count(
            3,
            vec![
                StageConfig::stateful(ExtractorConfig::bidirectional_four_tuple())
                    .with_entries(vec![EfsmEntry::new(0)
                        .in_state(0)
                        .set_state(NextState::label(2))
                        .action(Action::SetMeta {
                            range: flag,
                            value: 1,
                        })])
                    .with_default(TableDefault::GotoNext),
                StageConfig::stateless().with_entries(vec![
                    EfsmEntry::new(0)
                        .matching(FieldMatch::exact(FieldId::Meta(flag), 1))
                        .action(Action::Output(2)),
                    EfsmEntry::new(1).action(Action::Drop),
                ]),
            ],
        )
    }

    #[test]
    fn single_stateless_stage_decides() {
        let cfg = PipelineConfig::with_port_count(
            2,
            vec![StageConfig::stateless()
                .with_entries(vec![EfsmEntry::new(0).action(Action::Output(1))])],
        );
        let mut p = Pipeline::new(cfg).unwrap();
        assert_eq!(p.process_packet(&pkt(0, 1)).verdict, Decision::Output(1));
    }

    #[test]
    fn falling_off_the_end_drops() {
        let cfg = PipelineConfig::with_port_count(
            2,
            vec![
                StageConfig::stateless().with_entries(vec![EfsmEntry::new(0).action(
                    Action::SetField {
                        field: FieldId::L4Dst,
                        value: 1,
                    },
                )]),
            ],
        );
        let mut p = Pipeline::new(cfg).unwrap();
        let d = p.process_packet(&pkt(0, 1));
        assert_eq!(d.verdict, Decision::Drop);
        assert_eq!(d.packet.l4_dst, 1);
    }

    #[test]
    fn metadata_carries_the_decision() {
        let mut p = Pipeline::new(two_stage()).unwrap();
        p.set_tracing(true);
        let d = p.process_packet(&pkt(0, 1));
        assert_eq!(d.verdict, Decision::Output(2));
        assert_eq!(d.trace.len(), 2);
        assert_eq!(d.trace[0].state_out, Some(2));

        let mut isolated = Pipeline::new(two_stage()).unwrap();
        isolated.set_metadata_isolation(true);
        assert_eq!(isolated.process_packet(&pkt(0, 1)).verdict, Decision::Drop);
    }

    #[test]
    fn fresh_pipeline_has_empty_state() {
        let p = Pipeline::new(two_stage()).unwrap();
        let dump = p.inspect_state();
        assert!(dump.stages.iter().all(|s| s.contexts.is_empty()));
        assert!(dump
            .stages
            .iter()
            .all(|s| s.globals.iter().all(|g| *g == 0)));
    }

    #[test]
    fn write_then_inspect_is_identity() {
        let mut p = Pipeline::new(two_stage()).unwrap();
        let values = [0x0a00_0002, 123, 0x0800_0005, 678];
        let w = StateWrite {
            label: 444,
            regs: vec![1, 2],
            idle_timeout_ms: Some(20_000),
            hard_timeout_ms: None,
            at: Timestamp::from_secs(3),
        };
        p.write_state_values(0, &values, &w).unwrap();
        let dump = p.inspect_state();
        let rec = &dump.stages[0].contexts[0];
        assert_eq!(rec.state, 444);
        assert_eq!(rec.regs, vec![1, 2, 0, 0]);
        assert_eq!(
            rec.key,
            "ip_src=8.0.0.5,l4_src=678,ip_dst=10.0.0.2,l4_dst=123"
        );
        assert_eq!(rec.last_seen, Timestamp::from_secs(3));

        assert_eq!(
            p.write_state_values(0, &values, &StateWrite::label(70_000)),
            Err(StateError::LabelTooWide(70_000))
        );
        assert_eq!(
            p.write_state_values(1, &values, &w),
            Err(StateError::Stateless(1))
        );
        assert_eq!(
            p.write_state_values(5, &values, &w),
            Err(StateError::NoSuchStage(5))
        );
        assert!(matches!(
            p.write_state_values(0, &values[..2], &w),
            Err(StateError::KeyArity { .. })
        ));
    }

    #[test]
    fn dump_serializes() {
        let mut p = Pipeline::new(two_stage()).unwrap();
        p.process_packet(&pkt(0, 1));
        let json = p.inspect_state().to_json();
        let back: StateDump = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p.inspect_state());
    }
}
