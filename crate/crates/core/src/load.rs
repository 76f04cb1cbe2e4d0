// SPDX-License-Identifier: Apache-2.0
// Copyright The opp-engine Authors

//! Program document parsing, serialization and load-time validation.

use serde_json::Value;

use crate::error::{LoadError, LoadErrorKind};
use crate::field::FieldId;
use crate::key::ExtractorConfig;
use crate::program::{
    Action, EfsmEntry, EngineParams, Operand, PipelineConfig, StageConfig, StageKind, TableDefault,
    UpdateDst, FORMAT_VERSION, MAX_ALUS, MAX_CONDITIONS, MAX_FLOW_REGS, MAX_GLOBAL_REGS,
};

/// Renders a program as a pretty-printed JSON document.
pub fn serialize_pipeline(config: &PipelineConfig) -> String {
    serde_json::to_string_pretty(config).expect("pipeline configs always serialize")
}

/// Parses and validates a program document.
///
/// Stages and entries are decoded one at a time so that a malformed item
/// is reported with its stage and entry index.
pub fn parse_pipeline(text: &str) -> Result<PipelineConfig, LoadError> {
    let doc: Value = serde_json::from_str(text)
        .map_err(|e| LoadError::new(LoadErrorKind::Syntax(e.to_string())))?;
    let obj = doc
        .as_object()
        .ok_or_else(|| syntax("top level must be an object"))?;
    let version = obj
        .get("format_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| syntax("missing format_version"))?;
    if version != FORMAT_VERSION as u64 {
        return Err(LoadError::new(LoadErrorKind::Version(version as u32)));
    }
    let params: EngineParams = match obj.get("params") {
        Some(p) => decode(p.clone()).map_err(LoadError::new)?,
        None => EngineParams::default(),
    };
    let ports = decode(obj.get("ports").cloned().unwrap_or(Value::Array(vec![])))
        .map_err(LoadError::new)?;
    let raw_stages = obj
        .get("stages")
        .and_then(Value::as_array)
        .ok_or_else(|| syntax("missing stages array"))?;

    let mut stages = Vec::with_capacity(raw_stages.len());
    for (si, raw) in raw_stages.iter().enumerate() {
        let mut raw = raw.clone();
        let entries = match raw.as_object_mut().and_then(|o| o.remove("entries")) {
            Some(Value::Array(items)) => items,
            Some(_) => return Err(syntax("entries must be an array").at_stage(si)),
            None => Vec::new(),
        };
        let mut stage: StageConfig = decode(raw).map_err(|k| LoadError::new(k).at_stage(si))?;
        for (ei, item) in entries.into_iter().enumerate() {
            let entry: EfsmEntry = decode(item).map_err(|k| LoadError::new(k).at_entry(si, ei))?;
            stage.entries.push(entry);
        }
        stages.push(stage);
    }

    let config = PipelineConfig {
        format_version: FORMAT_VERSION,
        params,
        ports,
        stages,
    };
    validate(&config)?;
    Ok(config)
}

fn syntax(msg: &str) -> LoadError {
    LoadError::new(LoadErrorKind::Syntax(msg.to_string()))
}

fn decode<T: serde::de::DeserializeOwned>(v: Value) -> Result<T, LoadErrorKind> {
    serde_json::from_value(v).map_err(|e| LoadErrorKind::Syntax(e.to_string()))
}

/// Checks a program against the engine parameters and structural rules.
pub fn validate(config: &PipelineConfig) -> Result<(), LoadError> {
    let p = &config.params;
    check_param("k", p.k, MAX_FLOW_REGS)?;
    check_param("m", p.m, MAX_CONDITIONS)?;
    check_param("h", p.h, MAX_GLOBAL_REGS)?;
    check_param("alus", p.alus, MAX_ALUS)?;
    if p.n != 32 {
        return Err(LoadError::new(LoadErrorKind::MetadataWidth(p.n)));
    }
    let ports = config.port_count();
    let stage_count = config.stages.len();
    for (si, stage) in config.stages.iter().enumerate() {
        validate_stage(p, ports, stage_count, si, stage)?;
    }
    Ok(())
}

fn check_param(name: &'static str, value: usize, max: usize) -> Result<(), LoadError> {
    if value > max {
        return Err(LoadError::new(LoadErrorKind::Params { name, value, max }));
    }
    Ok(())
}

fn validate_stage(
    p: &EngineParams,
    ports: usize,
    stage_count: usize,
    si: usize,
    stage: &StageConfig,
) -> Result<(), LoadError> {
    let at = |k: LoadErrorKind| LoadError::new(k).at_stage(si);
    let stateless = stage.kind == StageKind::Stateless;

    match stage.kind {
        StageKind::Stateful => {
            let (Some(lookup), Some(update)) = (&stage.lookup, &stage.update) else {
                return Err(at(LoadErrorKind::MissingExtractor));
            };
            check_extractor(lookup).map_err(at)?;
            check_extractor(update).map_err(at)?;
        }
        StageKind::Stateless => {
            if stage.lookup.is_some() || stage.update.is_some() {
                return Err(at(LoadErrorKind::StatelessMisuse("declare key extractors")));
            }
            if !stage.conditions.is_empty() {
                return Err(at(LoadErrorKind::StatelessMisuse("declare conditions")));
            }
        }
    }

    if stage.conditions.len() > p.m {
        return Err(at(LoadErrorKind::TooManyConditions {
            count: stage.conditions.len(),
            max: p.m,
        }));
    }
    for c in &stage.conditions {
        check_operand(p, c.lhs).map_err(at)?;
        check_operand(p, c.rhs).map_err(at)?;
    }
    if stage.globals_init.len() > p.h {
        return Err(at(LoadErrorKind::GlobalRegister {
            index: stage.globals_init.len() as u8 - 1,
            h: p.h,
        }));
    }
    match stage.table_default {
        TableDefault::Goto(to) => check_jump(si, to, stage_count).map_err(at)?,
        TableDefault::Drop | TableDefault::GotoNext => {}
    }

    for (ei, entry) in stage.entries.iter().enumerate() {
        let at = |k: LoadErrorKind| LoadError::new(k).at_entry(si, ei);
        if stateless {
            if entry.state.is_some() {
                return Err(at(LoadErrorKind::StatelessMisuse("match on a state label")));
            }
            if entry.next_state.is_some() || !entry.updates.is_empty() {
                return Err(at(LoadErrorKind::StatelessMisuse("update state")));
            }
        }
        if let Some(hi) = entry.conds.highest_constrained() {
            if hi >= stage.conditions.len() {
                return Err(at(LoadErrorKind::UndeclaredCondition {
                    index: hi,
                    declared: stage.conditions.len(),
                }));
            }
        }
        if entry.updates.len() > p.alus {
            return Err(at(LoadErrorKind::AluBudget {
                count: entry.updates.len(),
                alus: p.alus,
            }));
        }
        for u in &entry.updates {
            match u.dst {
                UpdateDst::FlowReg(i) => {
                    check_flow_reg(p, i).map_err(at)?;
                    if entry.next_state.is_none() && !stateless {
                        return Err(at(LoadErrorKind::UncommittedRegisterWrite(i)));
                    }
                }
                UpdateDst::GlobalReg(i) => check_global(p, i).map_err(at)?,
                UpdateDst::Meta(_) => {}
            }
            for op in u.operands() {
                check_operand(p, op).map_err(at)?;
            }
        }
        for a in &entry.actions {
            check_action(p, ports, stage_count, si, a).map_err(at)?;
            if stateless {
                if let Action::SetFieldFrom { src, .. } | Action::SetMetaFrom { src, .. } = a {
                    if reads_flow_context(*src) {
                        return Err(at(LoadErrorKind::StatelessMisuse("read flow registers")));
                    }
                }
            }
        }
    }
    Ok(())
}

fn reads_flow_context(op: Operand) -> bool {
    matches!(op, Operand::FlowReg(_) | Operand::State)
}

fn check_extractor(ex: &ExtractorConfig) -> Result<(), LoadErrorKind> {
    if ex.bidirectional && !ex.is_symmetric() {
        return Err(LoadErrorKind::AsymmetricBidirectional);
    }
    Ok(())
}

fn check_flow_reg(p: &EngineParams, i: u8) -> Result<(), LoadErrorKind> {
    if i as usize >= p.k {
        return Err(LoadErrorKind::FlowRegister { index: i, k: p.k });
    }
    Ok(())
}

fn check_global(p: &EngineParams, i: u8) -> Result<(), LoadErrorKind> {
    if i as usize >= p.h {
        return Err(LoadErrorKind::GlobalRegister { index: i, h: p.h });
    }
    Ok(())
}

fn check_operand(p: &EngineParams, op: Operand) -> Result<(), LoadErrorKind> {
    match op {
        Operand::FlowReg(i) => check_flow_reg(p, i),
        Operand::GlobalReg(i) => check_global(p, i),
        Operand::Field(f) if f.bits() > 32 => Err(LoadErrorKind::WideOperand {
            field: f.to_string(),
        }),
        _ => Ok(()),
    }
}

fn check_jump(from: usize, to: usize, stage_count: usize) -> Result<(), LoadErrorKind> {
    if to <= from {
        return Err(LoadErrorKind::Cyclic { from, to });
    }
    if to >= stage_count {
        return Err(LoadErrorKind::MissingStage(to));
    }
    Ok(())
}

fn check_action(
    p: &EngineParams,
    ports: usize,
    stage_count: usize,
    si: usize,
    a: &Action,
) -> Result<(), LoadErrorKind> {
    match *a {
        Action::Output(port) if port as usize >= ports => {
            Err(LoadErrorKind::BadPort { port, count: ports })
        }
        Action::GotoStage(to) => check_jump(si, to, stage_count),
        Action::SetField { field, value } if value > field.max_value() => {
            Err(LoadErrorKind::ValueWidth {
                target: field.to_string(),
                value,
            })
        }
        Action::SetMeta { range, value } if value > range.value_mask() => {
            Err(LoadErrorKind::ValueWidth {
                target: FieldId::Meta(range).to_string(),
                value: value as u64,
            })
        }
        Action::SetFieldFrom { src, .. } | Action::SetMetaFrom { src, .. } => check_operand(p, src),
        _ => Ok(()),
    }
}
