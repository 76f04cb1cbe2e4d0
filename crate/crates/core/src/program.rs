// SPDX-License-Identifier: Apache-2.0
// Copyright The opp-engine Authors

//! Pipeline program vocabulary: operands, conditions, EFSM entries, actions,
//! ALU instructions, stage and pipeline configurations.

use std::fmt;
use std::str::FromStr;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::FieldError;
use crate::field::{FieldId, MetaRange};
use crate::key::ExtractorConfig;

/// Version written into every serialized pipeline program.
pub const FORMAT_VERSION: u32 = 1;

/// Compile-time ceilings for the engine parameters.
pub const MAX_FLOW_REGS: usize = 8;
pub const MAX_GLOBAL_REGS: usize = 64;
pub const MAX_CONDITIONS: usize = 32;
pub const MAX_ALUS: usize = 64;

/// Something a condition or ALU instruction can read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Operand {
    Field(FieldId),
    FlowReg(u8),
    GlobalReg(u8),
    Const(u32),
    /// The state label of the flow context attached to the packet.
    State,
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Field(id) => write!(f, "{id}"),
            Operand::FlowReg(i) => write!(f, "R{i}"),
            Operand::GlobalReg(i) => write!(f, "G{i}"),
            Operand::Const(c) => write!(f, "#{c}"),
            Operand::State => f.write_str("state"),
        }
    }
}

impl FromStr for Operand {
    type Err = FieldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || FieldError::BadOperand(s.to_string());
        if s == "state" {
            return Ok(Operand::State);
        }
        if let Some(c) = s.strip_prefix('#') {
            let v = match c.strip_prefix("0x") {
                Some(hex) => u32::from_str_radix(hex, 16).map_err(|_| bad())?,
                None => c.parse::<u32>().map_err(|_| bad())?,
            };
            return Ok(Operand::Const(v));
        }
        for (prefix, ctor) in [
            ("R", Operand::FlowReg as fn(u8) -> Operand),
            ("G", Operand::GlobalReg),
        ] {
            if let Some(idx) = s.strip_prefix(prefix) {
                if !idx.is_empty() && idx.bytes().all(|b| b.is_ascii_digit()) {
                    return Ok(ctor(idx.parse().map_err(|_| bad())?));
                }
            }
        }
        if let Ok(v) = s.parse::<u32>() {
            return Ok(Operand::Const(v));
        }
        s.parse::<FieldId>().map(Operand::Field)
    }
}

impl Serialize for Operand {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Operand::Const(c) => s.serialize_u32(*c),
            other => s.collect_str(other),
        }
    }
}

impl<'de> Deserialize<'de> for Operand {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Operand;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an operand (field id, Rn, Gn, state, or a 32-bit constant)")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Operand, E> {
                u32::try_from(v)
                    .map(Operand::Const)
                    .map_err(|_| E::custom(format!("constant {v} exceeds 32 bits")))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Operand, E> {
                v.parse().map_err(E::custom)
            }
        }
        d.deserialize_any(V)
    }
}

/// Destination of an ALU instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UpdateDst {
    FlowReg(u8),
    GlobalReg(u8),
    Meta(MetaRange),
}

impl fmt::Display for UpdateDst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UpdateDst::FlowReg(i) => write!(f, "R{i}"),
            UpdateDst::GlobalReg(i) => write!(f, "G{i}"),
            UpdateDst::Meta(r) => write!(f, "{}", FieldId::Meta(*r)),
        }
    }
}

impl FromStr for UpdateDst {
    type Err = FieldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.parse::<Operand>()? {
            Operand::FlowReg(i) => Ok(UpdateDst::FlowReg(i)),
            Operand::GlobalReg(i) => Ok(UpdateDst::GlobalReg(i)),
            Operand::Field(FieldId::Meta(r)) => Ok(UpdateDst::Meta(r)),
            _ => Err(FieldError::BadOperand(s.to_string())),
        }
    }
}

impl Serialize for UpdateDst {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for UpdateDst {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CondOp {
    Gt,
    Lt,
    Eq,
}

impl CondOp {
    pub fn eval(self, lhs: u32, rhs: u32) -> bool {
        match self {
            CondOp::Gt => lhs > rhs,
            CondOp::Lt => lhs < rhs,
            CondOp::Eq => lhs == rhs,
        }
    }
}

/// `lhs op rhs` over unsigned 32-bit values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Condition {
    pub op: CondOp,
    pub lhs: Operand,
    pub rhs: Operand,
}

impl Condition {
    pub fn new(lhs: Operand, op: CondOp, rhs: Operand) -> Self {
        Condition { op, lhs, rhs }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AluOp {
    Add,
    Sub,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Mov,
}

impl AluOp {
    /// 32-bit wrapping arithmetic; shift amounts are taken modulo 32.
    pub fn apply(self, a: u32, b: u32) -> u32 {
        match self {
            AluOp::Add => a.wrapping_add(b),
            AluOp::Sub => a.wrapping_sub(b),
            AluOp::And => a & b,
            AluOp::Or => a | b,
            AluOp::Xor => a ^ b,
            AluOp::Shl => a.wrapping_shl(b),
            AluOp::Shr => a.wrapping_shr(b),
            AluOp::Mov => a,
        }
    }
}

/// One ALU instruction: `dst = src1 op src2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UpdateInstruction {
    pub dst: UpdateDst,
    pub op: AluOp,
    pub src1: Operand,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src2: Option<Operand>,
}

impl UpdateInstruction {
    pub fn mov(dst: UpdateDst, src: Operand) -> Self {
        UpdateInstruction {
            dst,
            op: AluOp::Mov,
            src1: src,
            src2: None,
        }
    }

    pub fn binary(dst: UpdateDst, op: AluOp, src1: Operand, src2: Operand) -> Self {
        UpdateInstruction {
            dst,
            op,
            src1,
            src2: Some(src2),
        }
    }

    pub fn operands(&self) -> impl Iterator<Item = Operand> {
        std::iter::once(self.src1).chain(self.src2)
    }
}

/// Per-condition requirement in an EFSM entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum CondReq {
    MustTrue,
    MustFalse,
    #[default]
    DontCare,
}

/// Ternary requirements over the condition vector, rendered as a string of
/// `1`, `0` and `*` (condition 0 first). Trailing don't-cares are
/// insignificant for equality.
#[derive(Clone, Debug, Default)]
pub struct CondMatch(pub Vec<CondReq>);

impl PartialEq for CondMatch {
    fn eq(&self, other: &Self) -> bool {
        self.significant() == other.significant()
    }
}

impl Eq for CondMatch {}

impl std::hash::Hash for CondMatch {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.significant().hash(state);
    }
}

impl CondMatch {
    fn significant(&self) -> &[CondReq] {
        let end = self.highest_constrained().map_or(0, |i| i + 1);
        &self.0[..end]
    }

    pub fn any() -> Self {
        CondMatch(Vec::new())
    }

    /// `(care_mask, value)` over the condition bit vector.
    pub fn masks(&self) -> (u32, u32) {
        let mut care = 0;
        let mut value = 0;
        for (i, r) in self.0.iter().enumerate() {
            match r {
                CondReq::MustTrue => {
                    care |= 1 << i;
                    value |= 1 << i;
                }
                CondReq::MustFalse => care |= 1 << i,
                CondReq::DontCare => {}
            }
        }
        (care, value)
    }

    /// Highest condition index that is not don't-care.
    pub fn highest_constrained(&self) -> Option<usize> {
        self.0.iter().rposition(|r| *r != CondReq::DontCare)
    }
}

impl fmt::Display for CondMatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.0 {
            f.write_str(match r {
                CondReq::MustTrue => "1",
                CondReq::MustFalse => "0",
                CondReq::DontCare => "*",
            })?;
        }
        Ok(())
    }
}

impl FromStr for CondMatch {
    type Err = FieldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.chars()
            .map(|c| match c {
                '1' => Ok(CondReq::MustTrue),
                '0' => Ok(CondReq::MustFalse),
                '*' | 'x' | 'X' | '-' => Ok(CondReq::DontCare),
                _ => Err(FieldError::BadOperand(s.to_string())),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(CondMatch)
    }
}

impl Serialize for CondMatch {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CondMatch {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(de::Error::custom)
    }
}

/// Value written in a field's natural notation in documents
/// (`"10.0.0.2"`, `"0x1"`, `80`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
enum ValueRepr {
    Num(u64),
    Text(String),
}

impl ValueRepr {
    fn of(field: FieldId, v: u64) -> Self {
        match field {
            FieldId::IpSrc
            | FieldId::IpDst
            | FieldId::EthSrc
            | FieldId::EthDst
            | FieldId::EthType
            | FieldId::Meta(_) => ValueRepr::Text(field.format_value(v)),
            _ => ValueRepr::Num(v),
        }
    }

    fn parse(&self, field: FieldId) -> Result<u64, FieldError> {
        match self {
            ValueRepr::Num(v) if *v <= field.max_value() => Ok(*v),
            ValueRepr::Num(v) => Err(FieldError::ValueTooWide {
                field: field.to_string(),
                value: *v,
            }),
            ValueRepr::Text(t) => field.parse_value(t),
        }
    }
}

/// Ternary match on one header field or metadata range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "FieldMatchRepr", into = "FieldMatchRepr")]
pub struct FieldMatch {
    pub field: FieldId,
    pub value: u64,
    pub mask: u64,
}

impl FieldMatch {
    pub fn exact(field: FieldId, value: u64) -> Self {
        FieldMatch {
            field,
            value: value & field.max_value(),
            mask: field.max_value(),
        }
    }

    pub fn masked(field: FieldId, value: u64, mask: u64) -> Self {
        FieldMatch {
            field,
            value: value & mask,
            mask,
        }
    }

    /// IPv4 prefix match.
    pub fn prefix(field: FieldId, addr: u32, len: u8) -> Self {
        let mask = if len == 0 {
            0
        } else {
            u32::MAX << (32 - len as u32)
        };
        Self::masked(field, (addr & mask) as u64, mask as u64)
    }

    pub fn matches(&self, value: u64) -> bool {
        value & self.mask == self.value & self.mask
    }
}

#[derive(Serialize, Deserialize)]
struct FieldMatchRepr {
    field: FieldId,
    value: ValueRepr,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<ValueRepr>,
}

impl From<FieldMatch> for FieldMatchRepr {
    fn from(m: FieldMatch) -> Self {
        FieldMatchRepr {
            field: m.field,
            value: ValueRepr::of(m.field, m.value),
            mask: (m.mask != m.field.max_value()).then(|| ValueRepr::of(m.field, m.mask)),
        }
    }
}

impl TryFrom<FieldMatchRepr> for FieldMatch {
    type Error = FieldError;

    fn try_from(r: FieldMatchRepr) -> Result<Self, Self::Error> {
        let value = r.value.parse(r.field)?;
        let mask = match r.mask {
            Some(m) => m.parse(r.field)?,
            None => r.field.max_value(),
        };
        Ok(FieldMatch::masked(r.field, value, mask))
    }
}

/// OpenFlow-like action applied to the packet copy, in list order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "ActionRepr", into = "ActionRepr")]
pub enum Action {
    Output(u16),
    Drop,
    SetField {
        field: FieldId,
        value: u64,
    },
    /// Copies a register, field or metadata range into a header field.
    SetFieldFrom {
        field: FieldId,
        src: Operand,
    },
    SetMeta {
        range: MetaRange,
        value: u32,
    },
    SetMetaFrom {
        range: MetaRange,
        src: Operand,
    },
    GotoStage(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ActionRepr {
    Output { port: u16 },
    Drop,
    SetField { field: FieldId, value: ValueRepr },
    SetFieldFrom { field: FieldId, src: Operand },
    SetMeta { range: MetaRange, value: ValueRepr },
    SetMetaFrom { range: MetaRange, src: Operand },
    GotoStage { stage: usize },
}

impl From<Action> for ActionRepr {
    fn from(a: Action) -> Self {
        match a {
            Action::Output(port) => ActionRepr::Output { port },
            Action::Drop => ActionRepr::Drop,
            Action::SetField { field, value } => ActionRepr::SetField {
                field,
                value: ValueRepr::of(field, value),
            },
            Action::SetFieldFrom { field, src } => ActionRepr::SetFieldFrom { field, src },
            Action::SetMeta { range, value } => ActionRepr::SetMeta {
                range,
                value: ValueRepr::of(FieldId::Meta(range), value as u64),
            },
            Action::SetMetaFrom { range, src } => ActionRepr::SetMetaFrom { range, src },
            Action::GotoStage(stage) => ActionRepr::GotoStage { stage },
        }
    }
}

impl TryFrom<ActionRepr> for Action {
    type Error = FieldError;

    fn try_from(r: ActionRepr) -> Result<Self, Self::Error> {
        Ok(match r {
            ActionRepr::Output { port } => Action::Output(port),
            ActionRepr::Drop => Action::Drop,
            ActionRepr::SetField { field, value } => Action::SetField {
                field,
                value: value.parse(field)?,
            },
            ActionRepr::SetFieldFrom { field, src } => Action::SetFieldFrom { field, src },
            ActionRepr::SetMeta { range, value } => Action::SetMeta {
                range,
                value: value.parse(FieldId::Meta(range))? as u32,
            },
            ActionRepr::SetMetaFrom { range, src } => Action::SetMetaFrom { range, src },
            ActionRepr::GotoStage { stage } => Action::GotoStage(stage),
        })
    }
}

/// Ternary match over the 16-bit state label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateMatch {
    pub value: u16,
    #[serde(default = "full_state_mask")]
    pub mask: u16,
}

fn full_state_mask() -> u16 {
    u16::MAX
}

impl StateMatch {
    pub fn exact(value: u16) -> Self {
        StateMatch {
            value,
            mask: u16::MAX,
        }
    }

    pub fn matches(&self, state: u16) -> bool {
        state & self.mask == self.value & self.mask
    }
}

/// The SET_STATE part of an entry: label plus timeouts for the context.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NextState {
    pub label: u16,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idle_timeout_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hard_timeout_ms: Option<u64>,
}

impl NextState {
    pub fn label(label: u16) -> Self {
        NextState {
            label,
            idle_timeout_ms: None,
            hard_timeout_ms: None,
        }
    }

    pub fn with_idle(label: u16, idle_ms: u64) -> Self {
        NextState {
            label,
            idle_timeout_ms: Some(idle_ms),
            hard_timeout_ms: None,
        }
    }
}

/// One EFSM transition.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EfsmEntry {
    /// Lower value wins; ties go to the earlier entry.
    #[serde(default)]
    pub priority: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<StateMatch>,
    #[serde(default, skip_serializing_if = "cond_any")]
    pub conds: CondMatch,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldMatch>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub actions: Vec<Action>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_state: Option<NextState>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub updates: Vec<UpdateInstruction>,
    /// Free-form provenance label (which frontend construct emitted it).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

fn cond_any(c: &CondMatch) -> bool {
    c.highest_constrained().is_none()
}

impl EfsmEntry {
    pub fn new(priority: u32) -> Self {
        EfsmEntry {
            priority,
            ..Default::default()
        }
    }

    pub fn in_state(mut self, label: u16) -> Self {
        self.state = Some(StateMatch::exact(label));
        self
    }

    pub fn when(mut self, conds: &str) -> Self {
        self.conds = conds.parse().expect("condition pattern");
        self
    }

    pub fn matching(mut self, m: FieldMatch) -> Self {
        self.fields.push(m);
        self
    }

    pub fn action(mut self, a: Action) -> Self {
        self.actions.push(a);
        self
    }

    pub fn set_state(mut self, next: NextState) -> Self {
        self.next_state = Some(next);
        self
    }

    pub fn update(mut self, u: UpdateInstruction) -> Self {
        self.updates.push(u);
        self
    }

    pub fn tagged(mut self, tag: &str) -> Self {
        self.tag = Some(tag.to_string());
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Stateful,
    Stateless,
}

/// What a stage does with a packet that matches no EFSM entry.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableDefault {
    #[default]
    Drop,
    GotoNext,
    /// Skip to a named later stage.
    Goto(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub kind: StageKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lookup: Option<ExtractorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub update: Option<ExtractorConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub conditions: Vec<Condition>,
    #[serde(default)]
    pub entries: Vec<EfsmEntry>,
    #[serde(default)]
    pub table_default: TableDefault,
    /// Maximum live contexts; defaults to [`DEFAULT_TABLE_CAPACITY`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<usize>,
    /// Initial values of the stage's global registers.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub globals_init: Vec<u32>,
}

pub const DEFAULT_TABLE_CAPACITY: usize = 16 * 1024;

impl StageConfig {
    pub fn stateless() -> Self {
        StageConfig {
            name: None,
            kind: StageKind::Stateless,
            lookup: None,
            update: None,
            conditions: Vec::new(),
            entries: Vec::new(),
            table_default: TableDefault::Drop,
            capacity: None,
            globals_init: Vec::new(),
        }
    }

    /// Stateful stage reading and writing through the same extractor.
    pub fn stateful(key: ExtractorConfig) -> Self {
        Self::cross_flow(key.clone(), key)
    }

    pub fn cross_flow(lookup: ExtractorConfig, update: ExtractorConfig) -> Self {
        StageConfig {
            kind: StageKind::Stateful,
            lookup: Some(lookup),
            update: Some(update),
            ..Self::stateless()
        }
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = Some(name.to_string());
        self
    }

    pub fn with_conditions(mut self, conds: Vec<Condition>) -> Self {
        self.conditions = conds;
        self
    }

    pub fn with_entries(mut self, entries: Vec<EfsmEntry>) -> Self {
        self.entries = entries;
        self
    }

    pub fn with_default(mut self, d: TableDefault) -> Self {
        self.table_default = d;
        self
    }

    pub fn capacity(&self) -> usize {
        self.capacity.unwrap_or(DEFAULT_TABLE_CAPACITY)
    }
}

/// Machine-model sizes. Defaults are the prototype's values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EngineParams {
    /// Flow context registers.
    pub k: usize,
    /// Conditions per stage.
    pub m: usize,
    /// Metadata bits carried between stages.
    pub n: usize,
    /// Global registers per stage.
    pub h: usize,
    /// ALU instructions per entry.
    pub alus: usize,
}

impl Default for EngineParams {
    fn default() -> Self {
        EngineParams {
            k: 4,
            m: 8,
            n: 32,
            h: 8,
            alus: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PortDecl {
    pub port: u16,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub name: String,
    /// Faces the untrusted/outside network; used by steering analysis.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub external: bool,
}

/// A whole device program.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub format_version: u32,
    #[serde(default)]
    pub params: EngineParams,
    pub ports: Vec<PortDecl>,
    pub stages: Vec<StageConfig>,
}

impl PipelineConfig {
    pub fn new(ports: Vec<PortDecl>, stages: Vec<StageConfig>) -> Self {
        PipelineConfig {
            format_version: FORMAT_VERSION,
            params: EngineParams::default(),
            ports,
            stages,
        }
    }

    /// Ports `0..count` with no names.
    pub fn with_port_count(count: u16, stages: Vec<StageConfig>) -> Self {
        Self::new(
            (0..count)
                .map(|port| PortDecl {
                    port,
                    name: String::new(),
                    external: false,
                })
                .collect(),
            stages,
        )
    }

    pub fn port_count(&self) -> usize {
        self.ports
            .iter()
            .map(|p| p.port as usize + 1)
            .max()
            .unwrap_or(0)
    }
}
