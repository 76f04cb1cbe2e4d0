// SPDX-License-Identifier: Apache-2.0
// Copyright The opp-engine Authors

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FieldError {
    #[error("unknown field id `{0}`")]
    UnknownField(String),
    #[error("metadata range [{hi}:{lo}] outside the 32-bit word")]
    BadMetaRange { hi: u8, lo: u8 },
    #[error("cannot parse `{value}` as a value of {field}")]
    BadValue { field: String, value: String },
    #[error("value {value:#x} does not fit {field}")]
    ValueTooWide { field: String, value: u64 },
    #[error("cannot parse operand `{0}`")]
    BadOperand(String),
}

/// Where in a pipeline program a load error was found.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Location {
    pub stage: Option<usize>,
    pub entry: Option<usize>,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.stage, self.entry) {
            (Some(s), Some(e)) => write!(f, "stage {s}, entry {e}"),
            (Some(s), None) => write!(f, "stage {s}"),
            _ => f.write_str("pipeline"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LoadErrorKind {
    #[error("malformed document: {0}")]
    Syntax(String),
    #[error("unsupported format_version {0}")]
    Version(u32),
    #[error("{0}")]
    Field(#[from] FieldError),
    #[error("entry exceeds ALU budget ({count} updates, {alus} ALUs)")]
    AluBudget { count: usize, alus: usize },
    #[error("pipeline must be acyclic (stage {from} jumps to stage {to})")]
    Cyclic { from: usize, to: usize },
    #[error("jump target stage {0} does not exist")]
    MissingStage(usize),
    #[error("{count} conditions exceed the limit of {max}")]
    TooManyConditions { count: usize, max: usize },
    #[error("condition requirement refers to condition {index}, stage declares {declared}")]
    UndeclaredCondition { index: usize, declared: usize },
    #[error("flow register R{index} out of range (k = {k})")]
    FlowRegister { index: u8, k: usize },
    #[error("global register G{index} out of range (h = {h})")]
    GlobalRegister { index: u8, h: usize },
    #[error("{field} is wider than 32 bits and cannot be an ALU or condition operand")]
    WideOperand { field: String },
    #[error("output port {port} not declared (port count {count})")]
    BadPort { port: u16, count: usize },
    #[error("stateful stage requires lookup and update extractors")]
    MissingExtractor,
    #[error("stateless stage cannot {0}")]
    StatelessMisuse(&'static str),
    #[error("bidirectional extractor needs symmetric address/port selectors")]
    AsymmetricBidirectional,
    #[error("engine parameter {name} = {value} unsupported (maximum {max})")]
    Params {
        name: &'static str,
        value: usize,
        max: usize,
    },
    #[error("metadata must be exactly 32 bits, got n = {0}")]
    MetadataWidth(usize),
    #[error("entry writes flow register R{0} but sets no next state, so the write would be lost")]
    UncommittedRegisterWrite(u8),
    #[error("value {value:#x} does not fit {target}")]
    ValueWidth { target: String, value: u64 },
}

/// Structured pipeline load error naming the offending stage and entry.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{location}: {kind}")]
pub struct LoadError {
    pub location: Location,
    pub kind: LoadErrorKind,
}

impl LoadError {
    pub fn new(kind: impl Into<LoadErrorKind>) -> Self {
        LoadError {
            location: Location::default(),
            kind: kind.into(),
        }
    }

    pub fn at_stage(mut self, stage: usize) -> Self {
        self.location.stage = Some(stage);
        self
    }

    pub fn at_entry(mut self, stage: usize, entry: usize) -> Self {
        self.location = Location {
            stage: Some(stage),
            entry: Some(entry),
        };
        self
    }
}

/// Errors from the control-plane state access path.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StateError {
    #[error("stage {0} does not exist")]
    NoSuchStage(usize),
    #[error("stage {0} is stateless")]
    Stateless(usize),
    #[error("state label {0} exceeds 16 bits")]
    LabelTooWide(u32),
    #[error("{given} registers given, stage has k = {k}")]
    TooManyRegisters { given: usize, k: usize },
    #[error("global register G{index} out of range (h = {h})")]
    GlobalRegister { index: usize, h: usize },
    #[error("key has {given} values, extractor has {expected} selectors")]
    KeyArity { given: usize, expected: usize },
    #[error("{0}")]
    Field(#[from] FieldError),
    #[error("stage {0} is sharded across workers; writes need a shared or single-worker table")]
    Sharded(usize),
    #[error("context table of stage {0} is full")]
    TableFull(usize),
}
