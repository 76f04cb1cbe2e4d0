// SPDX-License-Identifier: Apache-2.0
// Copyright The opp-engine Authors

//! Stateful match-action pipelines built from EFSM stages with per-flow
//! contexts, plus flow-steered execution across worker threads.

pub mod control;
pub mod error;
pub mod field;
pub mod globals;
pub mod key;
pub mod load;
pub mod packet;
pub mod parallel;
pub mod pipeline;
pub mod program;
pub mod stage;
pub mod steering;
pub mod table;

pub use control::ControlPlane;
pub use error::{FieldError, LoadError, LoadErrorKind, StateError};
pub use field::{FieldId, MetaRange};
pub use key::{canonicalize_key, ExtractorConfig, FlowKey};
pub use load::{parse_pipeline, serialize_pipeline, validate};
pub use packet::{PacketView, Timestamp};
pub use parallel::{dispatch, run_parallel, ParallelEngine, WorkerReport};
pub use pipeline::{Decision, ForwardingDecision, Pipeline, StateDump, StateWrite};
pub use program::{
    Action, AluOp, CondMatch, CondOp, Condition, EfsmEntry, EngineParams, FieldMatch, NextState,
    Operand, PipelineConfig, PortDecl, StageConfig, StageKind, TableDefault, UpdateDst,
    UpdateInstruction,
};
pub use stage::{Stage, StageStats, Verdict};
pub use steering::{derive_steering, Shardability, StageMode, SteeringKey, SteeringPlan};
pub use table::{ContextTable, FlowContext};
