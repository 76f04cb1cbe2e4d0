// SPDX-License-Identifier: Apache-2.0
// Copyright The opp-engine Authors

//! iptables front end: parses the supported rule subset and translates rule
//! sets into pipeline programs, plus the NAT port-bucket controller.

pub mod nat;
pub mod rule;

pub use rule::{
    parse_rule, parse_rules, Chain, Command, ConnStates, IptablesRule, Nth, ParseError,
    ParseErrorKind, RuleSet, Table, Target,
};
pub mod topology;
pub mod translate;

pub use nat::{port_bucket_sync, PortBucket, SyncReport};
pub use topology::{Interface, Topology, TopologyError};
pub use translate::{
    conntrack_template, translate, translate_with, Direction, Layout, NatPlan, TranslateError,
    TranslateOptions, Translation,
};
