// SPDX-License-Identifier: Apache-2.0
// Copyright The opp-engine Authors

//! The three reference network functions, translated from the rule files
//! under `configs/`, and a traffic mix for each.

use std::str::FromStr;

use opp_iptables::{parse_rules, translate_with, Topology, TranslateOptions, Translation};
use serde::{Deserialize, Serialize};

use crate::replay::Scenario;
use crate::traffic::{Arrival, FlowGroup, Pattern, Pool, Proto, SizeModel, TrafficSpec};

pub const TOPOLOGY: &str = include_str!("../../../configs/topology.json");
pub const FIREWALL_RULES: &str = include_str!("../../../configs/firewall.rules");
pub const BALANCER_RULES: &str = include_str!("../../../configs/balancer.rules");
pub const NAT_RULES: &str = include_str!("../../../configs/nat.rules");
pub const COMBINED_RULES: &str = include_str!("../../../configs/combined.rules");

/// External port range the use-case NAT hands out.
pub const NAT_PORTS: (u16, u16) = (1000, 1127);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UseCase {
    Firewall,
    Balancer,
    Nat,
}

impl UseCase {
    pub const ALL: [UseCase; 3] = [UseCase::Firewall, UseCase::Balancer, UseCase::Nat];

    pub fn name(self) -> &'static str {
        match self {
            UseCase::Firewall => "firewall",
            UseCase::Balancer => "balancer",
            UseCase::Nat => "nat",
        }
    }

    pub fn rules(self) -> &'static str {
        match self {
            UseCase::Firewall => FIREWALL_RULES,
            UseCase::Balancer => BALANCER_RULES,
            UseCase::Nat => NAT_RULES,
        }
    }
}

impl FromStr for UseCase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "firewall" | "fw" => Ok(UseCase::Firewall),
            "balancer" | "lb" => Ok(UseCase::Balancer),
            "nat" => Ok(UseCase::Nat),
            other => Err(format!(
                "unknown use case `{other}` (firewall, balancer, nat)"
            )),
        }
    }
}

pub fn topology() -> Topology {
    Topology::from_json(TOPOLOGY).expect("bundled topology parses")
}

pub fn translate_rules(rules: &str, opts: &TranslateOptions) -> Translation {
    let parsed = parse_rules(rules).expect("bundled rules parse");
    translate_with(&parsed, &topology(), opts).expect("bundled rules translate")
}

pub fn translation(uc: UseCase) -> Translation {
    let opts = TranslateOptions {
        nat_ports: NAT_PORTS,
        ..Default::default()
    };
    translate_rules(uc.rules(), &opts)
}

pub fn scenario(uc: UseCase) -> Scenario {
    Scenario::from_translation(&translation(uc))
}

fn group(
    flows: usize,
    packets_per_flow: u32,
    pattern: Pattern,
    client: Pool,
    server: Pool,
    ports: (u16, u16),
) -> FlowGroup {
    FlowGroup {
        flows,
        packets_per_flow,
        pattern,
        proto: Proto::Tcp,
        client,
        server,
        client_port: ports.0,
        server_port: ports.1,
        reply_src: None,
        reply_dst: None,
    }
}

/// At least `packets` packets at 50 packets per virtual second, so flows
/// go quiet long enough for some contexts to idle out.
pub fn traffic_spec(uc: UseCase, packets: usize) -> TrafficSpec {
    let lan = || Pool::new("10.0.0.0/24", (1024, 65535));
    let scale = |base: usize| (base * packets).div_ceil(5000).max(1);
    let groups = match uc {
        UseCase::Firewall => {
            let dmz = || Pool::new("8.0.0.0/24", (1, 1023));
            vec![
                group(scale(100), 30, Pattern::RequestReply, lan(), dmz(), (2, 1)),
                group(
                    scale(50),
                    30,
                    Pattern::HandshakeThenBurst { handshake: 3 },
                    lan(),
                    dmz(),
                    (2, 1),
                ),
                group(scale(50), 10, Pattern::Unidirectional, dmz(), lan(), (1, 2)),
            ]
        }
        UseCase::Balancer => {
            let clients = || Pool::new("2.0.0.0/16", (1024, 65535));
            let mut web = group(
                scale(200),
                25,
                Pattern::RequestReply,
                clients(),
                Pool::new("1.0.0.1/32", (80, 80)),
                (0, 2),
            );
            web.reply_src = Some(Pool::new("10.0.0.2/31", (80, 80)));
            let other = group(
                scale(20),
                5,
                Pattern::Unidirectional,
                clients(),
                Pool::new("1.0.0.1/32", (443, 443)),
                (0, 2),
            );
            vec![web, other]
        }
        UseCase::Nat => {
            let remote = Pool::new("2.0.0.0/29", (80, 81));
            let mut out = group(scale(200), 25, Pattern::RequestReply, lan(), remote, (2, 0));
            out.reply_dst = Some(Pool {
                net: "1.0.0.1/32".parse().expect("literal"),
                ports: (NAT_PORTS.0, NAT_PORTS.0 + 15),
            });
            vec![out]
        }
    };
    TrafficSpec {
        groups,
        size: SizeModel::Imix,
        arrival: Arrival::FixedRate { pps: 50 },
        start_ms: 0,
    }
}
