// SPDX-License-Identifier: Apache-2.0
// Copyright The opp-engine Authors

//! Seeded synthetic traffic: groups of flows with a direction pattern,
//! interleaved at random while each flow keeps its own packet order.

use std::collections::HashSet;
use std::net::Ipv4Addr;

use ipnet::Ipv4Net;
use opp_core::{PacketView, Timestamp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ETH_IPV4: u16 = 0x0800;
pub const PROTO_TCP: u8 = 6;
pub const PROTO_UDP: u8 = 17;

/// Bytes of Ethernet, 802.1Q, IPv4 and TCP headers: the smallest TCP frame
/// the pcap writer emits.
pub const TCP_FRAME_MIN: u16 = 14 + 4 + 20 + 20;
pub const UDP_FRAME_MIN: u16 = 14 + 4 + 20 + 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SizeModel {
    Fixed {
        bytes: u16,
    },
    Uniform {
        min: u16,
        max: u16,
    },
    /// 7:4:1 mix of 64, 576 and 1500 byte frames.
    Imix,
}

impl SizeModel {
    fn draw(&self, rng: &mut impl Rng) -> u16 {
        match *self {
            SizeModel::Fixed { bytes } => bytes,
            SizeModel::Uniform { min, max } => rng.gen_range(min.min(max)..=max.max(min)),
            SizeModel::Imix => match rng.gen_range(0..12) {
                0..=6 => 64,
                7..=10 => 576,
                _ => 1500,
            },
        }
    }
}

/// Virtual arrival times. Back-to-back traffic carries one timestamp for
/// every packet.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arrival {
    BackToBack,
    FixedRate { pps: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pattern {
    Unidirectional,
    /// Forward and reverse packets alternate, forward first.
    RequestReply,
    /// `handshake` alternating packets, then forward-only.
    HandshakeThenBurst {
        handshake: u32,
    },
}

impl Pattern {
    fn reverse_at(&self, i: u32) -> bool {
        match *self {
            Pattern::Unidirectional => false,
            Pattern::RequestReply => i % 2 == 1,
            Pattern::HandshakeThenBurst { handshake } => i < handshake && i % 2 == 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proto {
    Tcp,
    Udp,
}

impl Proto {
    pub fn number(self) -> u8 {
        match self {
            Proto::Tcp => PROTO_TCP,
            Proto::Udp => PROTO_UDP,
        }
    }

    fn frame_min(self) -> u16 {
        match self {
            Proto::Tcp => TCP_FRAME_MIN,
            Proto::Udp => UDP_FRAME_MIN,
        }
    }
}

/// Addresses drawn from `net` (network and broadcast addresses excluded
/// below /31) and ports from the inclusive range `ports`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pool {
    pub net: Ipv4Net,
    pub ports: (u16, u16),
}

impl Pool {
    pub fn new(net: &str, ports: (u16, u16)) -> Pool {
        Pool {
            net: net.parse().expect("pool prefix literal"),
            ports,
        }
    }

    fn addr_range(&self) -> (u32, u32) {
        let lo = u32::from(self.net.network());
        let hi = u32::from(self.net.broadcast());
        if self.net.prefix_len() < 31 {
            (lo + 1, hi - 1)
        } else {
            (lo, hi)
        }
    }

    fn size(&self) -> u64 {
        let (lo, hi) = self.addr_range();
        let (plo, phi) = self.ports;
        (hi as u64 - lo as u64 + 1) * (phi.saturating_sub(plo) as u64 + 1)
    }

    fn draw(&self, rng: &mut impl Rng) -> (Ipv4Addr, u16) {
        let (lo, hi) = self.addr_range();
        let (plo, phi) = self.ports;
        (
            Ipv4Addr::from(rng.gen_range(lo..=hi)),
            rng.gen_range(plo..=phi.max(plo)),
        )
    }
}

/// A set of flows sharing endpoints pools and a direction pattern. Forward
/// packets go client to server and enter on `client_port`; reverse packets
/// enter on `server_port` and by default swap the forward endpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowGroup {
    pub flows: usize,
    pub packets_per_flow: u32,
    pub pattern: Pattern,
    pub proto: Proto,
    pub client: Pool,
    pub server: Pool,
    pub client_port: u16,
    pub server_port: u16,
    /// Source of reverse packets when it is not the forward destination,
    /// e.g. the real server behind a virtual address. Drawn once per flow.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply_src: Option<Pool>,
    /// Destination of reverse packets when it is not the forward source,
    /// e.g. a translated public endpoint. Drawn once per flow.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply_dst: Option<Pool>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficSpec {
    pub groups: Vec<FlowGroup>,
    pub size: SizeModel,
    pub arrival: Arrival,
    #[serde(default)]
    pub start_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("group {group}: {flows} flows do not fit in {space} distinct client/server pairs")]
    TooManyFlows {
        group: usize,
        flows: usize,
        space: u64,
    },
    #[error("group {group}: port range {lo}-{hi} is empty")]
    EmptyPorts { group: usize, lo: u16, hi: u16 },
    #[error("a fixed rate of 0 packets per second")]
    ZeroRate,
}

impl TrafficSpec {
    pub fn check(&self) -> Result<(), SpecError> {
        if self.arrival == (Arrival::FixedRate { pps: 0 }) {
            return Err(SpecError::ZeroRate);
        }
        for (gi, g) in self.groups.iter().enumerate() {
            let pools = [
                Some(&g.client),
                Some(&g.server),
                g.reply_src.as_ref(),
                g.reply_dst.as_ref(),
            ];
            for p in pools.into_iter().flatten() {
                if p.ports.0 > p.ports.1 {
                    return Err(SpecError::EmptyPorts {
                        group: gi,
                        lo: p.ports.0,
                        hi: p.ports.1,
                    });
                }
            }
            let space = g.client.size().saturating_mul(g.server.size());
            if g.flows as u64 > space {
                return Err(SpecError::TooManyFlows {
                    group: gi,
                    flows: g.flows,
                    space,
                });
            }
        }
        Ok(())
    }

    pub fn total_packets(&self) -> usize {
        self.groups
            .iter()
            .map(|g| g.flows * g.packets_per_flow as usize)
            .sum()
    }

    /// One group of `flows` unidirectional TCP flows between two /16s.
    pub fn simple(flows: usize, packets_per_flow: u32, pattern: Pattern) -> TrafficSpec {
        TrafficSpec {
            groups: vec![FlowGroup {
                flows,
                packets_per_flow,
                pattern,
                proto: Proto::Tcp,
                client: Pool::new("10.1.0.0/16", (1024, 65535)),
                server: Pool::new("10.2.0.0/16", (1, 1023)),
                client_port: 0,
                server_port: 1,
                reply_src: None,
                reply_dst: None,
            }],
            size: SizeModel::Fixed { bytes: 64 },
            arrival: Arrival::BackToBack,
            start_ms: 0,
        }
    }
}

/// One generated flow: its forward endpoints and the endpoints its reverse
/// packets use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowPlan {
    pub group: usize,
    pub client: (Ipv4Addr, u16),
    pub server: (Ipv4Addr, u16),
    pub reply_src: (Ipv4Addr, u16),
    pub reply_dst: (Ipv4Addr, u16),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Traffic {
    pub packets: Vec<PacketView>,
    pub flows: Vec<FlowPlan>,
    /// Index into `flows` of every packet.
    pub flow_of: Vec<u32>,
}

fn mac_of(ip: Ipv4Addr) -> u64 {
    0x0200_0000_0000 | u32::from(ip) as u64
}

fn packet(
    in_port: u16,
    proto: Proto,
    src: (Ipv4Addr, u16),
    dst: (Ipv4Addr, u16),
    len: u16,
) -> PacketView {
    PacketView {
        in_port,
        eth_src: mac_of(src.0),
        eth_dst: mac_of(dst.0),
        eth_type: ETH_IPV4,
        ip_src: src.0.into(),
        ip_dst: dst.0.into(),
        ip_proto: proto.number(),
        l4_src: src.1,
        l4_dst: dst.1,
        len: len.max(proto.frame_min()),
        ..Default::default()
    }
}

/// Builds the packet stream of `spec`. Same spec and seed, same stream.
pub fn gen_traffic(spec: &TrafficSpec, seed: u64) -> Result<Traffic, SpecError> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut flows = Vec::new();
    for (gi, g) in spec.groups.iter().enumerate() {
        let mut seen = HashSet::with_capacity(g.flows);
        while seen.len() < g.flows {
            let client = g.client.draw(&mut rng);
            let server = g.server.draw(&mut rng);
            if !seen.insert((client, server)) {
                continue;
            }
            let reply_src = g.reply_src.as_ref().map_or(server, |p| p.draw(&mut rng));
            let reply_dst = g.reply_dst.as_ref().map_or(client, |p| p.draw(&mut rng));
            flows.push(FlowPlan {
                group: gi,
                client,
                server,
                reply_src,
                reply_dst,
            });
        }
    }

    let budget: Vec<u32> = flows
        .iter()
        .map(|f| spec.groups[f.group].packets_per_flow)
        .collect();
    let mut sent = vec![0u32; flows.len()];
    let mut active: Vec<u32> = (0..flows.len() as u32)
        .filter(|&f| budget[f as usize] > 0)
        .collect();
    let total = spec.total_packets();
    let mut packets = Vec::with_capacity(total);
    let mut flow_of = Vec::with_capacity(total);
    while !active.is_empty() {
        let slot = rng.gen_range(0..active.len());
        let f = active[slot] as usize;
        let plan = &flows[f];
        let g = &spec.groups[plan.group];
        let i = sent[f];
        let len = spec.size.draw(&mut rng);
        let mut p = if g.pattern.reverse_at(i) {
            packet(g.server_port, g.proto, plan.reply_src, plan.reply_dst, len)
        } else {
            packet(g.client_port, g.proto, plan.client, plan.server, len)
        };
        let n = packets.len() as u64;
        p.arrival_seq = n;
        p.ts = match spec.arrival {
            Arrival::BackToBack => Timestamp(spec.start_ms),
            Arrival::FixedRate { pps } => Timestamp(spec.start_ms + n * 1000 / pps),
        };
        packets.push(p);
        flow_of.push(f as u32);
        sent[f] += 1;
        if sent[f] == budget[f] {
            active.swap_remove(slot);
        }
    }
    Ok(Traffic {
        packets,
        flows,
        flow_of,
    })
}
