// SPDX-License-Identifier: Apache-2.0
// Copyright The opp-engine Authors

use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::field::FieldId;

/// Virtual time in milliseconds. All timeout logic runs on packet
/// timestamps, never on the wall clock.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub fn from_secs(secs: u64) -> Self {
        Timestamp(secs * 1000)
    }

    pub fn from_millis(ms: u64) -> Self {
        Timestamp(ms)
    }

    pub fn millis(self) -> u64 {
        self.0
    }

    pub fn plus_millis(self, ms: u64) -> Self {
        Timestamp(self.0.saturating_add(ms))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:03}s", self.0 / 1000, self.0 % 1000)
    }
}

pub const ETH_TYPE_IPV4: u16 = 0x0800;
pub const PROTO_TCP: u8 = 6;
pub const PROTO_UDP: u8 = 17;

/// Parsed headers of one packet plus the metadata word that travels with
/// it through the pipeline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PacketView {
    pub in_port: u16,
    pub eth_src: u64,
    pub eth_dst: u64,
    pub eth_type: u16,
    pub ip_src: u32,
    pub ip_dst: u32,
    pub ip_proto: u8,
    pub l4_src: u16,
    pub l4_dst: u16,
    pub metadata: u32,
    pub arrival_seq: u64,
    pub ts: Timestamp,
    /// Original frame length; informational (benchmarks, pcap export).
    #[serde(default)]
    pub len: u16,
}

impl PacketView {
    /// A TCP/IPv4 packet between two endpoints.
    pub fn tcp(in_port: u16, src: (Ipv4Addr, u16), dst: (Ipv4Addr, u16), ts: Timestamp) -> Self {
        PacketView {
            in_port,
            eth_type: ETH_TYPE_IPV4,
            ip_src: src.0.into(),
            ip_dst: dst.0.into(),
            ip_proto: PROTO_TCP,
            l4_src: src.1,
            l4_dst: dst.1,
            ts,
            len: 64,
            ..Default::default()
        }
    }

    pub fn get(&self, field: FieldId) -> u64 {
        match field {
            FieldId::InPort => self.in_port as u64,
            FieldId::EthSrc => self.eth_src,
            FieldId::EthDst => self.eth_dst,
            FieldId::EthType => self.eth_type as u64,
            FieldId::IpSrc => self.ip_src as u64,
            FieldId::IpDst => self.ip_dst as u64,
            FieldId::IpProto => self.ip_proto as u64,
            FieldId::L4Src => self.l4_src as u64,
            FieldId::L4Dst => self.l4_dst as u64,
            FieldId::Meta(r) => r.extract(self.metadata) as u64,
        }
    }

    /// Writes `value` into `field`, truncated to the field width.
    pub fn set(&mut self, field: FieldId, value: u64) {
        let v = value & field.max_value();
        match field {
            FieldId::InPort => self.in_port = v as u16,
            FieldId::EthSrc => self.eth_src = v,
            FieldId::EthDst => self.eth_dst = v,
            FieldId::EthType => self.eth_type = v as u16,
            FieldId::IpSrc => self.ip_src = v as u32,
            FieldId::IpDst => self.ip_dst = v as u32,
            FieldId::IpProto => self.ip_proto = v as u8,
            FieldId::L4Src => self.l4_src = v as u16,
            FieldId::L4Dst => self.l4_dst = v as u16,
            FieldId::Meta(r) => self.metadata = r.insert(self.metadata, v as u32),
        }
    }

    pub fn src(&self) -> (Ipv4Addr, u16) {
        (Ipv4Addr::from(self.ip_src), self.l4_src)
    }

    pub fn dst(&self) -> (Ipv4Addr, u16) {
        (Ipv4Addr::from(self.ip_dst), self.l4_dst)
    }

    /// The same packet travelling the opposite way.
    pub fn reversed(&self) -> Self {
        PacketView {
            eth_src: self.eth_dst,
            eth_dst: self.eth_src,
            ip_src: self.ip_dst,
            ip_dst: self.ip_src,
            l4_src: self.l4_dst,
            l4_dst: self.l4_src,
            ..*self
        }
    }
}

impl fmt::Display for PacketView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (s, sp) = self.src();
        let (d, dp) = self.dst();
        write!(
            f,
            "port {} {s}:{sp} -> {d}:{dp} proto {} meta {:#010x} @{}",
            self.in_port, self.ip_proto, self.metadata, self.ts
        )
    }
}
