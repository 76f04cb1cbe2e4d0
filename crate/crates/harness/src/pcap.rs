// SPDX-License-Identifier: Apache-2.0
// Copyright The opp-engine Authors

//! Classic pcap ingest and export. The ingress port of a packet travels in
//! an 802.1Q tag: the writer tags every frame with VLAN id = in_port and
//! the reader takes the port back from the tag, falling back to a default
//! for untagged frames.

use std::io::Write;
use std::path::Path;
use std::time::Duration;

use etherparse::{
    IpNumber, LinkExtSlice, LinkSlice, NetSlice, PacketBuilder, SlicedPacket, TransportSlice,
    VlanId,
};
use opp_core::{PacketView, Timestamp};
use pcap_file::pcap::{PcapHeader, PcapPacket, PcapParser, PcapWriter};
use pcap_file::DataLink;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::traffic::{ETH_IPV4, PROTO_TCP, PROTO_UDP};

#[derive(Debug, Error)]
pub enum PcapError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed capture at byte offset {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("link type {0} is not Ethernet")]
    LinkType(String),
    #[error("packet {index}: {reason}")]
    Unencodable { index: usize, reason: String },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestOptions {
    /// Ingress port of frames that carry no 802.1Q tag.
    pub default_port: u16,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Capture {
    pub views: Vec<PacketView>,
    /// Frames that are not IPv4.
    pub skipped: u64,
    /// Frames too short or too broken to parse.
    pub undecodable: u64,
}

fn mac(bytes: [u8; 6]) -> u64 {
    bytes.iter().fold(0u64, |acc, b| (acc << 8) | *b as u64)
}

fn mac_bytes(v: u64) -> [u8; 6] {
    let b = v.to_be_bytes();
    [b[2], b[3], b[4], b[5], b[6], b[7]]
}

enum Frame {
    View(PacketView),
    NotIpv4,
    Broken,
}

fn decode(data: &[u8], opts: &IngestOptions) -> Frame {
    let Ok(sliced) = SlicedPacket::from_ethernet(data) else {
        return Frame::Broken;
    };
    let Some(LinkSlice::Ethernet2(eth)) = &sliced.link else {
        return Frame::Broken;
    };
    let Some(NetSlice::Ipv4(ip)) = &sliced.net else {
        return Frame::NotIpv4;
    };
    let in_port = sliced
        .link_exts
        .iter()
        .find_map(|e| match e {
            LinkExtSlice::Vlan(v) => Some(v.vlan_identifier().value()),
            _ => None,
        })
        .unwrap_or(opts.default_port);
    let h = ip.header();
    let (l4_src, l4_dst) = match &sliced.transport {
        Some(TransportSlice::Tcp(t)) => (t.source_port(), t.destination_port()),
        Some(TransportSlice::Udp(u)) => (u.source_port(), u.destination_port()),
        _ => (0, 0),
    };
    Frame::View(PacketView {
        in_port,
        eth_src: mac(eth.source()),
        eth_dst: mac(eth.destination()),
        eth_type: ETH_IPV4,
        ip_src: u32::from_be_bytes(h.source()),
        ip_dst: u32::from_be_bytes(h.destination()),
        ip_proto: h.protocol().0,
        l4_src,
        l4_dst,
        ..Default::default()
    })
}

/// Parses a classic pcap image. Views come out in capture order with
/// `arrival_seq` counting accepted views and `ts` taken from the capture
/// timestamp in milliseconds.
pub fn read_pcap(bytes: &[u8], opts: &IngestOptions) -> Result<Capture, PcapError> {
    let malformed = |offset: usize, e: pcap_file::PcapError| PcapError::Malformed {
        offset,
        reason: e.to_string(),
    };
    let (mut rest, parser) = PcapParser::new(bytes).map_err(|e| malformed(0, e))?;
    let link = parser.header().datalink;
    if link != DataLink::ETHERNET {
        return Err(PcapError::LinkType(format!("{link:?}")));
    }
    let mut cap = Capture::default();
    while !rest.is_empty() {
        let offset = bytes.len() - rest.len();
        let (next, pkt) = parser.next_packet(rest).map_err(|e| malformed(offset, e))?;
        rest = next;
        match decode(&pkt.data, opts) {
            Frame::View(mut v) => {
                v.arrival_seq = cap.views.len() as u64;
                v.ts = Timestamp(pkt.timestamp.as_millis() as u64);
                v.len = pkt.orig_len.min(u16::MAX as u32) as u16;
                cap.views.push(v);
            }
            Frame::NotIpv4 => cap.skipped += 1,
            Frame::Broken => cap.undecodable += 1,
        }
    }
    Ok(cap)
}

pub fn ingest_pcap(path: impl AsRef<Path>, opts: &IngestOptions) -> Result<Capture, PcapError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| PcapError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_pcap(&bytes, opts)
}

/// The Ethernet frame of a view: 802.1Q tag carrying the ingress port,
/// IPv4, then TCP, UDP or an empty payload for other protocols, padded
/// with zeros up to `len`.
pub fn encode_frame(p: &PacketView) -> Result<Vec<u8>, String> {
    let vlan = VlanId::try_new(p.in_port)
        .map_err(|_| format!("in_port {} does not fit a VLAN id", p.in_port))?;
    let base = PacketBuilder::ethernet2(mac_bytes(p.eth_src), mac_bytes(p.eth_dst))
        .single_vlan(vlan)
        .ipv4(p.ip_src.to_be_bytes(), p.ip_dst.to_be_bytes(), 64);
    let mut out = Vec::with_capacity(p.len.max(64) as usize);
    let written = match p.ip_proto {
        PROTO_TCP => {
            let b = base.tcp(p.l4_src, p.l4_dst, p.arrival_seq as u32, 65535);
            let pad = (p.len as usize).saturating_sub(b.size(0));
            b.write(&mut out, &vec![0; pad])
        }
        PROTO_UDP => {
            let b = base.udp(p.l4_src, p.l4_dst);
            let pad = (p.len as usize).saturating_sub(b.size(0));
            b.write(&mut out, &vec![0; pad])
        }
        other => {
            let pad = (p.len as usize).saturating_sub(base.size(0));
            base.write(&mut out, IpNumber(other), &vec![0; pad])
        }
    };
    written.map_err(|e| e.to_string())?;
    Ok(out)
}

pub fn write_pcap<W: Write>(out: W, packets: &[PacketView]) -> Result<W, PcapError> {
    let header = PcapHeader {
        datalink: DataLink::ETHERNET,
        ..Default::default()
    };
    let io = |e: pcap_file::PcapError| PcapError::Malformed {
        offset: 0,
        reason: e.to_string(),
    };
    let mut w = PcapWriter::with_header(out, header).map_err(io)?;
    for (index, p) in packets.iter().enumerate() {
        let frame = encode_frame(p).map_err(|reason| PcapError::Unencodable { index, reason })?;
        let pkt = PcapPacket::new(
            Duration::from_millis(p.ts.millis()),
            frame.len() as u32,
            &frame,
        );
        w.write_packet(&pkt).map_err(io)?;
    }
    Ok(w.into_writer())
}

pub fn export_pcap(path: impl AsRef<Path>, packets: &[PacketView]) -> Result<(), PcapError> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|source| PcapError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut w = write_pcap(std::io::BufWriter::new(file), packets)?;
    w.flush().map_err(|source| PcapError::Io {
        path: path.display().to_string(),
        source,
    })
}
