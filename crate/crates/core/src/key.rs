// SPDX-License-Identifier: Apache-2.0
// Copyright The opp-engine Authors

//! Flow key extraction and canonicalization.

use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::FieldError;
use crate::field::FieldId;
use crate::packet::PacketView;

/// Which header fields (and metadata ranges) make up a flow key.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub selectors: Vec<FieldId>,
    #[serde(default)]
    pub bidirectional: bool,
}

impl ExtractorConfig {
    pub fn new(selectors: impl Into<Vec<FieldId>>) -> Self {
        ExtractorConfig {
            selectors: selectors.into(),
            bidirectional: false,
        }
    }

    pub fn bidirectional(selectors: impl Into<Vec<FieldId>>) -> Self {
        ExtractorConfig {
            selectors: selectors.into(),
            bidirectional: true,
        }
    }

    /// Unidirectional TCP/UDP 4-tuple.
    pub fn four_tuple() -> Self {
        Self::new(vec![
            FieldId::IpSrc,
            FieldId::L4Src,
            FieldId::IpDst,
            FieldId::L4Dst,
        ])
    }

    /// 4-tuple mapping both directions of a connection to one key.
    pub fn bidirectional_four_tuple() -> Self {
        Self::bidirectional(vec![
            FieldId::IpSrc,
            FieldId::L4Src,
            FieldId::IpDst,
            FieldId::L4Dst,
        ])
    }

    pub fn src_endpoint() -> Self {
        Self::new(vec![FieldId::IpSrc, FieldId::L4Src])
    }

    pub fn dst_endpoint() -> Self {
        Self::new(vec![FieldId::IpDst, FieldId::L4Dst])
    }

    pub fn uses_metadata(&self) -> bool {
        self.selectors.iter().any(|f| f.is_meta())
    }

    /// True when bidirectional folding is well defined for the selector set:
    /// every address/port selector has its mirror selected too.
    pub fn is_symmetric(&self) -> bool {
        self.selectors
            .iter()
            .all(|f| endpoint_mirror(*f) == *f || self.selectors.contains(&endpoint_mirror(*f)))
    }

    /// Builds the key for `pkt`. Infallible: selectors are validated at load.
    pub fn extract(&self, pkt: &PacketView) -> FlowKey {
        let swap = self.bidirectional && should_swap(|f| Some(pkt.get(f)), &self.selectors);
        let mut bytes = SmallVec::new();
        for &sel in &self.selectors {
            let src = if swap { endpoint_mirror(sel) } else { sel };
            push_be(&mut bytes, pkt.get(src), sel.key_bytes());
        }
        FlowKey { bytes }
    }

    /// Builds a key from explicit selector values, e.g. for controller writes.
    pub fn key_from_values(&self, values: &[u64]) -> Result<FlowKey, FieldError> {
        let pairs: Vec<(FieldId, u64)> = self
            .selectors
            .iter()
            .copied()
            .zip(values.iter().copied())
            .collect();
        if values.len() != self.selectors.len() {
            return Err(FieldError::BadValue {
                field: format!("{} selectors", self.selectors.len()),
                value: format!("{} values", values.len()),
            });
        }
        canonicalize_key(&self.selectors, &pairs, self.bidirectional)
    }

    /// Splits a key built by this extractor back into selector values.
    pub fn decode(&self, key: &FlowKey) -> Vec<(FieldId, u64)> {
        let mut out = Vec::with_capacity(self.selectors.len());
        let mut at = 0;
        for &sel in &self.selectors {
            let n = sel.key_bytes();
            let v = key.bytes[at..at + n]
                .iter()
                .fold(0u64, |acc, b| (acc << 8) | *b as u64);
            out.push((sel, v));
            at += n;
        }
        out
    }

    /// `field=value` rendering used by state dumps.
    pub fn render(&self, key: &FlowKey) -> String {
        self.decode(key)
            .into_iter()
            .map(|(f, v)| format!("{f}={}", f.format_value(v)))
            .collect::<Vec<_>>()
            .join(",")
    }

    /// `{addr:port,addr:port}` rendering for endpoint-pair keys; falls back
    /// to [`ExtractorConfig::render`] for anything else.
    pub fn render_endpoints(&self, key: &FlowKey) -> String {
        let vals = self.decode(key);
        let mut parts = Vec::new();
        let mut i = 0;
        while i < vals.len() {
            match (vals[i].0, vals.get(i + 1).map(|p| p.0)) {
                (FieldId::IpSrc | FieldId::IpDst, Some(FieldId::L4Src | FieldId::L4Dst)) => {
                    parts.push(format!(
                        "{}:{}",
                        Ipv4Addr::from(vals[i].1 as u32),
                        vals[i + 1].1
                    ));
                    i += 2;
                }
                _ => return self.render(key),
            }
        }
        format!("{{{}}}", parts.join(","))
    }
}

/// Concatenated selector values in canonical (big-endian) byte order.
///
/// Keys compare by value bytes only, so a key built by a lookup extractor
/// can address a context written through a different update extractor
/// (cross-flow update) as long as the byte layouts agree.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlowKey {
    bytes: SmallVec<[u8; 24]>,
}

impl FlowKey {
    pub fn from_bytes(bytes: &[u8]) -> Self {
        FlowKey {
            bytes: SmallVec::from_slice(bytes),
        }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn to_hex(&self) -> String {
        self.bytes.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(text: &str) -> Option<Self> {
        if !text.len().is_multiple_of(2) {
            return None;
        }
        let bytes: Option<SmallVec<[u8; 24]>> = (0..text.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(text.get(i..i + 2)?, 16).ok())
            .collect();
        bytes.map(|bytes| FlowKey { bytes })
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Builds a key from explicit selector values.
///
/// With `bidirectional`, the `(ip_src, l4_src)` and `(ip_dst, l4_dst)` pairs
/// are compared as one lexicographic integer and the smaller pair is placed
/// in the source positions, so both directions of a connection yield the
/// same bytes.
pub fn canonicalize_key(
    selectors: &[FieldId],
    values: &[(FieldId, u64)],
    bidirectional: bool,
) -> Result<FlowKey, FieldError> {
    let lookup = |f: FieldId| values.iter().find(|(id, _)| *id == f).map(|(_, v)| *v);
    for &sel in selectors {
        if lookup(sel).is_none() {
            return Err(FieldError::BadValue {
                field: sel.to_string(),
                value: "<missing>".into(),
            });
        }
    }
    let swap = bidirectional && should_swap(lookup, selectors);
    let mut bytes = SmallVec::new();
    for &sel in selectors {
        let src = if swap { endpoint_mirror(sel) } else { sel };
        let v = lookup(src).ok_or_else(|| FieldError::BadValue {
            field: src.to_string(),
            value: "<missing>".into(),
        })?;
        push_be(&mut bytes, v, sel.key_bytes());
    }
    Ok(FlowKey { bytes })
}

fn endpoint_mirror(f: FieldId) -> FieldId {
    match f {
        FieldId::IpSrc | FieldId::IpDst | FieldId::L4Src | FieldId::L4Dst => f.mirror(),
        other => other,
    }
}

fn should_swap(value: impl Fn(FieldId) -> Option<u64>, selectors: &[FieldId]) -> bool {
    let pick = |f: FieldId| {
        if selectors.contains(&f) || selectors.contains(&endpoint_mirror(f)) {
            value(f).unwrap_or(0)
        } else {
            0
        }
    };
    let src = (pick(FieldId::IpSrc) << 16) | pick(FieldId::L4Src);
    let dst = (pick(FieldId::IpDst) << 16) | pick(FieldId::L4Dst);
    dst < src
}

fn push_be(out: &mut SmallVec<[u8; 24]>, value: u64, width: usize) {
    let be = value.to_be_bytes();
    out.extend_from_slice(&be[8 - width..]);
}

#[cfg(test)]
mod test {
    use super::*;
    use crate::field::MetaRange;
    use crate::packet::Timestamp;

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    fn pkt(src: (&str, u16), dst: (&str, u16)) -> PacketView {
        PacketView::tcp(0, (ip(src.0), src.1), (ip(dst.0), dst.1), Timestamp(0))
    }

    #[test]
    fn bidirectional_key_ignores_direction() {
        let ex = ExtractorConfig::bidirectional_four_tuple();
        let fwd = pkt(("10.0.0.2", 123), ("8.0.0.5", 678));
        assert_eq!(ex.extract(&fwd), ex.extract(&fwd.reversed()));
        let uni = ExtractorConfig::four_tuple();
        assert_ne!(uni.extract(&fwd), uni.extract(&fwd.reversed()));
    }

    #[test]
    fn four_tuple_key_renders_in_packet_order() {
        let ex = ExtractorConfig::four_tuple();
        let p = pkt(("2.0.0.7", 678), ("1.0.0.1", 80));
        assert_eq!(
            ex.render_endpoints(&ex.extract(&p)),
            "{2.0.0.7:678,1.0.0.1:80}"
        );
    }

    #[test]
    fn destination_pair_key_of_reply() {
        // reply from the server, keyed on its destination pair
        let ex = ExtractorConfig::dst_endpoint();
        let reply = pkt(("10.0.0.2", 80), ("2.0.0.7", 678));
        assert_eq!(ex.render_endpoints(&ex.extract(&reply)), "{2.0.0.7:678}");
        // and it addresses the same context as the source-pair key of the request
        let fwd = pkt(("2.0.0.7", 678), ("1.0.0.1", 80));
        assert_eq!(
            ExtractorConfig::src_endpoint().extract(&fwd),
            ex.extract(&reply)
        );
    }

    #[test]
    fn metadata_key_ignores_headers() {
        let ex = ExtractorConfig::new(vec![FieldId::Meta(MetaRange::new(15, 0).unwrap())]);
        let mut a = pkt(("10.0.0.4", 123), ("2.0.0.1", 678));
        let mut b = pkt(("10.0.0.9", 1), ("3.3.3.3", 2));
        a.metadata = 0x4000_0002;
        b.metadata = 0x0000_0002;
        assert_eq!(ex.extract(&a), ex.extract(&b));
        assert_eq!(ex.extract(&a).as_bytes(), &[0, 2]);
    }

    #[test]
    fn empty_selector_list_gives_one_shared_key() {
        let ex = ExtractorConfig::new(vec![]);
        let a = pkt(("1.1.1.1", 1), ("2.2.2.2", 2));
        let b = pkt(("3.3.3.3", 3), ("4.4.4.4", 4));
        assert!(ex.extract(&a).is_empty());
        assert_eq!(ex.extract(&a), ex.extract(&b));
    }

    #[test]
    fn canonicalize_matches_extract_and_reports_missing() {
        let ex = ExtractorConfig::bidirectional_four_tuple();
        let p = pkt(("10.0.0.2", 123), ("8.0.0.5", 678));
        let values: Vec<_> = ex.selectors.iter().map(|f| (*f, p.get(*f))).collect();
        assert_eq!(
            canonicalize_key(&ex.selectors, &values, true).unwrap(),
            ex.extract(&p)
        );
        assert!(canonicalize_key(&ex.selectors, &values[..2], true).is_err());
        assert_eq!(
            ex.key_from_values(&[0x0800_0005, 678, 0x0a00_0002, 123])
                .unwrap(),
            ex.extract(&p)
        );
    }

    #[test]
    fn decode_inverts_extract() {
        let ex = ExtractorConfig::new(vec![FieldId::InPort, FieldId::IpDst, FieldId::IpProto]);
        let p = pkt(("1.2.3.4", 5), ("6.7.8.9", 10));
        let k = ex.extract(&p);
        assert_eq!(
            ex.decode(&k),
            vec![
                (FieldId::InPort, 0),
                (FieldId::IpDst, 0x0607_0809),
                (FieldId::IpProto, 6)
            ]
        );
        assert_eq!(ex.render(&k), "in_port=0,ip_dst=6.7.8.9,ip_proto=6");
        assert_eq!(FlowKey::from_hex(&k.to_hex()).unwrap(), k);
    }
}
