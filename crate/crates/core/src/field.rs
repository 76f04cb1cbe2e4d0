// SPDX-License-Identifier: Apache-2.0
// Copyright The opp-engine Authors

//! Field selectors over the fixed Ethernet/IPv4/TCP/UDP header layout plus
//! the 32-bit inter-stage metadata word.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::FieldError;

/// Width of the metadata word carried between stages.
pub const METADATA_BITS: u8 = 32;

/// Inclusive bit range `[hi:lo]` inside the metadata word.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MetaRange {
    pub hi: u8,
    pub lo: u8,
}

impl MetaRange {
    pub const FULL: MetaRange = MetaRange { hi: 31, lo: 0 };

    pub fn new(hi: u8, lo: u8) -> Result<Self, FieldError> {
        if hi >= METADATA_BITS || lo > hi {
            return Err(FieldError::BadMetaRange { hi, lo });
        }
        Ok(MetaRange { hi, lo })
    }

    pub fn width(self) -> u8 {
        self.hi - self.lo + 1
    }

    /// Mask of the range, right-aligned.
    pub fn value_mask(self) -> u32 {
        if self.width() == 32 {
            u32::MAX
        } else {
            (1u32 << self.width()) - 1
        }
    }

    /// Mask of the range in word position.
    pub fn word_mask(self) -> u32 {
        self.value_mask() << self.lo
    }

    pub fn extract(self, word: u32) -> u32 {
        (word >> self.lo) & self.value_mask()
    }

    /// Inserts the low bits of `value` into the range; bits above the range
    /// width are discarded.
    pub fn insert(self, word: u32, value: u32) -> u32 {
        (word & !self.word_mask()) | ((value & self.value_mask()) << self.lo)
    }
}

/// A header or metadata field a selector, condition, action or ALU operand
/// can refer to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FieldId {
    InPort,
    EthSrc,
    EthDst,
    EthType,
    IpSrc,
    IpDst,
    IpProto,
    L4Src,
    L4Dst,
    Meta(MetaRange),
}

impl FieldId {
    pub const META: FieldId = FieldId::Meta(MetaRange::FULL);

    pub fn bits(self) -> u8 {
        match self {
            FieldId::InPort => 16,
            FieldId::EthSrc | FieldId::EthDst => 48,
            FieldId::EthType => 16,
            FieldId::IpSrc | FieldId::IpDst => 32,
            FieldId::IpProto => 8,
            FieldId::L4Src | FieldId::L4Dst => 16,
            FieldId::Meta(r) => r.width(),
        }
    }

    /// Bytes this field occupies inside a flow key.
    pub fn key_bytes(self) -> usize {
        (self.bits() as usize).div_ceil(8)
    }

    pub fn max_value(self) -> u64 {
        if self.bits() == 64 {
            u64::MAX
        } else {
            (1u64 << self.bits()) - 1
        }
    }

    pub fn is_meta(self) -> bool {
        matches!(self, FieldId::Meta(_))
    }

    /// The field this one is exchanged with under bidirectional folding.
    pub fn mirror(self) -> FieldId {
        match self {
            FieldId::IpSrc => FieldId::IpDst,
            FieldId::IpDst => FieldId::IpSrc,
            FieldId::L4Src => FieldId::L4Dst,
            FieldId::L4Dst => FieldId::L4Src,
            FieldId::EthSrc => FieldId::EthDst,
            FieldId::EthDst => FieldId::EthSrc,
            other => other,
        }
    }

    /// Renders a value of this field in its natural notation.
    pub fn format_value(self, value: u64) -> String {
        match self {
            FieldId::IpSrc | FieldId::IpDst => Ipv4Addr::from(value as u32).to_string(),
            FieldId::EthSrc | FieldId::EthDst => {
                let b = value.to_be_bytes();
                format!(
                    "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
                    b[2], b[3], b[4], b[5], b[6], b[7]
                )
            }
            FieldId::EthType | FieldId::Meta(_) => format!("{value:#x}"),
            _ => value.to_string(),
        }
    }

    /// Parses a value for this field. Accepts decimal, `0x` hex, dotted IPv4
    /// and colon-separated MAC notation. The result must fit the field width.
    pub fn parse_value(self, text: &str) -> Result<u64, FieldError> {
        let text = text.trim();
        let bad = || FieldError::BadValue {
            field: self.to_string(),
            value: text.to_string(),
        };
        let value = if let Some(hex) = text.strip_prefix("0x").or_else(|| text.strip_prefix("0X")) {
            u64::from_str_radix(hex, 16).map_err(|_| bad())?
        } else if text.contains('.') {
            u32::from(Ipv4Addr::from_str(text).map_err(|_| bad())?) as u64
        } else if text.contains(':') {
            let mut v = 0u64;
            let mut n = 0;
            for part in text.split(':') {
                v = (v << 8) | u8::from_str_radix(part, 16).map_err(|_| bad())? as u64;
                n += 1;
            }
            if n != 6 {
                return Err(bad());
            }
            v
        } else {
            text.parse::<u64>().map_err(|_| bad())?
        };
        if value > self.max_value() {
            return Err(FieldError::ValueTooWide {
                field: self.to_string(),
                value,
            });
        }
        Ok(value)
    }
}

impl fmt::Display for FieldId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldId::InPort => f.write_str("in_port"),
            FieldId::EthSrc => f.write_str("eth_src"),
            FieldId::EthDst => f.write_str("eth_dst"),
            FieldId::EthType => f.write_str("eth_type"),
            FieldId::IpSrc => f.write_str("ip_src"),
            FieldId::IpDst => f.write_str("ip_dst"),
            FieldId::IpProto => f.write_str("ip_proto"),
            FieldId::L4Src => f.write_str("l4_src"),
            FieldId::L4Dst => f.write_str("l4_dst"),
            FieldId::Meta(r) if *r == MetaRange::FULL => f.write_str("meta"),
            FieldId::Meta(r) => write!(f, "meta[{}:{}]", r.hi, r.lo),
        }
    }
}

impl FromStr for FieldId {
    type Err = FieldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "in_port" => FieldId::InPort,
            "eth_src" => FieldId::EthSrc,
            "eth_dst" => FieldId::EthDst,
            "eth_type" => FieldId::EthType,
            "ip_src" => FieldId::IpSrc,
            "ip_dst" => FieldId::IpDst,
            "ip_proto" => FieldId::IpProto,
            "l4_src" => FieldId::L4Src,
            "l4_dst" => FieldId::L4Dst,
            "meta" => FieldId::META,
            _ => {
                let inner = s
                    .strip_prefix("meta[")
                    .and_then(|r| r.strip_suffix(']'))
                    .ok_or_else(|| FieldError::UnknownField(s.to_string()))?;
                let (hi, lo) = match inner.split_once(':') {
                    Some((hi, lo)) => (hi, lo),
                    None => (inner, inner),
                };
                let parse = |t: &str| {
                    t.trim()
                        .parse::<u8>()
                        .map_err(|_| FieldError::UnknownField(s.to_string()))
                };
                FieldId::Meta(MetaRange::new(parse(hi)?, parse(lo)?)?)
            }
        })
    }
}

impl Serialize for FieldId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FieldId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Serialize for MetaRange {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(&FieldId::Meta(*self))
    }
}

impl<'de> Deserialize<'de> for MetaRange {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match FieldId::deserialize(d)? {
            FieldId::Meta(r) => Ok(r),
            other => Err(serde::de::Error::custom(format!(
                "expected a metadata range, got {other}"
            ))),
        }
    }
}
