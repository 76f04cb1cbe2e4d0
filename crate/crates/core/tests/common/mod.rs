// SPDX-License-Identifier: Apache-2.0
// Copyright The opp-engine Authors

#![allow(dead_code)]

use opp_core::program::{CondReq, StateMatch};
use opp_core::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use rand::SeedableRng;
pub type TestRng = ChaCha8Rng;

pub fn rng(seed: u64) -> TestRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub const NARROW_FIELDS: [FieldId; 7] = [
    FieldId::InPort,
    FieldId::EthType,
    FieldId::IpSrc,
    FieldId::IpDst,
    FieldId::IpProto,
    FieldId::L4Src,
    FieldId::L4Dst,
];

/// Small value pools make equalities and ties likely.
pub fn random_packet(r: &mut TestRng) -> PacketView {
    let ips = [
        0x0a00_0002u32,
        0x0a00_0003,
        0x0800_0005,
        0x0100_0001,
        r.gen(),
    ];
    let ports = [80u16, 123, 678, 444, r.gen()];
    PacketView {
        in_port: r.gen_range(0..3),
        eth_src: r.gen::<u64>() & 0xffff_ffff_ffff,
        eth_dst: r.gen::<u64>() & 0xffff_ffff_ffff,
        eth_type: *[0x0800u16, 0x86dd].choose(r).unwrap(),
        ip_src: *ips.choose(r).unwrap(),
        ip_dst: *ips.choose(r).unwrap(),
        ip_proto: *[6u8, 17].choose(r).unwrap(),
        l4_src: *ports.choose(r).unwrap(),
        l4_dst: *ports.choose(r).unwrap(),
        metadata: if r.gen_bool(0.5) {
            r.gen_range(0..4)
        } else {
            r.gen()
        },
        arrival_seq: 0,
        ts: Timestamp(r.gen_range(0..100_000)),
        len: 64,
    }
}

pub fn random_meta_range(r: &mut TestRng) -> MetaRange {
    let lo = r.gen_range(0..32u8);
    let hi = r.gen_range(lo..32u8);
    MetaRange::new(hi, lo).unwrap()
}

pub fn random_narrow_field(r: &mut TestRng) -> FieldId {
    if r.gen_bool(0.2) {
        FieldId::Meta(random_meta_range(r))
    } else {
        *NARROW_FIELDS.choose(r).unwrap()
    }
}

pub fn random_operand(r: &mut TestRng, k: u8, h: u8) -> Operand {
    match r.gen_range(0..5) {
        0 => Operand::Field(random_narrow_field(r)),
        1 => Operand::FlowReg(r.gen_range(0..k)),
        2 => Operand::GlobalReg(r.gen_range(0..h)),
        3 => Operand::Const(if r.gen_bool(0.5) {
            r.gen_range(0..4)
        } else {
            r.gen()
        }),
        _ => Operand::State,
    }
}

pub fn random_condition(r: &mut TestRng) -> Condition {
    let op = *[CondOp::Gt, CondOp::Lt, CondOp::Eq].choose(r).unwrap();
    Condition::new(random_operand(r, 4, 8), op, random_operand(r, 4, 8))
}

pub const ALU_OPS: [AluOp; 8] = [
    AluOp::Add,
    AluOp::Sub,
    AluOp::And,
    AluOp::Or,
    AluOp::Xor,
    AluOp::Shl,
    AluOp::Shr,
    AluOp::Mov,
];

pub fn random_update(r: &mut TestRng) -> UpdateInstruction {
    let dst = match r.gen_range(0..3) {
        0 => UpdateDst::FlowReg(r.gen_range(0..4)),
        1 => UpdateDst::GlobalReg(r.gen_range(0..8)),
        _ => UpdateDst::Meta(random_meta_range(r)),
    };
    let op = *ALU_OPS.choose(r).unwrap();
    let src1 = random_operand(r, 4, 8);
    if op == AluOp::Mov {
        UpdateInstruction::mov(dst, src1)
    } else {
        UpdateInstruction::binary(dst, op, src1, random_operand(r, 4, 8))
    }
}

pub fn random_cond_match(r: &mut TestRng, m: usize) -> CondMatch {
    CondMatch(
        (0..m)
            .map(|_| {
                *[
                    CondReq::MustTrue,
                    CondReq::MustFalse,
                    CondReq::DontCare,
                    CondReq::DontCare,
                ]
                .choose(r)
                .unwrap()
            })
            .collect(),
    )
}

pub fn random_field_match(r: &mut TestRng, field: FieldId) -> FieldMatch {
    let sample = random_packet(r).get(field);
    let mask = match r.gen_range(0..3) {
        0 => field.max_value(),
        1 => r.gen::<u64>() & field.max_value(),
        _ => 0x3 & field.max_value(),
    };
    FieldMatch::masked(field, sample, mask)
}

pub fn random_state_match(r: &mut TestRng) -> Option<StateMatch> {
    match r.gen_range(0..3) {
        0 => None,
        1 => Some(StateMatch::exact(r.gen_range(0..3))),
        _ => Some(StateMatch {
            value: r.gen_range(0..4),
            mask: r.gen_range(0..4),
        }),
    }
}

/// A random entry that is valid in stage `si` of an `n`-stage pipeline.
pub fn random_entry(
    r: &mut TestRng,
    si: usize,
    n: usize,
    conds: usize,
    stateful: bool,
    ports: u16,
) -> EfsmEntry {
    let mut e = EfsmEntry::new(r.gen_range(0..4));
    let fields: Vec<FieldId> = (0..r.gen_range(0..=4))
        .map(|_| random_narrow_field(r))
        .collect();
    for f in fields {
        e.fields.push(random_field_match(r, f));
    }
    if stateful {
        e.state = random_state_match(r);
        e.conds = random_cond_match(r, conds);
        if r.gen_bool(0.6) {
            e.next_state = Some(NextState {
                label: r.gen_range(0..4),
                idle_timeout_ms: r.gen_bool(0.5).then(|| r.gen_range(1..50_000)),
                hard_timeout_ms: r.gen_bool(0.2).then(|| r.gen_range(1..90_000)),
            });
            for _ in 0..r.gen_range(0..=5) {
                e.updates.push(random_update(r));
            }
        } else {
            for _ in 0..r.gen_range(0..=3) {
                let mut u = random_update(r);
                if matches!(u.dst, UpdateDst::FlowReg(_)) {
                    u.dst = UpdateDst::GlobalReg(0);
                }
                e.updates.push(u);
            }
        }
    }
    for _ in 0..r.gen_range(0..3) {
        let a = match r.gen_range(0..5) {
            0 => {
                let f = random_narrow_field(r);
                Action::SetField {
                    field: f,
                    value: random_packet(r).get(f),
                }
            }
            1 => Action::SetMeta {
                range: MetaRange::new(3, 0).unwrap(),
                value: r.gen_range(0..16),
            },
            2 => Action::SetMetaFrom {
                range: random_meta_range(r),
                src: if stateful {
                    random_operand(r, 4, 8)
                } else {
                    Operand::Field(FieldId::L4Src)
                },
            },
            3 => Action::SetFieldFrom {
                field: FieldId::L4Dst,
                src: if stateful {
                    Operand::FlowReg(r.gen_range(0..4))
                } else {
                    Operand::GlobalReg(1)
                },
            },
            _ => Action::SetField {
                field: FieldId::IpProto,
                value: 17,
            },
        };
        e.actions.push(a);
    }
    match r.gen_range(0..4) {
        0 if si + 1 < n => e.actions.push(Action::GotoStage(r.gen_range(si + 1..n))),
        1 => e.actions.push(Action::Drop),
        2 => e.actions.push(Action::Output(r.gen_range(0..ports))),
        _ => {}
    }
    if r.gen_bool(0.2) {
        e.tag = Some(format!("t{}", r.gen_range(0..9)));
    }
    e
}

pub fn random_extractor(r: &mut TestRng) -> ExtractorConfig {
    match r.gen_range(0..5) {
        0 => ExtractorConfig::bidirectional_four_tuple(),
        1 => ExtractorConfig::four_tuple(),
        2 => ExtractorConfig::src_endpoint(),
        3 => ExtractorConfig::dst_endpoint(),
        _ => ExtractorConfig::new(vec![FieldId::Meta(random_meta_range(r))]),
    }
}

pub fn random_stage(r: &mut TestRng, si: usize, n: usize, ports: u16) -> StageConfig {
    let stateful = r.gen_bool(0.6);
    let mut st = if stateful {
        let l = random_extractor(r);
        if r.gen_bool(0.7) {
            StageConfig::stateful(l)
        } else {
            StageConfig::cross_flow(l, random_extractor(r))
        }
    } else {
        StageConfig::stateless()
    };
    let conds = if stateful { r.gen_range(0..=8) } else { 0 };
    st.conditions = (0..conds).map(|_| random_condition(r)).collect();
    st.entries = (0..r.gen_range(0..=8))
        .map(|_| random_entry(r, si, n, conds, stateful, ports))
        .collect();
    st.table_default = match r.gen_range(0..3) {
        0 => TableDefault::Drop,
        1 => TableDefault::GotoNext,
        _ if si + 1 < n => TableDefault::Goto(r.gen_range(si + 1..n)),
        _ => TableDefault::Drop,
    };
    if r.gen_bool(0.3) {
        st.name = Some(format!("stage{si}"));
    }
    if r.gen_bool(0.2) {
        st.capacity = Some(r.gen_range(1..64));
    }
    if r.gen_bool(0.2) {
        st.globals_init = (0..r.gen_range(1..=8)).map(|_| r.gen()).collect();
    }
    st
}

pub fn random_config(r: &mut TestRng) -> PipelineConfig {
    let n = r.gen_range(1..=5);
    let ports = r.gen_range(1..=4);
    let stages = (0..n).map(|si| random_stage(r, si, n, ports)).collect();
    let mut cfg = PipelineConfig::with_port_count(ports, stages);
    if r.gen_bool(0.5) {
        cfg.ports[0].external = true;
        cfg.ports[0].name = "wan".into();
    }
    cfg
}
