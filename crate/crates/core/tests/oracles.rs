// SPDX-License-Identifier: Apache-2.0
// Copyright The opp-engine Authors

mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::*;
use opp_core::program::CondReq;
use opp_core::stage::{
    evaluate_conditions, execute_updates, match_entry, priority_order, ConditionVector,
};
use opp_core::table::{ContextTable, Lookup};
use opp_core::*;
use rand::Rng;

fn oracle_field(p: &PacketView, f: FieldId) -> u64 {
    match f {
        FieldId::InPort => p.in_port.into(),
        FieldId::EthSrc => p.eth_src,
        FieldId::EthDst => p.eth_dst,
        FieldId::EthType => p.eth_type.into(),
        FieldId::IpSrc => p.ip_src.into(),
        FieldId::IpDst => p.ip_dst.into(),
        FieldId::IpProto => p.ip_proto.into(),
        FieldId::L4Src => p.l4_src.into(),
        FieldId::L4Dst => p.l4_dst.into(),
        FieldId::Meta(r) => {
            let width = (r.hi - r.lo + 1) as u32;
            (p.metadata as u64 >> r.lo) & ((1u64 << width) - 1)
        }
    }
}

fn oracle_operand(op: Operand, p: &PacketView, state: u16, regs: &[u32], globals: &[u32]) -> u32 {
    match op {
        Operand::Field(f) => oracle_field(p, f) as u32,
        Operand::FlowReg(i) => regs[i as usize],
        Operand::GlobalReg(i) => globals[i as usize],
        Operand::Const(c) => c,
        Operand::State => state as u32,
    }
}

#[test]
fn bidirectional_keys_brute_force() {
    let mut r = rng(7);
    let ex = ExtractorConfig::bidirectional_four_tuple();
    let tuples: Vec<((u32, u16), (u32, u16))> = (0..1000)
        .map(|_| {
            let a = (r.gen_range(0..64u32) << 24 | 2, r.gen_range(0..64u16));
            let b = (r.gen_range(0..64u32) << 24 | 5, r.gen_range(0..64u16));
            (a, b)
        })
        .collect();
    let pkt = |a: (u32, u16), b: (u32, u16)| PacketView {
        ip_src: a.0,
        l4_src: a.1,
        ip_dst: b.0,
        l4_dst: b.1,
        ..Default::default()
    };
    let keys: Vec<FlowKey> = tuples
        .iter()
        .map(|&(a, b)| ex.extract(&pkt(a, b)))
        .collect();
    for (i, &(a, b)) in tuples.iter().enumerate() {
        assert_eq!(keys[i], ex.extract(&pkt(b, a)));
    }
    let unordered = |(a, b): ((u32, u16), (u32, u16))| if a <= b { (a, b) } else { (b, a) };
    for i in 0..tuples.len() {
        for j in i + 1..tuples.len() {
            let same_conn = unordered(tuples[i]) == unordered(tuples[j]);
            assert_eq!(keys[i] == keys[j], same_conn, "tuples {i} and {j}");
        }
    }
}

#[test]
fn conditions_match_expression_oracle() {
    let mut r = rng(11);
    for _ in 0..2000 {
        let conds: Vec<Condition> = (0..r.gen_range(0..=8))
            .map(|_| random_condition(&mut r))
            .collect();
        let pkt = random_packet(&mut r);
        let state = r.gen_range(0..4);
        let regs: Vec<u32> = (0..4)
            .map(|_| {
                if r.gen_bool(0.5) {
                    r.gen_range(0..4)
                } else {
                    r.gen()
                }
            })
            .collect();
        let globals: Vec<u32> = (0..8).map(|_| r.gen_range(0..4)).collect();
        let got = evaluate_conditions(&conds, &pkt, state, &regs, &globals);
        for i in 0..8 {
            let want = conds.get(i).is_some_and(|c| {
                let a = oracle_operand(c.lhs, &pkt, state, &regs, &globals);
                let b = oracle_operand(c.rhs, &pkt, state, &regs, &globals);
                match c.op {
                    CondOp::Gt => a > b,
                    CondOp::Lt => a < b,
                    CondOp::Eq => a == b,
                }
            });
            assert_eq!(got.get(i), want, "condition {i} of {conds:?}");
        }
    }
}

fn oracle_matches(e: &EfsmEntry, state: u16, cv: u32, p: &PacketView) -> bool {
    let state_ok = e.state.is_none_or(|s| (state ^ s.value) & s.mask == 0);
    let conds_ok = e.conds.0.iter().enumerate().all(|(i, req)| {
        let bit = cv >> i & 1 == 1;
        match req {
            CondReq::MustTrue => bit,
            CondReq::MustFalse => !bit,
            CondReq::DontCare => true,
        }
    });
    let fields_ok = e
        .fields
        .iter()
        .all(|m| (oracle_field(p, m.field) ^ m.value) & m.mask == 0);
    state_ok && conds_ok && fields_ok
}

fn oracle_scan(entries: &[EfsmEntry], state: u16, cv: u32, p: &PacketView) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, e) in entries.iter().enumerate() {
        if oracle_matches(e, state, cv, p) && best.is_none_or(|b| e.priority < entries[b].priority)
        {
            best = Some(i);
        }
    }
    best
}

#[test]
fn ternary_match_agrees_with_linear_scan() {
    let mut r = rng(13);
    let m = 8;
    for _ in 0..40 {
        let entries: Vec<EfsmEntry> = (0..r.gen_range(1..=8))
            .map(|_| {
                let mut e = EfsmEntry::new(r.gen_range(0..3));
                e.state = random_state_match(&mut r);
                e.conds = random_cond_match(&mut r, m);
                for _ in 0..r.gen_range(0..=4) {
                    let f = random_narrow_field(&mut r);
                    e.fields.push(random_field_match(&mut r, f));
                }
                e
            })
            .collect();
        let order = priority_order(&entries);
        for _ in 0..60 {
            let pkt = random_packet(&mut r);
            let state = r.gen_range(0..4);
            for cv in 0..1u32 << m {
                assert_eq!(
                    match_entry(&entries, &order, state, ConditionVector(cv), &pkt),
                    oracle_scan(&entries, state, cv, &pkt)
                );
            }
        }
    }
}

fn oracle_alu(op: AluOp, a: u32, b: u32) -> u32 {
    match op {
        AluOp::Add => ((a as u64 + b as u64) % (1u64 << 32)) as u32,
        AluOp::Sub => ((a as u64 + (1u64 << 32) - b as u64) % (1u64 << 32)) as u32,
        AluOp::And => a & b,
        AluOp::Or => a | b,
        AluOp::Xor => a ^ b,
        AluOp::Shl => ((a as u64) << (b % 32)) as u32,
        AluOp::Shr => a >> (b % 32),
        AluOp::Mov => a,
    }
}

#[test]
fn alu_lists_match_snapshot_oracle() {
    let mut r = rng(17);
    for _ in 0..1000 {
        let updates: Vec<UpdateInstruction> = (0..r.gen_range(1..=5))
            .map(|_| random_update(&mut r))
            .collect();
        let pkt = random_packet(&mut r);
        let state = r.gen_range(0..4);
        let regs: Vec<u32> = (0..4).map(|_| r.gen()).collect();
        let globals: Vec<u32> = (0..8).map(|_| r.gen()).collect();

        let (mut p1, mut r1, mut g1) = (pkt, regs.clone(), globals.clone());
        execute_updates(&updates, &mut p1, state, &mut r1, &mut g1);

        let before = (pkt, regs.clone(), globals.clone());
        let (mut p2, mut r2, mut g2) = (pkt, regs.clone(), globals.clone());
        for u in &updates {
            let a = oracle_operand(u.src1, &before.0, state, &before.1, &before.2);
            let b = u.src2.map_or(0, |s| {
                oracle_operand(s, &before.0, state, &before.1, &before.2)
            });
            let v = oracle_alu(u.op, a, b);
            match u.dst {
                UpdateDst::FlowReg(i) => r2[i as usize] = v,
                UpdateDst::GlobalReg(i) => g2[i as usize] = v,
                UpdateDst::Meta(m) => {
                    let w = (m.hi - m.lo + 1) as u32;
                    let field = (((1u64 << w) - 1) << m.lo) as u32;
                    p2.metadata = (p2.metadata & !field) | ((v << m.lo) & field);
                }
            }
        }
        assert_eq!((p1, r1, g1), (p2, r2, g2), "{updates:?}");
    }
}

#[derive(Clone, Copy)]
struct ModelCtx {
    last_seen: u64,
    created: u64,
    idle: Option<u64>,
    hard: Option<u64>,
}

impl ModelCtx {
    fn alive(&self, now: u64) -> bool {
        self.idle.is_none_or(|i| self.last_seen + i > now)
            && self.hard.is_none_or(|h| self.created + h > now)
    }
}

#[test]
fn eviction_matches_timestamp_model() {
    let mut r = rng(19);
    for _ in 0..200 {
        let mut table = ContextTable::new(usize::MAX);
        let mut model: BTreeMap<u8, ModelCtx> = BTreeMap::new();
        let mut now = 0u64;
        for _ in 0..200 {
            let key = r.gen_range(0..12u8);
            let fk = FlowKey::from_bytes(&[key]);
            match r.gen_range(0..4) {
                0 => {
                    let next = NextState {
                        label: 1,
                        idle_timeout_ms: r.gen_bool(0.7).then(|| r.gen_range(1..40)),
                        hard_timeout_ms: r.gen_bool(0.3).then(|| r.gen_range(1..80)),
                    };
                    table.commit(&fk, &next, [0; 8], Timestamp(now));
                    let created = match model.get(&key) {
                        Some(c) if c.alive(now) => c.created,
                        _ => now,
                    };
                    model.insert(
                        key,
                        ModelCtx {
                            last_seen: now,
                            created,
                            idle: next.idle_timeout_ms,
                            hard: next.hard_timeout_ms,
                        },
                    );
                }
                1 => {
                    let got = table.lookup(&fk, Timestamp(now));
                    let want = model.get(&key).copied();
                    match want {
                        Some(c) if c.alive(now) => {
                            assert!(matches!(got, Lookup::Hit(_)));
                            model.get_mut(&key).unwrap().last_seen = now;
                        }
                        Some(_) => {
                            assert_eq!(got, Lookup::Expired);
                            model.remove(&key);
                        }
                        None => assert_eq!(got, Lookup::Miss),
                    }
                }
                2 => now += r.gen_range(0..30),
                _ => {
                    let expected_gone = model.values().filter(|c| !c.alive(now)).count();
                    assert_eq!(table.evict_expired(Timestamp(now)), expected_gone);
                    model.retain(|_, c| c.alive(now));
                    let survivors: BTreeSet<u8> =
                        table.iter().map(|(k, _)| k.as_bytes()[0]).collect();
                    assert_eq!(survivors, model.keys().copied().collect());
                    assert_eq!(table.evict_expired(Timestamp(now)), 0);
                }
            }
        }
    }
}

#[test]
fn evict_examples() {
    let mut t = ContextTable::new(16);
    assert_eq!(t.evict_expired(Timestamp(0)), 0);
    for (k, idle) in [(1u8, 10), (2, 10), (3, 1000)] {
        t.commit(
            &FlowKey::from_bytes(&[k]),
            &NextState::with_idle(k as u16, idle),
            [k as u32; 8],
            Timestamp(0),
        );
    }
    assert_eq!(t.evict_expired(Timestamp(20)), 2);
    let survivor = t.get(&FlowKey::from_bytes(&[3])).unwrap();
    assert_eq!((survivor.state, survivor.regs[0]), (3, 3));
}
