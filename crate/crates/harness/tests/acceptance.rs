// SPDX-License-Identifier: Apache-2.0
// Copyright The opp-engine Authors

use std::net::Ipv4Addr;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use opp_core::program::{CondReq, StateMatch};
use opp_core::stage::{execute_updates, match_entry, priority_order, ConditionVector};
use opp_core::*;
use opp_harness::bench::{bench_pipeline, bench_stream, measure, BenchMode, BenchOptions};
use opp_harness::replay::{replay, replay_with_oracle, ReplayOptions};
use opp_harness::traffic::gen_traffic;
use opp_harness::usecase::{self, scenario, traffic_spec, UseCase};
use opp_iptables::translate::{tagged_entries, CT_ESTABLISHED, CT_HALF_OPEN, LB_COUNTER};
use opp_iptables::{port_bucket_sync, PortBucket, TranslateOptions};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORACLE_SEEDS: u64 = 20;
const ORACLE_PACKETS: usize = 5000;
const ORACLE_WORKERS: [usize; 3] = [2, 4, 8];
const ORACLE_BUDGET: Duration = Duration::from_secs(60);

const IDLE_MS: u64 = 20_000;
const LB_FLOWS: usize = 100;
const NAT_BUCKET: (u16, u16) = (444, 447);

const ALU_LISTS: usize = 1000;
const TERNARY_TABLES: usize = 200;
const TERNARY_PACKETS: usize = 500;
const TERNARY_MAX_ENTRIES: usize = 8;
const TERNARY_MAX_FIELDS: usize = 4;
const TERNARY_MAX_CONDS: usize = 8;

const COUNTER_EVENTS: u32 = 100_000;
const COUNTER_WORKERS: usize = 8;

const SCALING_MIN_CORES: usize = 4;
const SCALING_PACKETS: usize = 1_000_000;
const SCALING_FLOWS: usize = 64;
const STATELESS_SPEEDUP: f64 = 2.0;
const STATEFUL_SPEEDUP: f64 = 1.5;
const SCALING_BUDGET: Duration = Duration::from_secs(300);

const DEPTH_PACKETS: usize = 300_000;
const DEPTH_NOISE: f64 = 0.05;

type Outcome = Result<String, String>;

fn tcp(in_port: u16, src: (Ipv4Addr, u16), dst: (Ipv4Addr, u16), ms: u64) -> PacketView {
    PacketView::tcp(in_port, src, dst, Timestamp(ms))
}

fn check(ok: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what())
    }
}

fn oracle_equivalence() -> Outcome {
    let t0 = Instant::now();
    let mut runs = 0;
    let mut dependent = [0usize; 3];
    for (u, uc) in UseCase::ALL.into_iter().enumerate() {
        let scn = scenario(uc);
        for seed in 0..ORACLE_SEEDS {
            let t =
                gen_traffic(&traffic_spec(uc, ORACLE_PACKETS), seed).map_err(|e| e.to_string())?;
            check(t.packets.len() >= ORACLE_PACKETS, || {
                format!("{} seed {seed}: short stream", uc.name())
            })?;
            for w in ORACLE_WORKERS {
                let (_, o) =
                    replay_with_oracle(&scn, &t.packets, &ReplayOptions::default().with_workers(w))
                        .map_err(|e| e.to_string())?;
                check(o.passed(), || {
                    format!(
                        "{} seed {seed} W={w}: {:?}",
                        uc.name(),
                        o.first_divergence.as_ref().map(|d| &d.flow)
                    )
                })?;
                dependent[u] += o.order_dependent_flows;
                runs += 1;
            }
        }
    }
    let secs = t0.elapsed();
    check(secs < ORACLE_BUDGET, || format!("took {secs:?}"))?;
    Ok(format!(
        "{runs} runs identical to serial replay in {:.1}s; flows whose outcome hinges on cross-flow global order: firewall {}, balancer {}, nat {}",
        secs.as_secs_f64(),
        dependent[0],
        dependent[1],
        dependent[2]
    ))
}

fn firewall_semantics() -> Outcome {
    let t = usecase::translation(UseCase::Firewall);
    let ct = t.layout.classify.ok_or("no conntrack stage")?;
    let mut pl = Pipeline::new(t.config).map_err(|e| e.to_string())?;
    let lan = (Ipv4Addr::new(10, 0, 0, 2), 123);
    let dmz = (Ipv4Addr::new(8, 0, 0, 5), 678);
    let intruder = (Ipv4Addr::new(8, 0, 0, 9), 999);
    let key = pl.config().stages[ct]
        .lookup
        .as_ref()
        .ok_or("conntrack has no key")?
        .extract(&tcp(2, lan, dmz, 0));
    let label = |pl: &Pipeline| {
        pl.inspect_state().stages[ct]
            .contexts
            .iter()
            .find(|c| c.key_hex == key.to_hex())
            .map(|c| c.state)
    };

    let v = pl.process_packet(&tcp(1, intruder, lan, 0)).verdict;
    check(v == Decision::Drop, || {
        format!("unsolicited DMZ->LAN gave {v:?}")
    })?;
    let v = pl.process_packet(&tcp(2, lan, dmz, 10)).verdict;
    check(v == Decision::Output(1), || format!("LAN->DMZ gave {v:?}"))?;
    check(label(&pl) == Some(CT_HALF_OPEN), || {
        format!("after first packet state {:?}", label(&pl))
    })?;
    let v = pl.process_packet(&tcp(1, dmz, lan, 20)).verdict;
    check(v == Decision::Output(2), || format!("reply gave {v:?}"))?;
    check(label(&pl) == Some(CT_ESTABLISHED), || {
        format!("after reply state {:?}", label(&pl))
    })?;

    pl.evict_expired(Timestamp(20 + IDLE_MS - 1));
    check(label(&pl) == Some(CT_ESTABLISHED), || {
        "evicted before the idle timeout".into()
    })?;
    pl.evict_expired(Timestamp(20 + IDLE_MS));
    check(label(&pl).is_none(), || {
        "not evicted at the idle timeout".into()
    })?;
    let v = pl.process_packet(&tcp(1, dmz, lan, 20 + IDLE_MS)).verdict;
    check(v == Decision::Drop, || {
        format!("after eviction DMZ->LAN gave {v:?}")
    })?;
    Ok(format!("blocked, admitted, state {CT_HALF_OPEN}->{CT_ESTABLISHED}, evicted at +{IDLE_MS} ms, blocked again"))
}

fn balancer_semantics() -> Outcome {
    let vip = (Ipv4Addr::new(1, 0, 0, 1), 80);
    let servers = [Ipv4Addr::new(10, 0, 0, 2), Ipv4Addr::new(10, 0, 0, 3)];
    let clients: Vec<(Ipv4Addr, u16)> = (0..LB_FLOWS)
        .map(|i| {
            (
                Ipv4Addr::new(2, 0, (i / 200) as u8, (i % 200) as u8 + 7),
                600 + i as u16,
            )
        })
        .collect();
    let rounds = 5;
    let mut pkts = Vec::new();
    for round in 0..rounds {
        for &c in &clients {
            pkts.push(tcp(0, c, vip, round));
        }
    }
    for (i, p) in pkts.iter_mut().enumerate() {
        p.arrival_seq = i as u64;
    }
    let scn = scenario(UseCase::Balancer);
    let run = replay(&scn, &pkts, &ReplayOptions::default().with_workers(4))
        .map_err(|e| e.to_string())?;

    let classify = usecase::translation(UseCase::Balancer)
        .layout
        .classify
        .ok_or("no classify stage")?;
    let mut commits: Vec<(u64, usize)> = (0..pkts.len())
        .filter_map(|i| {
            run.grants[i]
                .iter()
                .find(|g| g.0 == classify)
                .map(|g| (g.1, i))
        })
        .collect();
    commits.sort();
    check(commits.len() == LB_FLOWS, || {
        format!("{} counter commits for {LB_FLOWS} flows", commits.len())
    })?;
    let mut per_server = [0usize; 2];
    for (k, (_, i)) in commits.iter().enumerate() {
        let got = Ipv4Addr::from(run.decisions[*i].packet.ip_dst);
        check(got == servers[k % 2], || {
            format!("commit {k} went to {got}")
        })?;
        per_server[k % 2] += 1;
    }
    check(per_server == [LB_FLOWS / 2, LB_FLOWS / 2], || {
        format!("split {per_server:?}")
    })?;
    let g0 = run.state.stages[classify]
        .globals
        .get(LB_COUNTER as usize)
        .copied();
    check(g0 == Some(LB_FLOWS as u32), || format!("G0 = {g0:?}"))?;

    let mut assigned = vec![0u32; LB_FLOWS];
    for (i, d) in run.decisions.iter().enumerate() {
        let c = i % LB_FLOWS;
        if i < LB_FLOWS {
            assigned[c] = d.packet.ip_dst;
        }
        check(d.packet.ip_dst == assigned[c], || {
            format!("flow {c} moved servers")
        })?;
    }

    let mut pl = Pipeline::new(scn.config.clone()).map_err(|e| e.to_string())?;
    for (c, &client) in clients.iter().enumerate() {
        pl.process_packet(&tcp(0, client, vip, 0));
        let back = pl.process_packet(&tcp(2, (Ipv4Addr::from(assigned[c]), 80), client, 1));
        let src = Ipv4Addr::from(back.packet.ip_src);
        check(back.verdict == Decision::Output(0) && src == vip.0, || {
            format!("reply left {:?} from {src}", back.verdict)
        })?;
    }
    Ok(format!("{LB_FLOWS} flows alternate in commit order under 4 workers, split {per_server:?}, sticky over {rounds} rounds, replies from {}", vip.0))
}

fn nat_semantics() -> Outcome {
    let opts = TranslateOptions {
        nat_ports: NAT_BUCKET,
        ..Default::default()
    };
    let t = usecase::translate_rules(usecase::NAT_RULES, &opts);
    let mut pl = Pipeline::new(t.config.clone()).map_err(|e| e.to_string())?;
    let mut bucket = PortBucket::for_translation(&t).ok_or("no port bucket")?;
    port_bucket_sync(&mut bucket, &mut pl, Timestamp(0)).map_err(|e| e.to_string())?;
    let public = Ipv4Addr::new(1, 0, 0, 1);
    let remote = (Ipv4Addr::new(2, 0, 0, 1), 678);
    let hosts: Vec<(Ipv4Addr, u16)> = (0..5u8)
        .map(|i| (Ipv4Addr::new(10, 0, 0, 4 + i), 123))
        .collect();

    let mut ports = Vec::new();
    for &h in &hosts[..4] {
        let d = pl.process_packet(&tcp(2, h, remote, 0));
        check(d.verdict == Decision::Output(0), || {
            format!("host {h:?} gave {:?}", d.verdict)
        })?;
        check(Ipv4Addr::from(d.packet.ip_src) == public, || {
            "source not masqueraded".into()
        })?;
        ports.push(d.packet.l4_src);
    }
    let mut distinct = ports.clone();
    distinct.sort();
    distinct.dedup();
    check(
        distinct.len() == 4
            && ports
                .iter()
                .all(|p| (NAT_BUCKET.0..=NAT_BUCKET.1).contains(p)),
        || format!("ports {ports:?}"),
    )?;
    for (i, &h) in hosts[..4].iter().enumerate() {
        let back = pl.process_packet(&tcp(0, remote, (public, ports[i]), 10));
        let got = (Ipv4Addr::from(back.packet.ip_dst), back.packet.l4_dst);
        check(back.verdict == Decision::Output(2) && got == h, || {
            format!("reply to {} reached {got:?}", ports[i])
        })?;
    }

    let default_hits = |pl: &Pipeline| pl.stats().iter().map(|s| s.default_hits).sum::<u64>();
    let before = default_hits(&pl);
    let fifth = pl.process_packet(&tcp(2, hosts[4], remote, 20));
    check(
        fifth.verdict == Decision::Drop && default_hits(&pl) == before + 1,
        || format!("exhausted bucket gave {:?}", fifth.verdict),
    )?;

    for (i, &h) in hosts[1..4].iter().enumerate() {
        pl.process_packet(&tcp(2, h, remote, IDLE_MS / 2));
        pl.process_packet(&tcp(0, remote, (public, ports[i + 1]), IDLE_MS / 2));
    }
    let now = Timestamp(IDLE_MS + 5000);
    let r = port_bucket_sync(&mut bucket, &mut pl, now).map_err(|e| e.to_string())?;
    check(r.reclaimed == vec![ports[0]], || {
        format!("reclaimed {:?}", r.reclaimed)
    })?;
    let fifth = pl.process_packet(&tcp(2, hosts[4], remote, now.millis() + 1));
    check(
        fifth.verdict == Decision::Output(0) && fifth.packet.l4_src == ports[0],
        || {
            format!(
                "5th flow gave {:?} port {}",
                fifth.verdict, fifth.packet.l4_src
            )
        },
    )?;
    let back = pl.process_packet(&tcp(0, remote, (public, ports[0]), now.millis() + 2));
    check(
        (Ipv4Addr::from(back.packet.ip_dst), back.packet.l4_dst) == hosts[4],
        || "recycled port reply misrouted".into(),
    )?;
    Ok(format!(
        "ports {ports:?}, replies reverse-translated, 5th flow hits table_default then reuses {}",
        ports[0]
    ))
}

const ALU_OPS: [AluOp; 8] = [
    AluOp::Add,
    AluOp::Sub,
    AluOp::And,
    AluOp::Or,
    AluOp::Xor,
    AluOp::Shl,
    AluOp::Shr,
    AluOp::Mov,
];
const FIELDS: [FieldId; 7] = [
    FieldId::InPort,
    FieldId::EthType,
    FieldId::IpSrc,
    FieldId::IpDst,
    FieldId::IpProto,
    FieldId::L4Src,
    FieldId::L4Dst,
];

fn meta_range(r: &mut ChaCha8Rng) -> MetaRange {
    let lo = r.gen_range(0..32u8);
    MetaRange::new(r.gen_range(lo..32u8), lo).expect("lo <= hi < 32")
}

fn field(r: &mut ChaCha8Rng) -> FieldId {
    if r.gen_bool(0.2) {
        FieldId::Meta(meta_range(r))
    } else {
        *FIELDS.choose(r).expect("non-empty")
    }
}

fn packet(r: &mut ChaCha8Rng) -> PacketView {
    let ips = [0x0a00_0002u32, 0x0a00_0003, 0x0800_0005, r.gen()];
    let ports = [80u16, 123, 444, r.gen()];
    PacketView {
        in_port: r.gen_range(0..3),
        eth_src: r.gen::<u64>() & 0xffff_ffff_ffff,
        eth_dst: r.gen::<u64>() & 0xffff_ffff_ffff,
        eth_type: *[0x0800u16, 0x86dd].choose(r).expect("non-empty"),
        ip_src: *ips.choose(r).expect("non-empty"),
        ip_dst: *ips.choose(r).expect("non-empty"),
        ip_proto: *[6u8, 17].choose(r).expect("non-empty"),
        l4_src: *ports.choose(r).expect("non-empty"),
        l4_dst: *ports.choose(r).expect("non-empty"),
        metadata: if r.gen_bool(0.5) {
            r.gen_range(0..4)
        } else {
            r.gen()
        },
        ..Default::default()
    }
}

fn operand(r: &mut ChaCha8Rng) -> Operand {
    match r.gen_range(0..5) {
        0 => Operand::Field(field(r)),
        1 => Operand::FlowReg(r.gen_range(0..4)),
        2 => Operand::GlobalReg(r.gen_range(0..8)),
        3 => Operand::Const(if r.gen_bool(0.5) {
            r.gen_range(0..40)
        } else {
            r.gen()
        }),
        _ => Operand::State,
    }
}

fn read_field(p: &PacketView, f: FieldId) -> u64 {
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
        FieldId::Meta(m) => (p.metadata as u64 >> m.lo) & ((1u64 << (m.hi - m.lo + 1)) - 1),
    }
}

fn read(op: Operand, p: &PacketView, state: u16, regs: &[u32], globals: &[u32]) -> u32 {
    match op {
        Operand::Field(f) => read_field(p, f) as u32,
        Operand::FlowReg(i) => regs[i as usize],
        Operand::GlobalReg(i) => globals[i as usize],
        Operand::Const(c) => c,
        Operand::State => state as u32,
    }
}

fn alu(op: AluOp, a: u32, b: u32) -> u32 {
    let wide = 1u64 << 32;
    match op {
        AluOp::Add => ((a as u64 + b as u64) % wide) as u32,
        AluOp::Sub => ((a as u64 + wide - b as u64) % wide) as u32,
        AluOp::And => a & b,
        AluOp::Or => a | b,
        AluOp::Xor => a ^ b,
        AluOp::Shl => ((a as u64) << (b % 32)) as u32,
        AluOp::Shr => a >> (b % 32),
        AluOp::Mov => a,
    }
}

fn two_phase_alu() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut instructions = 0;
    for n in 0..ALU_LISTS {
        let list: Vec<UpdateInstruction> = (0..r.gen_range(1..=6))
            .map(|_| {
                let dst = match r.gen_range(0..3) {
                    0 => UpdateDst::FlowReg(r.gen_range(0..4)),
                    1 => UpdateDst::GlobalReg(r.gen_range(0..8)),
                    _ => UpdateDst::Meta(meta_range(&mut r)),
                };
                let op = *ALU_OPS.choose(&mut r).expect("non-empty");
                let a = operand(&mut r);
                if op == AluOp::Mov {
                    UpdateInstruction::mov(dst, a)
                } else {
                    UpdateInstruction::binary(dst, op, a, operand(&mut r))
                }
            })
            .collect();
        instructions += list.len();
        let pkt = packet(&mut r);
        let state = r.gen_range(0..4);
        let regs: Vec<u32> = (0..4).map(|_| r.gen()).collect();
        let globals: Vec<u32> = (0..8).map(|_| r.gen()).collect();

        let (mut p1, mut r1, mut g1) = (pkt, regs.clone(), globals.clone());
        execute_updates(&list, &mut p1, state, &mut r1, &mut g1);

        let (mut p2, mut r2, mut g2) = (pkt, regs.clone(), globals.clone());
        for u in &list {
            let a = read(u.src1, &pkt, state, &regs, &globals);
            let b = u.src2.map_or(0, |s| read(s, &pkt, state, &regs, &globals));
            let v = alu(u.op, a, b);
            match u.dst {
                UpdateDst::FlowReg(i) => r2[i as usize] = v,
                UpdateDst::GlobalReg(i) => g2[i as usize] = v,
                UpdateDst::Meta(m) => {
                    let bits = (((1u64 << (m.hi - m.lo + 1)) - 1) << m.lo) as u32;
                    p2.metadata = (p2.metadata & !bits) | ((v << m.lo) & bits);
                }
            }
        }
        check((p1, &r1, &g1) == (p2, &r2, &g2), || {
            format!("list {n}: {list:?}")
        })?;
    }
    Ok(format!(
        "{ALU_LISTS} lists ({instructions} instructions) bitwise identical"
    ))
}

fn ternary_match() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let mut comparisons = 0u64;
    let mut hits = 0u64;
    for t in 0..TERNARY_TABLES {
        let m = r.gen_range(0..=TERNARY_MAX_CONDS);
        let entries: Vec<EfsmEntry> = (0..r.gen_range(1..=TERNARY_MAX_ENTRIES))
            .map(|_| {
                let mut e = EfsmEntry::new(r.gen_range(0..3));
                e.state = match r.gen_range(0..3) {
                    0 => None,
                    1 => Some(StateMatch::exact(r.gen_range(0..3))),
                    _ => Some(StateMatch {
                        value: r.gen_range(0..4),
                        mask: r.gen_range(0..4),
                    }),
                };
                e.conds = CondMatch(
                    (0..m)
                        .map(|_| {
                            *[CondReq::MustTrue, CondReq::MustFalse, CondReq::DontCare]
                                .choose(&mut r)
                                .expect("non-empty")
                        })
                        .collect(),
                );
                for _ in 0..r.gen_range(0..=TERNARY_MAX_FIELDS) {
                    let f = field(&mut r);
                    let sample = read_field(&packet(&mut r), f);
                    let mask = match r.gen_range(0..3) {
                        0 => f.max_value(),
                        1 => r.gen::<u64>() & f.max_value(),
                        _ => 0x3 & f.max_value(),
                    };
                    e.fields.push(FieldMatch::masked(f, sample, mask));
                }
                e
            })
            .collect();
        let order = priority_order(&entries);
        for _ in 0..TERNARY_PACKETS {
            let pkt = packet(&mut r);
            let state = r.gen_range(0..4);
            for cv in 0..1u32 << m {
                let mut want: Option<usize> = None;
                for (i, e) in entries.iter().enumerate() {
                    let state_ok = e.state.is_none_or(|s| (state ^ s.value) & s.mask == 0);
                    let conds_ok = e.conds.0.iter().enumerate().all(|(c, req)| match req {
                        CondReq::MustTrue => cv >> c & 1 == 1,
                        CondReq::MustFalse => cv >> c & 1 == 0,
                        CondReq::DontCare => true,
                    });
                    let fields_ok = e
                        .fields
                        .iter()
                        .all(|f| (read_field(&pkt, f.field) ^ f.value) & f.mask == 0);
                    if state_ok
                        && conds_ok
                        && fields_ok
                        && want.is_none_or(|w| e.priority < entries[w].priority)
                    {
                        want = Some(i);
                    }
                }
                let got = match_entry(&entries, &order, state, ConditionVector(cv), &pkt);
                check(got == want, || {
                    format!("table {t}, cv {cv:#b}: got {got:?}, scan {want:?}")
                })?;
                comparisons += 1;
                hits += want.is_some() as u64;
            }
        }
    }
    Ok(format!(
        "{TERNARY_TABLES} tables, {comparisons} lookups ({hits} hits) identical to a linear scan"
    ))
}

fn global_counter() -> Outcome {
    let bump = UpdateInstruction::binary(
        UpdateDst::GlobalReg(0),
        AluOp::Add,
        Operand::GlobalReg(0),
        Operand::Const(1),
    );
    let mut cfg = PipelineConfig::with_port_count(
        2,
        vec![
            StageConfig::stateful(ExtractorConfig::bidirectional_four_tuple()).with_entries(vec![
                EfsmEntry::new(0)
                    .in_state(0)
                    .set_state(NextState::label(1))
                    .update(bump)
                    .action(Action::Output(1)),
                EfsmEntry::new(0).in_state(1).action(Action::Output(1)),
            ]),
        ],
    );
    cfg.stages[0].capacity = Some((COUNTER_EVENTS as usize * 2).next_power_of_two());
    let packets: Vec<PacketView> = (0..COUNTER_EVENTS)
        .map(|i| {
            tcp(
                0,
                (
                    Ipv4Addr::from(0x0a00_0000 | (i >> 8)),
                    (i & 0xff) as u16 + 1024,
                ),
                (Ipv4Addr::new(8, 8, 8, 8), 443),
                0,
            )
        })
        .collect();
    let plan = derive_steering(&cfg).with_workers(COUNTER_WORKERS);
    let (report, pl) = run_parallel(
        Pipeline::new(cfg).map_err(|e| e.to_string())?,
        &packets,
        plan,
    );
    let g0 = pl.read_global(0, 0);
    check(g0 == Some(COUNTER_EVENTS), || format!("G0 = {g0:?}"))?;
    let busy = report.processed.iter().filter(|n| **n > 0).count();
    Ok(format!("G0 = {COUNTER_EVENTS} after {COUNTER_EVENTS} first packets on {busy}/{COUNTER_WORKERS} busy workers"))
}

fn scaling() -> Outcome {
    let t0 = Instant::now();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let packets = bench_stream(SCALING_PACKETS, SCALING_FLOWS, 0);
    let opts = BenchOptions::default();
    let mut parts = Vec::new();
    let mut ok = cores >= SCALING_MIN_CORES;
    for (mode, need) in [
        (BenchMode::Stateless, STATELESS_SPEEDUP),
        (BenchMode::Stateful, STATEFUL_SPEEDUP),
    ] {
        let cfg = bench_pipeline(mode, 1);
        let one = measure(mode, 1, &cfg, &packets, 1, &opts);
        let four = measure(mode, 1, &cfg, &packets, 4, &opts);
        let speedup = four.pps / one.pps;
        ok &= speedup >= need;
        parts.push(format!("{} {:.2}x (need {need:.1}x)", mode.name(), speedup));
    }
    let secs = t0.elapsed();
    ok &= secs < SCALING_BUDGET;
    let msg = format!(
        "{} cores; W=4 over W=1: {}; {:.1}s",
        cores,
        parts.join(", "),
        secs.as_secs_f64()
    );
    if ok {
        Ok(msg)
    } else if cores < SCALING_MIN_CORES {
        Err(format!(
            "{msg}; host has fewer than {SCALING_MIN_CORES} cores"
        ))
    } else {
        Err(msg)
    }
}

fn stage_depth() -> Outcome {
    let packets = bench_stream(DEPTH_PACKETS, SCALING_FLOWS, 1);
    let opts = BenchOptions {
        repeats: 5,
        ..Default::default()
    };
    let mode = BenchMode::EveryPacketUpdates;
    let pps: Vec<f64> = (1..=4)
        .map(|n| measure(mode, n, &bench_pipeline(mode, n), &packets, 1, &opts).pps)
        .collect();
    let shown: Vec<String> = pps.iter().map(|p| format!("{:.2}", p / 1e6)).collect();
    for n in 1..pps.len() {
        check(pps[n] <= pps[n - 1] * (1.0 + DEPTH_NOISE), || {
            format!(
                "Mpps by depth {}: {} stages faster than {}",
                shown.join(" "),
                n + 1,
                n
            )
        })?;
    }
    Ok(format!("Mpps for 1..4 stages: {}", shown.join(" ")))
}

fn translation_fidelity() -> Outcome {
    let t = usecase::translate_rules(usecase::COMBINED_RULES, &TranslateOptions::default());
    let stateful: Vec<usize> = (0..t.config.stages.len())
        .filter(|&i| t.config.stages[i].kind == StageKind::Stateful)
        .collect();
    let stateless: Vec<usize> = (0..t.config.stages.len())
        .filter(|&i| t.config.stages[i].kind == StageKind::Stateless)
        .collect();
    check(stateful.len() == 4 && stateless.len() == 1, || {
        format!("{} stateful, {} stateless", stateful.len(), stateless.len())
    })?;
    let ct = t.layout.classify.ok_or("no conntrack stage")?;
    let ct_entries = tagged_entries(&t.config, ct, "conntrack").len();
    let fwd_entries = t.config.stages[stateless[0]].entries.len();
    check(ct_entries == 7, || {
        format!("conntrack entries {ct_entries}")
    })?;
    check(fwd_entries == 4, || {
        format!("stateless stage entries {fwd_entries}")
    })?;
    Ok(format!("4 stateful + 1 stateless stages; conntrack {ct_entries} entries, stateless stage {fwd_entries} entries"))
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        (1, "oracle equivalence", oracle_equivalence),
        (2, "firewall semantics", firewall_semantics),
        (3, "load balancer semantics", balancer_semantics),
        (4, "dynamic NAT semantics", nat_semantics),
        (5, "two-phase ALU", two_phase_alu),
        (6, "ternary match", ternary_match),
        (7, "global counter exactness", global_counter),
        (8, "scaling trend", scaling),
        (9, "stage-depth trend", stage_depth),
        (10, "translation fidelity", translation_fidelity),
    ];
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut failed = Vec::new();
    for (n, name, f) in criteria {
        match f() {
            Ok(detail) => println!("criterion {n:>2} PASS {name}: {detail}"),
            Err(reason) => {
                println!("criterion {n:>2} FAIL {name}: {reason}");
                failed.push(n);
            }
        }
    }
    let unmet_host = |n: u32| n == 8 && cores < SCALING_MIN_CORES;
    let blocking: Vec<u32> = failed.iter().copied().filter(|n| !unmet_host(*n)).collect();
    println!("acceptance: {} of 10 pass", 10 - failed.len());
    if failed.iter().any(|n| unmet_host(*n)) {
        println!("criterion 8 needs a host with at least {SCALING_MIN_CORES} cores; this one has {cores}");
    }
    if blocking.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
