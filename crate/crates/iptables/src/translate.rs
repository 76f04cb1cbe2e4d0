// SPDX-License-Identifier: Apache-2.0
// Copyright The opp-engine Authors

//! Rule set to pipeline translation.
//!
//! Stage layout (stages a rule set does not need are left out):
//!
//! | stage     | key                              | role                                   |
//! |-----------|----------------------------------|----------------------------------------|
//! | classify  | bidirectional 4-tuple            | conntrack, LB counter G0, NAT pop G1   |
//! | port-stack| meta[31:16]                      | free NAT ports, label = port           |
//! | nat-reverse | lookup src ip/port + dst port, update dst ip/port + meta[31:16] | reply translation |
//! | rewrite   | 4-tuple                          | DNAT and SNAT header rewrites          |
//! | forward   | stateless                        | filter verdicts, routing, static SNAT  |
//!
//! Metadata word: `[3:0]` conntrack established flag, `[7:4]` low bits of
//! the LB counter, `[31:16]` NAT stack pointer, then the assigned port.

use std::net::Ipv4Addr;

use ipnet::Ipv4Net;
use opp_core::program::CondReq;
use opp_core::{
    Action, AluOp, CondMatch, CondOp, Condition, EfsmEntry, ExtractorConfig, FieldId, FieldMatch,
    MetaRange, NextState, Operand, PipelineConfig, StageConfig, UpdateDst, UpdateInstruction,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rule::{Chain, IptablesRule, RuleSet, Target};
use crate::topology::{Interface, Topology};

pub const CT_META: MetaRange = MetaRange { hi: 3, lo: 0 };
pub const LB_META: MetaRange = MetaRange { hi: 7, lo: 4 };
pub const NAT_META: MetaRange = MetaRange { hi: 31, lo: 16 };

pub const CT_HALF_OPEN: u16 = 12;
pub const CT_ESTABLISHED: u16 = 2;
pub const CT_FLAG_ESTABLISHED: u32 = 1;

/// Classify-stage label of a balanced flow; also the rewrite-stage label.
pub const LB_ASSIGNED: u16 = 1;
/// Classify-stage label of an outbound NAT flow.
pub const NAT_TRACKED: u16 = 3;
/// Rewrite-stage label of a translated outbound flow; R0 holds its port.
pub const NAT_TRANSLATED: u16 = 2;
/// Reverse-stage label of a stored translation; R0/R1 hold the origin.
pub const NAT_STORED: u16 = 1;

pub const LB_COUNTER: u8 = 0;
pub const STACK_POINTER: u8 = 1;

pub const DEFAULT_IDLE_TIMEOUT_MS: u64 = 20_000;
pub const DEFAULT_NAT_PORTS: (u16, u16) = (1024, 65535);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslateOptions {
    pub idle_timeout_ms: u64,
    pub nat_ports: (u16, u16),
}

impl Default for TranslateOptions {
    fn default() -> Self {
        TranslateOptions {
            idle_timeout_ms: DEFAULT_IDLE_TIMEOUT_MS,
            nat_ports: DEFAULT_NAT_PORTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TranslateError {
    #[error("interface `{0}` is not in the topology")]
    UnknownInterface(String),
    #[error("{chain} rule {index}: ACCEPT needs `-o` to pick an output port")]
    AcceptNeedsOut { chain: Chain, index: usize },
    #[error("{chain} rule {index}: `{what}` is required here")]
    Missing {
        chain: Chain,
        index: usize,
        what: &'static str,
    },
    #[error("{chain} rule {index}: {what} is not supported")]
    Unsupported {
        chain: Chain,
        index: usize,
        what: String,
    },
    #[error("DNAT target {0} is not inside any interface subnet")]
    UnroutableTarget(Ipv4Addr),
    #[error("interface `{0}` has no address for MASQUERADE")]
    NoPublicAddress(String),
    #[error("more than one MASQUERADE rule")]
    SecondMasquerade,
    #[error("more than one statistic-balanced DNAT group")]
    SecondBalancer,
}

/// Where the translated constructs ended up.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub classify: Option<usize>,
    pub stack: Option<usize>,
    pub reverse: Option<usize>,
    pub rewrite: Option<usize>,
    pub forward: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NatPlan {
    pub public: Ipv4Addr,
    pub inside_port: u16,
    pub outside_port: u16,
    pub ports: (u16, u16),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Translation {
    pub config: PipelineConfig,
    pub layout: Layout,
    pub nat: Option<NatPlan>,
}

fn cond(index: usize, want: bool) -> CondMatch {
    let mut v = vec![CondReq::DontCare; index];
    v.push(if want {
        CondReq::MustTrue
    } else {
        CondReq::MustFalse
    });
    CondMatch(v)
}

fn in_port(p: u16) -> FieldMatch {
    FieldMatch::exact(FieldId::InPort, p as u64)
}

fn net(field: FieldId, n: Ipv4Net) -> FieldMatch {
    FieldMatch::prefix(field, u32::from(n.network()), n.prefix_len())
}

fn host(field: FieldId, a: Ipv4Addr) -> FieldMatch {
    FieldMatch::exact(field, u32::from(a) as u64)
}

fn mov(dst: UpdateDst, src: Operand) -> UpdateInstruction {
    UpdateInstruction::mov(dst, src)
}

fn meta(r: MetaRange) -> Operand {
    Operand::Field(FieldId::Meta(r))
}

/// One direction of tracked traffic: arrival port plus, when the egress
/// interface has a subnet, the destination prefix that selects it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Direction {
    pub in_port: u16,
    pub dst: Option<Ipv4Net>,
}

impl Direction {
    fn fields(&self) -> Vec<FieldMatch> {
        let mut f = vec![in_port(self.in_port)];
        f.extend(self.dst.map(|n| net(FieldId::IpDst, n)));
        f
    }
}

/// The connection tracking machine: `0 -> 12` on a flow's first packet,
/// `12 -> 2` on the first packet in the opposite direction, `2 -> 2`
/// afterwards. R0 remembers the opening packet's ingress port and
/// `same_dir_cond` must test `in_port == R0`. Established packets carry
/// flag 1 in `meta[3:0]`.
pub fn conntrack_template(
    idle_ms: u64,
    directions: &[Direction],
    same_dir_cond: usize,
    next: usize,
) -> Vec<EfsmEntry> {
    let set = |label| NextState::with_idle(label, idle_ms);
    let mut out = Vec::new();
    let with_fields = |mut e: EfsmEntry, d: &Direction| {
        e.fields = d.fields();
        e
    };
    for d in directions {
        out.push(with_fields(
            EfsmEntry::new(0)
                .in_state(0)
                .set_state(set(CT_HALF_OPEN))
                .update(mov(UpdateDst::FlowReg(0), Operand::Field(FieldId::InPort)))
                .action(Action::GotoStage(next))
                .tagged("conntrack"),
            d,
        ));
    }
    for d in directions {
        let mut e = with_fields(
            EfsmEntry::new(0)
                .in_state(CT_HALF_OPEN)
                .set_state(set(CT_HALF_OPEN))
                .action(Action::GotoStage(next))
                .tagged("conntrack"),
            d,
        );
        e.conds = cond(same_dir_cond, true);
        out.push(e);
    }
    let mut reply = EfsmEntry::new(0)
        .in_state(CT_HALF_OPEN)
        .set_state(set(CT_ESTABLISHED))
        .action(Action::SetMeta {
            range: CT_META,
            value: CT_FLAG_ESTABLISHED,
        })
        .action(Action::GotoStage(next))
        .tagged("conntrack");
    reply.conds = cond(same_dir_cond, false);
    out.push(reply);
    for d in directions {
        out.push(with_fields(
            EfsmEntry::new(0)
                .in_state(CT_ESTABLISHED)
                .set_state(set(CT_ESTABLISHED))
                .action(Action::SetMeta {
                    range: CT_META,
                    value: CT_FLAG_ESTABLISHED,
                })
                .action(Action::GotoStage(next))
                .tagged("conntrack"),
            d,
        ));
    }
    out
}

struct Ctx<'a> {
    topo: &'a Topology,
}

impl Ctx<'_> {
    fn iface(&self, name: &str) -> Result<&Interface, TranslateError> {
        self.topo
            .iface(name)
            .ok_or_else(|| TranslateError::UnknownInterface(name.to_string()))
    }

    fn port(&self, name: &Option<String>) -> Result<Option<u16>, TranslateError> {
        name.as_deref()
            .map(|n| self.iface(n).map(|i| i.port))
            .transpose()
    }

    fn subnet(&self, name: &Option<String>) -> Result<Option<Ipv4Net>, TranslateError> {
        Ok(match name.as_deref() {
            Some(n) => self.iface(n)?.subnet,
            None => None,
        })
    }
}

/// Header matches of a rule other than interfaces and conntrack state.
fn header_matches(r: &IptablesRule) -> Vec<FieldMatch> {
    let mut f = Vec::new();
    f.extend(r.src.map(|n| net(FieldId::IpSrc, n)));
    f.extend(r.dst.map(|n| net(FieldId::IpDst, n)));
    f.extend(
        r.protocol
            .map(|p| FieldMatch::exact(FieldId::IpProto, p as u64)),
    );
    f.extend(r.sport.map(|p| FieldMatch::exact(FieldId::L4Src, p as u64)));
    f.extend(r.dport.map(|p| FieldMatch::exact(FieldId::L4Dst, p as u64)));
    f
}

type Arm = (Option<(u32, u32)>, Ipv4Addr, Option<u16>);

struct Balancer {
    in_port: u16,
    matches: Vec<FieldMatch>,
    /// `(residue mask, residue, target)`; `None` mask means unconditional.
    arms: Vec<Arm>,
    public: Ipv4Addr,
    uses_counter: bool,
}

fn balancers(ctx: &Ctx<'_>, rules: &[IptablesRule]) -> Result<Vec<Balancer>, TranslateError> {
    let mut out: Vec<Balancer> = Vec::new();
    for (index, r) in rules.iter().enumerate() {
        let Target::Dnat { addr, port } = r.target else {
            return Err(TranslateError::Unsupported {
                chain: Chain::Prerouting,
                index,
                what: "a non-DNAT target".into(),
            });
        };
        if r.state.is_some() {
            return Err(TranslateError::Unsupported {
                chain: Chain::Prerouting,
                index,
                what: "--state".into(),
            });
        }
        let in_port = ctx.port(&r.in_iface)?.ok_or(TranslateError::Missing {
            chain: Chain::Prerouting,
            index,
            what: "-i",
        })?;
        let public = match r.dst {
            Some(n) if n.prefix_len() == 32 => n.addr(),
            _ => {
                return Err(TranslateError::Missing {
                    chain: Chain::Prerouting,
                    index,
                    what: "-d <single address>",
                })
            }
        };
        let matches = header_matches(r);
        let arm = match r.nth {
            Some(n) if n.every > 1 => {
                if !n.every.is_power_of_two() || n.every > 1 << LB_META.width() {
                    return Err(TranslateError::Unsupported {
                        chain: Chain::Prerouting,
                        index,
                        what: format!("--every {} (powers of two up to 16 only)", n.every),
                    });
                }
                let residue = (n.every - 1 - n.packet) % n.every;
                Some((n.every - 1, residue))
            }
            _ => None,
        };
        let same_group = out.last().is_some_and(|b: &Balancer| {
            b.in_port == in_port
                && b.matches == matches
                && b.arms.last().is_some_and(|a| a.0.is_some())
        });
        if same_group {
            let b = out.last_mut().expect("group exists");
            if arm.is_some() {
                return Err(TranslateError::Unsupported {
                    chain: Chain::Prerouting,
                    index,
                    what: "a second statistic arm (two servers only)".into(),
                });
            }
            b.arms.push((arm, addr, port));
        } else {
            out.push(Balancer {
                in_port,
                matches,
                arms: vec![(arm, addr, port)],
                public,
                uses_counter: arm.is_some(),
            });
        }
    }
    if out.iter().filter(|b| b.uses_counter).count() > 1 {
        return Err(TranslateError::SecondBalancer);
    }
    Ok(out)
}

fn masquerade(
    ctx: &Ctx<'_>,
    rules: &[IptablesRule],
    opts: &TranslateOptions,
) -> Result<Option<NatPlan>, TranslateError> {
    let mut plan = None;
    for (index, r) in rules.iter().enumerate() {
        let Target::Masquerade { ports } = r.target else {
            return Err(TranslateError::Unsupported {
                chain: Chain::Postrouting,
                index,
                what: "a non-MASQUERADE target".into(),
            });
        };
        if plan.is_some() {
            return Err(TranslateError::SecondMasquerade);
        }
        let missing = |what| TranslateError::Missing {
            chain: Chain::Postrouting,
            index,
            what,
        };
        let inside = ctx.iface(r.in_iface.as_deref().ok_or(missing("-i"))?)?;
        let outside = ctx.iface(r.out_iface.as_deref().ok_or(missing("-o"))?)?;
        let public = outside
            .address
            .ok_or_else(|| TranslateError::NoPublicAddress(outside.name.clone()))?;
        if r.src.is_some()
            || r.dst.is_some()
            || r.protocol.is_some()
            || r.nth.is_some()
            || r.state.is_some()
        {
            return Err(TranslateError::Unsupported {
                chain: Chain::Postrouting,
                index,
                what: "matches beyond -i/-o on MASQUERADE".into(),
            });
        }
        plan = Some(NatPlan {
            public,
            inside_port: inside.port,
            outside_port: outside.port,
            ports: ports.unwrap_or(opts.nat_ports),
        });
    }
    Ok(plan)
}

fn push_unique(list: &mut Vec<EfsmEntry>, e: EfsmEntry) {
    if !list.iter().any(|x| {
        x.fields == e.fields && x.actions == e.actions && x.state == e.state && x.conds == e.conds
    }) {
        list.push(e);
    }
}

fn prioritize(mut entries: Vec<EfsmEntry>) -> Vec<EfsmEntry> {
    for (i, e) in entries.iter_mut().enumerate() {
        e.priority = i as u32;
    }
    entries
}

pub fn translate(rules: &[IptablesRule], topo: &Topology) -> Result<Translation, TranslateError> {
    translate_with(rules, topo, &TranslateOptions::default())
}

pub fn translate_with(
    rules: &[IptablesRule],
    topo: &Topology,
    opts: &TranslateOptions,
) -> Result<Translation, TranslateError> {
    let ctx = Ctx { topo };
    let set = RuleSet::build(rules);
    let idle = opts.idle_timeout_ms;
    let lbs = balancers(&ctx, &set.prerouting)?;
    let nat = masquerade(&ctx, &set.postrouting, opts)?;

    let mut directions: Vec<Direction> = Vec::new();
    let mut passes: Vec<Direction> = Vec::new();
    for (index, r) in set.forward.iter().enumerate() {
        let i = ctx.port(&r.in_iface)?;
        let o = ctx.port(&r.out_iface)?;
        if r.target == Target::Accept && o.is_none() {
            return Err(TranslateError::AcceptNeedsOut {
                chain: Chain::Forward,
                index,
            });
        }
        if r.nth.is_some() {
            return Err(TranslateError::Unsupported {
                chain: Chain::Forward,
                index,
                what: "statistic in FORWARD".into(),
            });
        }
        let Some(i) = i else { continue };
        let ahead = Direction {
            in_port: i,
            dst: ctx.subnet(&r.out_iface)?,
        };
        if r.state.is_some() {
            let o = o.ok_or(TranslateError::Missing {
                chain: Chain::Forward,
                index,
                what: "-o with --state",
            })?;
            let back = Direction {
                in_port: o,
                dst: ctx.subnet(&r.in_iface)?,
            };
            for d in [ahead, back] {
                if !directions.contains(&d) {
                    directions.push(d);
                }
            }
        } else if !passes.contains(&ahead) {
            passes.push(ahead);
        }
    }
    passes.retain(|d| !directions.contains(d));
    if let Some(n) = &nat {
        passes.retain(|d| d.in_port != n.inside_port);
    }

    let has_classify = !directions.is_empty() || !lbs.is_empty() || nat.is_some();
    let mut layout = Layout::default();
    let mut next = 0;
    let mut take = |on: bool| {
        on.then(|| {
            next += 1;
            next - 1
        })
    };
    layout.classify = take(has_classify);
    layout.stack = take(nat.is_some());
    layout.reverse = take(nat.is_some());
    layout.rewrite = take(!lbs.is_empty() || nat.is_some());
    layout.forward = next;
    let fwd = layout.forward;

    let mut stages = Vec::new();

    if layout.classify.is_some() {
        let mut conditions = Vec::new();
        let mut entries = Vec::new();
        if !directions.is_empty() {
            conditions.push(Condition::new(
                Operand::Field(FieldId::InPort),
                CondOp::Eq,
                Operand::FlowReg(0),
            ));
            entries.extend(conntrack_template(
                idle,
                &directions,
                conditions.len() - 1,
                fwd,
            ));
        }
        for d in &passes {
            let mut e = EfsmEntry::new(0)
                .action(Action::GotoStage(fwd))
                .tagged("forward");
            e.fields = d.fields();
            entries.push(e);
        }
        let rewrite = layout.rewrite.unwrap_or(fwd);
        for lb in &lbs {
            let mut fields = vec![in_port(lb.in_port)];
            fields.extend(lb.matches.iter().cloned());
            let mut first = EfsmEntry::new(0)
                .in_state(0)
                .set_state(NextState::with_idle(LB_ASSIGNED, idle))
                .action(Action::GotoStage(rewrite))
                .tagged("balance");
            if lb.uses_counter {
                let g = Operand::GlobalReg(LB_COUNTER);
                first = first.update(mov(UpdateDst::Meta(LB_META), g)).update(
                    UpdateInstruction::binary(
                        UpdateDst::GlobalReg(LB_COUNTER),
                        AluOp::Add,
                        g,
                        Operand::Const(1),
                    ),
                );
            }
            first.fields = fields.clone();
            let mut again = EfsmEntry::new(0)
                .in_state(LB_ASSIGNED)
                .set_state(NextState::with_idle(LB_ASSIGNED, idle))
                .action(Action::GotoStage(rewrite))
                .tagged("balance");
            again.fields = fields;
            entries.push(first);
            entries.push(again);
        }
        for lb in &lbs {
            for &(_, addr, port) in &lb.arms {
                let server = ctx
                    .topo
                    .iface_for(addr)
                    .ok_or(TranslateError::UnroutableTarget(addr))?;
                let mut e = EfsmEntry::new(0)
                    .action(Action::GotoStage(fwd))
                    .tagged("balance-reply");
                e.fields.push(in_port(server.port));
                e.fields.push(host(FieldId::IpSrc, addr));
                let sport = port.or_else(|| {
                    lb.matches
                        .iter()
                        .find(|m| m.field == FieldId::L4Dst)
                        .map(|m| m.value as u16)
                });
                if let Some(p) = sport {
                    e.fields.push(FieldMatch::exact(FieldId::L4Src, p as u64));
                }
                push_unique(&mut entries, e);
            }
        }
        if let Some(n) = &nat {
            conditions.push(Condition::new(
                Operand::GlobalReg(STACK_POINTER),
                CondOp::Gt,
                Operand::Const(0),
            ));
            let sp = Operand::GlobalReg(STACK_POINTER);
            let mut pop = EfsmEntry::new(0)
                .in_state(0)
                .matching(in_port(n.inside_port))
                .set_state(NextState::with_idle(NAT_TRACKED, idle))
                .update(mov(UpdateDst::Meta(NAT_META), sp))
                .update(UpdateInstruction::binary(
                    UpdateDst::GlobalReg(STACK_POINTER),
                    AluOp::Sub,
                    sp,
                    Operand::Const(1),
                ))
                .action(Action::GotoStage(layout.stack.expect("nat has a stack")))
                .tagged("nat");
            pop.conds = cond(conditions.len() - 1, true);
            entries.push(pop);
            entries.push(
                EfsmEntry::new(0)
                    .in_state(NAT_TRACKED)
                    .matching(in_port(n.inside_port))
                    .set_state(NextState::with_idle(NAT_TRACKED, idle))
                    .action(Action::GotoStage(rewrite))
                    .tagged("nat"),
            );
            entries.push(
                EfsmEntry::new(0)
                    .matching(in_port(n.outside_port))
                    .matching(host(FieldId::IpDst, n.public))
                    .action(Action::GotoStage(
                        layout.reverse.expect("nat has a reverse stage"),
                    ))
                    .tagged("nat"),
            );
        }
        stages.push(
            StageConfig::stateful(ExtractorConfig::bidirectional_four_tuple())
                .named("classify")
                .with_conditions(conditions)
                .with_entries(prioritize(entries)),
        );
    }

    if let (Some(_), Some(n)) = (layout.stack, &nat) {
        let mut pop = EfsmEntry::new(0)
            .action(Action::SetMetaFrom {
                range: NAT_META,
                src: Operand::State,
            })
            .action(Action::GotoStage(layout.reverse.expect("reverse stage")))
            .tagged("nat");
        pop.conds = cond(0, true);
        let mut s = StageConfig::stateful(ExtractorConfig::new(vec![FieldId::Meta(NAT_META)]))
            .named("port-stack")
            .with_conditions(vec![Condition::new(
                Operand::State,
                CondOp::Gt,
                Operand::Const(0),
            )])
            .with_entries(vec![pop]);
        s.capacity = Some((n.ports.1 - n.ports.0) as usize + 2);
        stages.push(s);

        let lookup = ExtractorConfig::new(vec![FieldId::IpSrc, FieldId::L4Src, FieldId::L4Dst]);
        let update = ExtractorConfig::new(vec![
            FieldId::IpDst,
            FieldId::L4Dst,
            FieldId::Meta(NAT_META),
        ]);
        let store = EfsmEntry::new(0)
            .matching(in_port(n.inside_port))
            .set_state(NextState::with_idle(NAT_STORED, idle))
            .update(mov(UpdateDst::FlowReg(0), Operand::Field(FieldId::IpSrc)))
            .update(mov(UpdateDst::FlowReg(1), Operand::Field(FieldId::L4Src)))
            .action(Action::GotoStage(layout.rewrite.expect("rewrite stage")))
            .tagged("nat");
        let restore = EfsmEntry::new(0)
            .in_state(NAT_STORED)
            .matching(in_port(n.outside_port))
            .action(Action::SetFieldFrom {
                field: FieldId::IpDst,
                src: Operand::FlowReg(0),
            })
            .action(Action::SetFieldFrom {
                field: FieldId::L4Dst,
                src: Operand::FlowReg(1),
            })
            .action(Action::GotoStage(fwd))
            .tagged("nat");
        stages.push(
            StageConfig::cross_flow(lookup, update)
                .named("nat-reverse")
                .with_entries(prioritize(vec![store, restore])),
        );
    }

    if layout.rewrite.is_some() {
        let mut entries = Vec::new();
        for lb in &lbs {
            let mut fields = vec![in_port(lb.in_port)];
            fields.extend(lb.matches.iter().cloned());
            for &(arm, addr, port) in &lb.arms {
                let mut e = EfsmEntry::new(0).in_state(0).action(Action::SetField {
                    field: FieldId::IpDst,
                    value: u32::from(addr) as u64,
                });
                if let Some(p) = port {
                    e = e.action(Action::SetField {
                        field: FieldId::L4Dst,
                        value: p as u64,
                    });
                }
                e = e
                    .action(Action::GotoStage(fwd))
                    .set_state(NextState::with_idle(LB_ASSIGNED, idle))
                    .update(mov(UpdateDst::FlowReg(0), Operand::Field(FieldId::IpDst)))
                    .update(mov(UpdateDst::FlowReg(1), Operand::Field(FieldId::L4Dst)))
                    .tagged("balance");
                e.fields = fields.clone();
                if let Some((mask, residue)) = arm {
                    e.fields.push(FieldMatch::masked(
                        FieldId::Meta(LB_META),
                        residue as u64,
                        mask as u64,
                    ));
                }
                entries.push(e);
            }
            let mut again = EfsmEntry::new(0)
                .in_state(LB_ASSIGNED)
                .action(Action::SetFieldFrom {
                    field: FieldId::IpDst,
                    src: Operand::FlowReg(0),
                })
                .action(Action::SetFieldFrom {
                    field: FieldId::L4Dst,
                    src: Operand::FlowReg(1),
                })
                .action(Action::GotoStage(fwd))
                .tagged("balance");
            again.fields = fields;
            entries.push(again);
        }
        if let Some(n) = &nat {
            let public = Action::SetField {
                field: FieldId::IpSrc,
                value: u32::from(n.public) as u64,
            };
            entries.push(
                EfsmEntry::new(0)
                    .in_state(0)
                    .matching(in_port(n.inside_port))
                    .action(public)
                    .action(Action::SetFieldFrom {
                        field: FieldId::L4Src,
                        src: meta(NAT_META),
                    })
                    .action(Action::GotoStage(fwd))
                    .set_state(NextState::with_idle(NAT_TRANSLATED, idle))
                    .update(mov(UpdateDst::FlowReg(0), Operand::Field(FieldId::L4Src)))
                    .tagged("nat"),
            );
            entries.push(
                EfsmEntry::new(0)
                    .in_state(NAT_TRANSLATED)
                    .matching(in_port(n.inside_port))
                    .action(public)
                    .action(Action::SetFieldFrom {
                        field: FieldId::L4Src,
                        src: Operand::FlowReg(0),
                    })
                    .action(Action::GotoStage(fwd))
                    .tagged("nat"),
            );
        }
        stages.push(
            StageConfig::stateful(ExtractorConfig::four_tuple())
                .named("rewrite")
                .with_entries(prioritize(entries)),
        );
    }

    let mut forward = Vec::new();
    for (index, r) in set.forward.iter().enumerate() {
        let mut e = EfsmEntry::new(0).tagged("filter");
        e.fields.extend(ctx.port(&r.in_iface)?.map(in_port));
        e.fields
            .extend(ctx.subnet(&r.out_iface)?.map(|n| net(FieldId::IpDst, n)));
        e.fields.extend(header_matches(r));
        match r.state {
            Some(s) if s.established && !s.new => e.fields.push(FieldMatch::exact(
                FieldId::Meta(CT_META),
                CT_FLAG_ESTABLISHED as u64,
            )),
            Some(s) if s.new && !s.established => {
                e.fields.push(FieldMatch::exact(FieldId::Meta(CT_META), 0))
            }
            _ => {}
        }
        match r.target {
            Target::Accept => {
                let o = ctx
                    .port(&r.out_iface)?
                    .ok_or(TranslateError::AcceptNeedsOut {
                        chain: Chain::Forward,
                        index,
                    })?;
                e.actions.push(Action::Output(o));
            }
            Target::Drop => e.actions.push(Action::Drop),
            _ => unreachable!("parser only allows ACCEPT/DROP in FORWARD"),
        }
        forward.push(e);
    }
    let mut inbound = Vec::new();
    let mut outbound = Vec::new();
    for lb in &lbs {
        for &(_, addr, _) in &lb.arms {
            let server = ctx
                .topo
                .iface_for(addr)
                .ok_or(TranslateError::UnroutableTarget(addr))?;
            let subnet = server.subnet.expect("iface_for only returns subnets");
            push_unique(
                &mut inbound,
                EfsmEntry::new(0)
                    .matching(in_port(lb.in_port))
                    .matching(net(FieldId::IpDst, subnet))
                    .action(Action::Output(server.port))
                    .tagged("route"),
            );
            push_unique(
                &mut outbound,
                EfsmEntry::new(0)
                    .matching(in_port(server.port))
                    .action(Action::SetField {
                        field: FieldId::IpSrc,
                        value: u32::from(lb.public) as u64,
                    })
                    .action(Action::Output(lb.in_port))
                    .tagged("route"),
            );
        }
    }
    if let Some(n) = &nat {
        let inside = topo
            .interfaces
            .iter()
            .find(|i| i.port == n.inside_port)
            .expect("inside interface resolved earlier");
        if let Some(subnet) = inside.subnet {
            push_unique(
                &mut inbound,
                EfsmEntry::new(0)
                    .matching(in_port(n.outside_port))
                    .matching(net(FieldId::IpDst, subnet))
                    .action(Action::Output(n.inside_port))
                    .tagged("route"),
            );
        }
        push_unique(
            &mut outbound,
            EfsmEntry::new(0)
                .matching(in_port(n.inside_port))
                .action(Action::SetField {
                    field: FieldId::IpSrc,
                    value: u32::from(n.public) as u64,
                })
                .action(Action::Output(n.outside_port))
                .tagged("route"),
        );
    }
    forward.extend(inbound);
    forward.extend(outbound);
    stages.push(
        StageConfig::stateless()
            .named("forward")
            .with_entries(prioritize(forward)),
    );

    let config = PipelineConfig::new(topo.ports(), stages);
    Ok(Translation {
        config,
        layout,
        nat,
    })
}

/// Entries of `stage` carrying `tag`.
pub fn tagged_entries<'a>(
    config: &'a PipelineConfig,
    stage: usize,
    tag: &str,
) -> Vec<&'a EfsmEntry> {
    config.stages[stage]
        .entries
        .iter()
        .filter(|e| e.tag.as_deref() == Some(tag))
        .collect()
}
