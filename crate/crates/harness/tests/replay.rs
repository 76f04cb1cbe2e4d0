// SPDX-License-Identifier: Apache-2.0
// Copyright The opp-engine Authors

use std::net::Ipv4Addr;

use opp_core::{Decision, PacketView, Timestamp};
use opp_harness::replay::{linearize, replay, replay_with_oracle, ReplayOptions};
use opp_harness::traffic::gen_traffic;
use opp_harness::usecase::{scenario, traffic_spec, UseCase};

fn tcp(in_port: u16, src: (Ipv4Addr, u16), dst: (Ipv4Addr, u16), ms: u64) -> PacketView {
    PacketView::tcp(in_port, src, dst, Timestamp(ms))
}

#[test]
fn oracle_passes_for_every_use_case_and_worker_count() {
    for uc in UseCase::ALL {
        let t = gen_traffic(&traffic_spec(uc, 5000), 7).unwrap();
        for w in [1, 2, 4] {
            let opts = ReplayOptions::default().with_workers(w);
            let (run, oracle) = replay_with_oracle(&scenario(uc), &t.packets, &opts).unwrap();
            assert!(
                oracle.passed(),
                "{} W={w}: {:?}",
                uc.name(),
                oracle.first_divergence
            );
            assert_eq!(run.report.packets, t.packets.len());
            if w == 1 {
                assert_eq!(oracle.reordered, 0);
                assert_eq!(oracle.order_dependent_flows, 0);
            }
            if uc == UseCase::Firewall {
                assert_eq!(
                    oracle.order_dependent_flows, 0,
                    "firewall has no global state"
                );
            }
        }
    }
}

#[test]
fn replay_digests_are_deterministic() {
    for uc in UseCase::ALL {
        let t = gen_traffic(&traffic_spec(uc, 2000), 3).unwrap();
        let opts = ReplayOptions::default().with_workers(1);
        let a = replay(&scenario(uc), &t.packets, &opts).unwrap().report;
        let b = replay(&scenario(uc), &t.packets, &opts).unwrap().report;
        assert_eq!(
            (&a.verdict_digest, &a.flow_order_digest, &a.state_digest),
            (&b.verdict_digest, &b.flow_order_digest, &b.state_digest)
        );
    }
}

#[test]
fn firewall_trace_blocks_then_admits_after_handshake() {
    let lan = (Ipv4Addr::new(10, 0, 0, 2), 1234);
    let dmz = (Ipv4Addr::new(8, 0, 0, 5), 80);
    let pkts: Vec<PacketView> = vec![
        tcp(1, dmz, lan, 0),
        tcp(2, lan, dmz, 10),
        tcp(1, dmz, lan, 20),
        tcp(1, dmz, lan, 30),
    ]
    .into_iter()
    .enumerate()
    .map(|(i, mut p)| {
        p.arrival_seq = i as u64;
        p
    })
    .collect();
    let run = replay(
        &scenario(UseCase::Firewall),
        &pkts,
        &ReplayOptions::default(),
    )
    .unwrap();
    let v: Vec<Decision> = run.decisions.iter().map(|d| d.verdict).collect();
    assert_eq!(
        v,
        vec![
            Decision::Drop,
            Decision::Output(1),
            Decision::Output(2),
            Decision::Output(2)
        ]
    );
}

#[test]
fn balancer_alternates_in_grant_order_under_workers() {
    let vip = (Ipv4Addr::new(1, 0, 0, 1), 80);
    let pkts: Vec<PacketView> = (0..400u64)
        .map(|i| {
            let client = (
                Ipv4Addr::new(2, 0, (i % 40) as u8, 9),
                2000 + (i % 40) as u16,
            );
            let mut p = tcp(0, client, vip, i);
            p.arrival_seq = i;
            p
        })
        .collect();
    let run = replay(
        &scenario(UseCase::Balancer),
        &pkts,
        &ReplayOptions::default().with_workers(4),
    )
    .unwrap();
    let mut firsts: Vec<(u64, usize)> = (0..pkts.len())
        .filter_map(|i| run.grants[i].first().map(|g| (g.1, i)))
        .collect();
    firsts.sort();
    assert_eq!(firsts.len(), 40);
    let servers = [Ipv4Addr::new(10, 0, 0, 2), Ipv4Addr::new(10, 0, 0, 3)];
    for (k, (_, i)) in firsts.iter().enumerate() {
        assert_eq!(
            Ipv4Addr::from(run.decisions[*i].packet.ip_dst),
            servers[k % 2]
        );
    }
    for c in 0..40usize {
        let dsts: std::collections::BTreeSet<u32> = (c..400)
            .step_by(40)
            .map(|i| run.decisions[i].packet.ip_dst)
            .collect();
        assert_eq!(dsts.len(), 1, "client {c} moved between servers");
    }
}

#[test]
fn linearize_respects_worker_and_grant_order() {
    let workers = vec![vec![0, 2, 4], vec![1, 3]];
    let mut grants = vec![Vec::new(); 5];
    grants[4] = vec![(0, 0)];
    grants[1] = vec![(0, 1)];
    assert_eq!(linearize(&workers, &grants), Some(vec![0, 2, 4, 1, 3]));
    grants[0] = vec![(0, 2)];
    assert_eq!(linearize(&workers, &grants), None);
}

#[test]
fn empty_stream_replays_to_zero() {
    let (run, oracle) = replay_with_oracle(
        &scenario(UseCase::Nat),
        &[],
        &ReplayOptions::default().with_workers(2),
    )
    .unwrap();
    assert_eq!(run.report.packets, 0);
    assert_eq!(run.report.pps, 0.0);
    assert!(oracle.passed());
}
