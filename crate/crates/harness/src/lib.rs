// SPDX-License-Identifier: Apache-2.0
// Copyright The opp-engine Authors

//! Synthetic traffic, pcap ingest and export, replay with an equivalence
//! oracle against single-worker execution, and throughput benchmarks.

pub mod bench;
pub mod pcap;
pub mod replay;
pub mod traffic;
pub mod usecase;
