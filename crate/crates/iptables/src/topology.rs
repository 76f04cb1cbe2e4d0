// SPDX-License-Identifier: Apache-2.0
// Copyright The opp-engine Authors

//! Port, interface and address bindings of the device.

use std::net::Ipv4Addr;

use ipnet::Ipv4Net;
use opp_core::PortDecl;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interface {
    pub name: String,
    pub port: u16,
    /// The device's own address on this interface.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub address: Option<Ipv4Addr>,
    /// Directly attached network. The external interface usually has none
    /// and acts as the default route.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subnet: Option<Ipv4Net>,
    #[serde(default)]
    pub external: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub interfaces: Vec<Interface>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("topology is not valid JSON: {0}")]
    Json(String),
    #[error("interface `{0}` declared twice")]
    DuplicateName(String),
    #[error("port {0} bound to two interfaces")]
    DuplicatePort(u16),
    #[error("ports must be numbered 0..{0} without gaps")]
    PortGap(usize),
}

impl Topology {
    pub fn from_json(text: &str) -> Result<Self, TopologyError> {
        let t: Topology =
            serde_json::from_str(text).map_err(|e| TopologyError::Json(e.to_string()))?;
        t.check()?;
        Ok(t)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("topology serializes")
    }

    pub fn check(&self) -> Result<(), TopologyError> {
        let mut ports: Vec<u16> = Vec::new();
        for (i, a) in self.interfaces.iter().enumerate() {
            if self.interfaces[..i].iter().any(|b| b.name == a.name) {
                return Err(TopologyError::DuplicateName(a.name.clone()));
            }
            if ports.contains(&a.port) {
                return Err(TopologyError::DuplicatePort(a.port));
            }
            ports.push(a.port);
        }
        ports.sort_unstable();
        if ports.iter().enumerate().any(|(i, p)| *p as usize != i) {
            return Err(TopologyError::PortGap(ports.len()));
        }
        Ok(())
    }

    pub fn iface(&self, name: &str) -> Option<&Interface> {
        self.interfaces.iter().find(|i| i.name == name)
    }

    /// The interface whose attached subnet holds `addr`, most specific first.
    pub fn iface_for(&self, addr: Ipv4Addr) -> Option<&Interface> {
        self.interfaces
            .iter()
            .filter(|i| i.subnet.is_some_and(|n| n.contains(&addr)))
            .max_by_key(|i| i.subnet.map(|n| n.prefix_len()))
    }

    pub fn ports(&self) -> Vec<PortDecl> {
        let mut ports: Vec<PortDecl> = self
            .interfaces
            .iter()
            .map(|i| PortDecl {
                port: i.port,
                name: i.name.clone(),
                external: i.external,
            })
            .collect();
        ports.sort_by_key(|p| p.port);
        ports
    }
}
