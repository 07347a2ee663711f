//! Network graph with per-link bandwidth ledgers and per-fog compute ledgers.
//!
//! Links are directed; a physical full-duplex cable is two links. Every link
//! carries a startup control-traffic reservation that is charged when the
//! link is added and never released.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{DeviceType, Greeting};

/// Bits per second.
pub type Bps = u64;
/// Switch port number.
pub type PortNo = u32;

/// Default bandwidth set aside on every link for controller traffic.
pub const DEFAULT_CONTROL_BW: Bps = 50_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("node id must be non-empty")]
    EmptyNodeId,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("duplicate node {0}")]
    DuplicateNode(NodeId),
    #[error("unknown link {0} -> {1}")]
    UnknownLink(NodeId, NodeId),
    #[error("duplicate link {0} -> {1}")]
    DuplicateLink(NodeId, NodeId),
    #[error("link {src} -> {dst} references a node missing from the snapshot")]
    DanglingLink { src: NodeId, dst: NodeId },
    #[error("link {0} -> {1} has no reverse link")]
    MissingReverse(NodeId, NodeId),
    #[error("link {src} -> {dst} capacity {total} bps is below its allocation {allocated} bps")]
    LinkCapacityBelowAllocation {
        src: NodeId,
        dst: NodeId,
        total: Bps,
        allocated: Bps,
    },
    #[error("fog-device {0} capacity is below its allocation")]
    ComputeBelowAllocation(NodeId),
    #[error("insufficient bandwidth on {src} -> {dst}: need {needed} bps, {available} bps available")]
    InsufficientBandwidth {
        src: NodeId,
        dst: NodeId,
        needed: Bps,
        available: Bps,
    },
    #[error("releasing {amount} bps on {src} -> {dst} would undercut its allocation")]
    BandwidthUnderflow { src: NodeId, dst: NodeId, amount: Bps },
    #[error("insufficient compute on {0}")]
    InsufficientCompute(NodeId),
    #[error("releasing compute on {0} would undercut its allocation")]
    ComputeUnderflow(NodeId),
    #[error("{0} is not a fog-device")]
    NotFogDevice(NodeId),
    #[error("fog-device {0} is missing capacity fields")]
    MissingCapacity(NodeId),
    #[error("misconfigured device {node}: registered as {existing:?}, greeting claims {claimed:?}")]
    ConflictingRegistration {
        node: NodeId,
        existing: NodeKind,
        claimed: NodeKind,
    },
    #[error("malformed MAC address {0:?}")]
    MalformedMac(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

/// Opaque node identifier such as `openflow:7`, `end:3` or `fog:2`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Result<Self, TopologyError> {
        let id = id.into();
        if id.is_empty() {
            return Err(TopologyError::EmptyNodeId);
        }
        Ok(NodeId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for NodeId {
    type Error = TopologyError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        NodeId::new(value)
    }
}

impl From<NodeId> for String {
    fn from(id: NodeId) -> Self {
        id.0
    }
}

impl FromStr for NodeId {
    type Err = TopologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NodeId::new(s)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    EndDevice,
    FogDevice,
    Switch,
    Controller,
    #[default]
    Unknown,
}

impl From<DeviceType> for NodeKind {
    fn from(t: DeviceType) -> Self {
        match t {
            DeviceType::EndDevice => NodeKind::EndDevice,
            DeviceType::FogDevice => NodeKind::FogDevice,
        }
    }
}

/// CPU capacity in thousandths of a core.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Millicores(pub u64);

impl Millicores {
    /// Rounds to the nearest millicore; negative and NaN inputs map to zero.
    pub fn from_cores(cores: f64) -> Self {
        if cores.is_nan() || cores <= 0.0 {
            return Millicores(0);
        }
        Millicores((cores * 1000.0).round() as u64)
    }

    pub fn as_cores(self) -> f64 {
        self.0 as f64 / 1000.0
    }
}

impl fmt::Display for Millicores {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_cores())
    }
}

/// Processing and memory ledger of a fog-device.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeLedger {
    pub total_processing: Millicores,
    pub total_memory: u64,
    pub alloc_processing: Millicores,
    pub alloc_memory: u64,
}

impl ComputeLedger {
    pub fn new(total_processing: Millicores, total_memory: u64) -> Self {
        ComputeLedger {
            total_processing,
            total_memory,
            alloc_processing: Millicores(0),
            alloc_memory: 0,
        }
    }

    pub fn free_processing(&self) -> Millicores {
        Millicores(self.total_processing.0 - self.alloc_processing.0)
    }

    pub fn free_memory(&self) -> u64 {
        self.total_memory - self.alloc_memory
    }

    fn holds(&self) -> bool {
        self.alloc_processing <= self.total_processing && self.alloc_memory <= self.total_memory
    }
}

/// Last resource report received from a fog-device agent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub processor_utilization: f64,
    pub memory_utilization: f64,
    pub timestamp_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    pub compute: Option<ComputeLedger>,
    pub address: Option<String>,
    pub telemetry: Option<Telemetry>,
}

impl Node {
    pub fn new(id: NodeId, kind: NodeKind) -> Self {
        Node {
            id,
            kind,
            compute: None,
            address: None,
            telemetry: None,
        }
    }

    pub fn fog(id: NodeId, processing: Millicores, memory: u64) -> Self {
        Node {
            compute: Some(ComputeLedger::new(processing, memory)),
            ..Node::new(id, NodeKind::FogDevice)
        }
    }

    pub fn with_address(mut self, address: impl Into<String>) -> Self {
        self.address = Some(address.into());
        self
    }

    /// Address used in flow matches; falls back to the node id.
    pub fn flow_address(&self) -> String {
        self.address.clone().unwrap_or_else(|| self.id.to_string())
    }
}

/// A directed link `src -> dst`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    pub src: NodeId,
    pub dst: NodeId,
    pub src_port: PortNo,
    pub dst_port: PortNo,
    pub total_bw: Bps,
    pub alloc_bw: Bps,
    /// Raw utilization counter from the switch inventory. Recorded only;
    /// allocation decisions use the ledger.
    pub utilization_bps: Option<Bps>,
}

impl Link {
    pub fn available_bw(&self) -> Bps {
        available_bw(self)
    }
}

/// Spare capacity of a link, `total - allocated`.
pub fn available_bw(link: &Link) -> Bps {
    link.total_bw.saturating_sub(link.alloc_bw)
}

/// Node declaration as it appears in topology files and snapshots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeDecl {
    pub id: NodeId,
    #[serde(default)]
    pub kind: NodeKind,
    /// CPU cores; fractional values are kept to the millicore.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_processing: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_memory: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub address: Option<String>,
}

impl NodeDecl {
    pub fn new(id: NodeId, kind: NodeKind) -> Self {
        NodeDecl {
            id,
            kind,
            total_processing: None,
            total_memory: None,
            address: None,
        }
    }

    pub fn capacity(&self) -> Option<(Millicores, u64)> {
        match (self.total_processing, self.total_memory) {
            (Some(p), Some(m)) => Some((Millicores::from_cores(p), m)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkDecl {
    pub src: NodeId,
    pub dst: NodeId,
    pub src_port: PortNo,
    pub dst_port: PortNo,
    pub total_bw: Bps,
}

impl LinkDecl {
    pub fn reversed(&self) -> LinkDecl {
        LinkDecl {
            src: self.dst.clone(),
            dst: self.src.clone(),
            src_port: self.dst_port,
            dst_port: self.src_port,
            total_bw: self.total_bw,
        }
    }
}

fn default_duplex() -> bool {
    true
}

/// The topology file format, also used as a full observed snapshot.
///
/// With `duplex` set (the default) every declared link also declares its
/// reverse, unless the reverse is listed explicitly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologySnapshot {
    pub nodes: Vec<NodeDecl>,
    pub links: Vec<LinkDecl>,
    #[serde(default = "default_duplex")]
    pub duplex: bool,
}

impl TopologySnapshot {
    /// Directed links keyed by endpoints, with reverse edges generated.
    pub fn directed_links(&self) -> BTreeMap<(NodeId, NodeId), LinkDecl> {
        let mut out = BTreeMap::new();
        for l in &self.links {
            out.insert((l.src.clone(), l.dst.clone()), l.clone());
        }
        if self.duplex {
            for l in &self.links {
                out.entry((l.dst.clone(), l.src.clone()))
                    .or_insert_with(|| l.reversed());
            }
        }
        out
    }

    fn node_map(&self) -> Result<BTreeMap<NodeId, NodeDecl>, TopologyError> {
        let mut nodes = BTreeMap::new();
        for n in &self.nodes {
            if nodes.insert(n.id.clone(), n.clone()).is_some() {
                return Err(TopologyError::DuplicateNode(n.id.clone()));
            }
        }
        Ok(nodes)
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("snapshot serializes")
    }
}

/// Difference between a topology and an observed snapshot.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChangeSet {
    pub added_nodes: Vec<NodeDecl>,
    pub removed_nodes: Vec<NodeId>,
    /// Surviving nodes whose declared kind, capacity or address changed.
    pub changed_nodes: Vec<NodeDecl>,
    pub added_links: Vec<LinkDecl>,
    pub removed_links: Vec<(NodeId, NodeId)>,
    /// Surviving links whose ports or capacity changed.
    pub changed_links: Vec<LinkDecl>,
}

impl ChangeSet {
    pub fn is_empty(&self) -> bool {
        self.added_nodes.is_empty()
            && self.removed_nodes.is_empty()
            && self.changed_nodes.is_empty()
            && self.added_links.is_empty()
            && self.removed_links.is_empty()
            && self.changed_links.is_empty()
    }

    /// Whether the link `src -> dst` disappears under this change set,
    /// directly or with one of its endpoints.
    pub fn removes_link(&self, src: &NodeId, dst: &NodeId) -> bool {
        self.removed_links.iter().any(|(s, d)| s == src && d == dst)
            || self.removed_nodes.iter().any(|n| n == src || n == dst)
    }

    /// Applies the change set. Callers validate with [`Topology::diff`]
    /// first; an error here leaves the topology partially updated.
    pub fn apply(&self, topology: &mut Topology) -> Result<(), TopologyError> {
        if self.is_empty() {
            return Ok(());
        }
        for (src, dst) in &self.removed_links {
            topology.links.remove(&(src.clone(), dst.clone()));
            if let Some(out) = topology.adjacency.get_mut(src) {
                out.remove(dst);
            }
        }
        for id in &self.removed_nodes {
            topology.detach_node(id);
        }
        for decl in &self.added_nodes {
            topology.nodes.insert(decl.id.clone(), node_from_decl(decl));
            topology.adjacency.entry(decl.id.clone()).or_default();
        }
        for decl in &self.changed_nodes {
            let node = topology
                .nodes
                .get_mut(&decl.id)
                .ok_or_else(|| TopologyError::UnknownNode(decl.id.clone()))?;
            if decl.kind != NodeKind::Unknown && decl.kind != node.kind {
                node.kind = decl.kind;
                if decl.kind != NodeKind::FogDevice {
                    node.compute = None;
                }
            }
            if node.kind == NodeKind::FogDevice {
                node.compute.get_or_insert_with(ComputeLedger::default);
                if let Some((p, m)) = decl.capacity() {
                    let ledger = node.compute.get_or_insert_with(ComputeLedger::default);
                    ledger.total_processing = p;
                    ledger.total_memory = m;
                }
            }
            if decl.address.is_some() {
                node.address = decl.address.clone();
            }
        }
        for decl in &self.changed_links {
            let link = topology
                .links
                .get_mut(&(decl.src.clone(), decl.dst.clone()))
                .ok_or_else(|| TopologyError::UnknownLink(decl.src.clone(), decl.dst.clone()))?;
            link.src_port = decl.src_port;
            link.dst_port = decl.dst_port;
            link.total_bw = decl.total_bw;
        }
        for decl in &self.added_links {
            topology.insert_link(decl)?;
        }
        topology.revision += 1;
        Ok(())
    }
}

fn node_from_decl(decl: &NodeDecl) -> Node {
    let mut node = Node::new(decl.id.clone(), decl.kind);
    node.address = decl.address.clone();
    if decl.kind == NodeKind::FogDevice {
        let (p, m) = decl.capacity().unwrap_or_default();
        node.compute = Some(ComputeLedger::new(p, m));
    }
    node
}

/// The network graph. All mutation goes through methods that keep the
/// adjacency index and ledgers consistent and bump the revision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    nodes: BTreeMap<NodeId, Node>,
    links: BTreeMap<(NodeId, NodeId), Link>,
    adjacency: BTreeMap<NodeId, BTreeSet<NodeId>>,
    revision: u64,
    control_bw: Bps,
}

impl Default for Topology {
    fn default() -> Self {
        Topology::new(DEFAULT_CONTROL_BW)
    }
}

impl Topology {
    /// An empty topology whose links will each carry `control_bw` of
    /// reserved control traffic.
    pub fn new(control_bw: Bps) -> Self {
        Topology {
            nodes: BTreeMap::new(),
            links: BTreeMap::new(),
            adjacency: BTreeMap::new(),
            revision: 0,
            control_bw,
        }
    }

    /// Builds a topology from a file document.
    pub fn from_snapshot(doc: &TopologySnapshot, control_bw: Bps) -> Result<Self, TopologyError> {
        let mut t = Topology::new(control_bw);
        t.update_topology(doc)?;
        Ok(t)
    }

    pub fn from_json(text: &str, control_bw: Bps) -> Result<Self, TopologyFileError> {
        let doc = TopologySnapshot::from_json(text)?;
        Ok(Topology::from_snapshot(&doc, control_bw)?)
    }

    /// Exports the structure as a snapshot with explicit directed links.
    pub fn to_snapshot(&self) -> TopologySnapshot {
        TopologySnapshot {
            nodes: self
                .nodes
                .values()
                .map(|n| NodeDecl {
                    id: n.id.clone(),
                    kind: n.kind,
                    total_processing: n.compute.map(|c| c.total_processing.as_cores()),
                    total_memory: n.compute.map(|c| c.total_memory),
                    address: n.address.clone(),
                })
                .collect(),
            links: self
                .links
                .values()
                .map(|l| LinkDecl {
                    src: l.src.clone(),
                    dst: l.dst.clone(),
                    src_port: l.src_port,
                    dst_port: l.dst_port,
                    total_bw: l.total_bw,
                })
                .collect(),
            duplex: false,
        }
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn control_bw(&self) -> Bps {
        self.control_bw
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn node(&self, id: &NodeId) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn nodes_of(&self, kind: NodeKind) -> impl Iterator<Item = &Node> {
        self.nodes.values().filter(move |n| n.kind == kind)
    }

    pub fn kind(&self, id: &NodeId) -> Option<NodeKind> {
        self.nodes.get(id).map(|n| n.kind)
    }

    pub fn link(&self, src: &NodeId, dst: &NodeId) -> Option<&Link> {
        self.links.get(&(src.clone(), dst.clone()))
    }

    pub fn reverse(&self, link: &Link) -> Option<&Link> {
        self.link(&link.dst, &link.src)
    }

    pub fn links(&self) -> impl Iterator<Item = &Link> {
        self.links.values()
    }

    /// Outgoing links of `id` in destination order.
    pub fn outgoing<'a>(&'a self, id: &'a NodeId) -> impl Iterator<Item = &'a Link> + 'a {
        self.adjacency
            .get(id)
            .into_iter()
            .flat_map(move |dsts| dsts.iter().map(move |d| &self.links[&(id.clone(), d.clone())]))
    }

    pub fn add_node(&mut self, node: Node) -> Result<(), TopologyError> {
        if self.nodes.contains_key(&node.id) {
            return Err(TopologyError::DuplicateNode(node.id));
        }
        self.adjacency.entry(node.id.clone()).or_default();
        self.nodes.insert(node.id.clone(), node);
        self.revision += 1;
        Ok(())
    }

    /// Removes a node and every link touching it.
    pub fn remove_node(&mut self, id: &NodeId) -> Result<Node, TopologyError> {
        if !self.nodes.contains_key(id) {
            return Err(TopologyError::UnknownNode(id.clone()));
        }
        let node = self.detach_node(id).expect("checked above");
        self.revision += 1;
        Ok(node)
    }

    fn detach_node(&mut self, id: &NodeId) -> Option<Node> {
        let node = self.nodes.remove(id)?;
        if let Some(out) = self.adjacency.remove(id) {
            for dst in out {
                self.links.remove(&(id.clone(), dst));
            }
        }
        for (src, out) in self.adjacency.iter_mut() {
            if out.remove(id) {
                self.links.remove(&(src.clone(), id.clone()));
            }
        }
        Some(node)
    }

    /// Adds one directed link, charged with the control reservation.
    pub fn add_link(&mut self, decl: LinkDecl) -> Result<(), TopologyError> {
        for end in [&decl.src, &decl.dst] {
            if !self.nodes.contains_key(end) {
                return Err(TopologyError::UnknownNode(end.clone()));
            }
        }
        if self.links.contains_key(&(decl.src.clone(), decl.dst.clone())) {
            return Err(TopologyError::DuplicateLink(decl.src, decl.dst));
        }
        if decl.total_bw < self.control_bw {
            return Err(TopologyError::LinkCapacityBelowAllocation {
                src: decl.src,
                dst: decl.dst,
                total: decl.total_bw,
                allocated: self.control_bw,
            });
        }
        self.insert_link(&decl)?;
        self.revision += 1;
        Ok(())
    }

    /// Adds `a -> b` and `b -> a` with the same capacity.
    pub fn add_duplex_link(
        &mut self,
        a: &NodeId,
        a_port: PortNo,
        b: &NodeId,
        b_port: PortNo,
        total_bw: Bps,
    ) -> Result<(), TopologyError> {
        let fwd = LinkDecl {
            src: a.clone(),
            dst: b.clone(),
            src_port: a_port,
            dst_port: b_port,
            total_bw,
        };
        if self.links.contains_key(&(b.clone(), a.clone())) {
            return Err(TopologyError::DuplicateLink(b.clone(), a.clone()));
        }
        self.add_link(fwd.clone())?;
        self.add_link(fwd.reversed())
    }

    fn insert_link(&mut self, decl: &LinkDecl) -> Result<(), TopologyError> {
        if decl.total_bw < self.control_bw {
            return Err(TopologyError::LinkCapacityBelowAllocation {
                src: decl.src.clone(),
                dst: decl.dst.clone(),
                total: decl.total_bw,
                allocated: self.control_bw,
            });
        }
        self.links.insert(
            (decl.src.clone(), decl.dst.clone()),
            Link {
                src: decl.src.clone(),
                dst: decl.dst.clone(),
                src_port: decl.src_port,
                dst_port: decl.dst_port,
                total_bw: decl.total_bw,
                alloc_bw: self.control_bw,
                utilization_bps: None,
            },
        );
        self.adjacency
            .entry(decl.src.clone())
            .or_default()
            .insert(decl.dst.clone());
        Ok(())
    }

    pub fn remove_link(&mut self, src: &NodeId, dst: &NodeId) -> Result<Link, TopologyError> {
        let link = self
            .links
            .remove(&(src.clone(), dst.clone()))
            .ok_or_else(|| TopologyError::UnknownLink(src.clone(), dst.clone()))?;
        if let Some(out) = self.adjacency.get_mut(src) {
            out.remove(dst);
        }
        self.revision += 1;
        Ok(link)
    }

    pub fn charge_bw(&mut self, src: &NodeId, dst: &NodeId, amount: Bps) -> Result<(), TopologyError> {
        let link = self
            .links
            .get_mut(&(src.clone(), dst.clone()))
            .ok_or_else(|| TopologyError::UnknownLink(src.clone(), dst.clone()))?;
        let available = available_bw(link);
        if amount > available {
            return Err(TopologyError::InsufficientBandwidth {
                src: src.clone(),
                dst: dst.clone(),
                needed: amount,
                available,
            });
        }
        link.alloc_bw += amount;
        self.revision += 1;
        Ok(())
    }

    /// Releases bandwidth. The control reservation can never be released.
    pub fn release_bw(&mut self, src: &NodeId, dst: &NodeId, amount: Bps) -> Result<(), TopologyError> {
        let control = self.control_bw;
        let link = self
            .links
            .get_mut(&(src.clone(), dst.clone()))
            .ok_or_else(|| TopologyError::UnknownLink(src.clone(), dst.clone()))?;
        if link.alloc_bw < control + amount {
            return Err(TopologyError::BandwidthUnderflow {
                src: src.clone(),
                dst: dst.clone(),
                amount,
            });
        }
        link.alloc_bw -= amount;
        self.revision += 1;
        Ok(())
    }

    pub fn charge_compute(&mut self, fog: &NodeId, processing: Millicores, memory: u64) -> Result<(), TopologyError> {
        let ledger = self.ledger_mut(fog)?;
        if processing > ledger.free_processing() || memory > ledger.free_memory() {
            return Err(TopologyError::InsufficientCompute(fog.clone()));
        }
        ledger.alloc_processing.0 += processing.0;
        ledger.alloc_memory += memory;
        self.revision += 1;
        Ok(())
    }

    pub fn release_compute(&mut self, fog: &NodeId, processing: Millicores, memory: u64) -> Result<(), TopologyError> {
        let ledger = self.ledger_mut(fog)?;
        if processing > ledger.alloc_processing || memory > ledger.alloc_memory {
            return Err(TopologyError::ComputeUnderflow(fog.clone()));
        }
        ledger.alloc_processing.0 -= processing.0;
        ledger.alloc_memory -= memory;
        self.revision += 1;
        Ok(())
    }

    fn ledger_mut(&mut self, fog: &NodeId) -> Result<&mut ComputeLedger, TopologyError> {
        let node = self
            .nodes
            .get_mut(fog)
            .ok_or_else(|| TopologyError::UnknownNode(fog.clone()))?;
        node.compute
            .as_mut()
            .filter(|_| node.kind == NodeKind::FogDevice)
            .ok_or_else(|| TopologyError::NotFogDevice(fog.clone()))
    }

    pub fn set_link_utilization(&mut self, src: &NodeId, dst: &NodeId, bps: Bps) -> Result<(), TopologyError> {
        let link = self
            .links
            .get_mut(&(src.clone(), dst.clone()))
            .ok_or_else(|| TopologyError::UnknownLink(src.clone(), dst.clone()))?;
        link.utilization_bps = Some(bps);
        self.revision += 1;
        Ok(())
    }

    pub fn set_telemetry(&mut self, fog: &NodeId, telemetry: Telemetry) -> Result<(), TopologyError> {
        let node = self
            .nodes
            .get_mut(fog)
            .ok_or_else(|| TopologyError::UnknownNode(fog.clone()))?;
        if node.kind != NodeKind::FogDevice {
            return Err(TopologyError::NotFogDevice(fog.clone()));
        }
        node.telemetry = Some(telemetry);
        self.revision += 1;
        Ok(())
    }

    /// Registers a device from its boot-time greeting.
    ///
    /// Unknown ids are created first. Repeating an identical greeting is a
    /// no-op. A device that changes type is rejected as misconfigured.
    pub fn register_greeting(&mut self, greeting: &Greeting) -> Result<(), TopologyError> {
        let claimed = NodeKind::from(greeting.device_type);
        let capacity = match claimed {
            NodeKind::FogDevice => match (greeting.total_processing, greeting.total_memory) {
                (Some(p), Some(m)) => Some((Millicores::from_cores(p), m)),
                _ => return Err(TopologyError::MissingCapacity(greeting.node_id.clone())),
            },
            _ => None,
        };

        let existing = self.nodes.get(&greeting.node_id);
        if let Some(node) = existing {
            if node.kind != NodeKind::Unknown && node.kind != claimed {
                return Err(TopologyError::ConflictingRegistration {
                    node: node.id.clone(),
                    existing: node.kind,
                    claimed,
                });
            }
            let same_capacity = match (capacity, node.compute) {
                (Some((p, m)), Some(c)) => c.total_processing == p && c.total_memory == m,
                (None, _) => true,
                _ => false,
            };
            let same_address = greeting.address.is_none() || greeting.address == node.address;
            if node.kind == claimed && same_capacity && same_address {
                return Ok(());
            }
            if let (Some((p, m)), Some(c)) = (capacity, node.compute) {
                if c.alloc_processing > p || c.alloc_memory > m {
                    return Err(TopologyError::ComputeBelowAllocation(node.id.clone()));
                }
            }
        } else {
            self.add_node(Node::new(greeting.node_id.clone(), NodeKind::Unknown))?;
        }

        let node = self.nodes.get_mut(&greeting.node_id).expect("present");
        node.kind = claimed;
        if let Some((p, m)) = capacity {
            let ledger = node.compute.get_or_insert_with(ComputeLedger::default);
            ledger.total_processing = p;
            ledger.total_memory = m;
        }
        if greeting.address.is_some() {
            node.address = greeting.address.clone();
        }
        self.revision += 1;
        Ok(())
    }

    /// Computes the difference to an observed snapshot without mutating.
    ///
    /// Nodes declared `unknown` in the snapshot keep their registered kind.
    /// Snapshots that would shrink a capacity below its live allocation, or
    /// that reference undeclared nodes, are rejected.
    pub fn diff(&self, observed: &TopologySnapshot) -> Result<ChangeSet, TopologyError> {
        let nodes = observed.node_map()?;
        let links = observed.directed_links();
        for (src, dst) in links.keys() {
            if !nodes.contains_key(src) || !nodes.contains_key(dst) {
                return Err(TopologyError::DanglingLink {
                    src: src.clone(),
                    dst: dst.clone(),
                });
            }
        }

        let mut cs = ChangeSet::default();
        for (id, decl) in &nodes {
            match self.nodes.get(id) {
                None => cs.added_nodes.push(decl.clone()),
                Some(node) => {
                    let kind_changed = decl.kind != NodeKind::Unknown && decl.kind != node.kind;
                    let effective = if kind_changed { decl.kind } else { node.kind };
                    let cap_changed = effective == NodeKind::FogDevice
                        && match (decl.capacity(), node.compute) {
                            (Some((p, m)), Some(c)) => {
                                if !kind_changed && (c.alloc_processing > p || c.alloc_memory > m) {
                                    return Err(TopologyError::ComputeBelowAllocation(id.clone()));
                                }
                                c.total_processing != p || c.total_memory != m
                            }
                            (Some(_), None) => true,
                            (None, _) => false,
                        };
                    let addr_changed = decl.address.is_some() && decl.address != node.address;
                    if kind_changed || cap_changed || addr_changed {
                        cs.changed_nodes.push(decl.clone());
                    }
                }
            }
        }
        cs.removed_nodes = self
            .nodes
            .keys()
            .filter(|id| !nodes.contains_key(*id))
            .cloned()
            .collect();

        for (key, decl) in &links {
            if decl.total_bw < self.control_bw {
                return Err(TopologyError::LinkCapacityBelowAllocation {
                    src: decl.src.clone(),
                    dst: decl.dst.clone(),
                    total: decl.total_bw,
                    allocated: self.control_bw,
                });
            }
            match self.links.get(key) {
                None => cs.added_links.push(decl.clone()),
                Some(link) => {
                    if decl.total_bw < link.alloc_bw {
                        return Err(TopologyError::LinkCapacityBelowAllocation {
                            src: decl.src.clone(),
                            dst: decl.dst.clone(),
                            total: decl.total_bw,
                            allocated: link.alloc_bw,
                        });
                    }
                    if link.src_port != decl.src_port
                        || link.dst_port != decl.dst_port
                        || link.total_bw != decl.total_bw
                    {
                        cs.changed_links.push(decl.clone());
                    }
                }
            }
        }
        // Links vanishing with a removed endpoint are implied by the node
        // removal; only list the ones whose endpoints both survive.
        cs.removed_links = self
            .links
            .keys()
            .filter(|k| !links.contains_key(*k))
            .filter(|(s, d)| nodes.contains_key(s) && nodes.contains_key(d))
            .cloned()
            .collect();
        Ok(cs)
    }

    /// Brings the topology in line with a full observed snapshot and returns
    /// the applied difference. The revision is bumped iff something changed.
    pub fn update_topology(&mut self, observed: &TopologySnapshot) -> Result<ChangeSet, TopologyError> {
        let cs = self.diff(observed)?;
        cs.apply(self)?;
        Ok(cs)
    }

    /// Verifies the structural invariants; used by tests and audits.
    pub fn check_invariants(&self) -> Result<(), TopologyError> {
        let bad = |msg: String| Err(TopologyError::Invariant(msg));
        for ((s, d), link) in &self.links {
            if &link.src != s || &link.dst != d {
                return bad(format!("link keyed {s}->{d} stores {}->{}", link.src, link.dst));
            }
            if !self.nodes.contains_key(s) || !self.nodes.contains_key(d) {
                return bad(format!("link {s}->{d} has a missing endpoint"));
            }
            if link.alloc_bw > link.total_bw {
                return bad(format!("link {s}->{d} over-allocated"));
            }
            if link.alloc_bw < self.control_bw {
                return bad(format!("link {s}->{d} lost its control reservation"));
            }
            if !self.links.contains_key(&(d.clone(), s.clone())) {
                return Err(TopologyError::MissingReverse(s.clone(), d.clone()));
            }
            if !self.adjacency.get(s).is_some_and(|out| out.contains(d)) {
                return bad(format!("adjacency misses {s}->{d}"));
            }
        }
        let indexed: usize = self.adjacency.values().map(BTreeSet::len).sum();
        if indexed != self.links.len() {
            return bad(format!(
                "adjacency holds {indexed} links, set holds {}",
                self.links.len()
            ));
        }
        for node in self.nodes.values() {
            match (node.kind, node.compute) {
                (NodeKind::FogDevice, Some(c)) if !c.holds() => {
                    return bad(format!("fog {} over-allocated", node.id));
                }
                (NodeKind::FogDevice, None) => return bad(format!("fog {} has no ledger", node.id)),
                (k, Some(_)) if k != NodeKind::FogDevice => {
                    return bad(format!("non-fog {} has a compute ledger", node.id));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TopologyFileError {
    #[error("malformed topology document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// Maps a bridge MAC address to its OpenFlow node id: the colons are
/// dropped and the remaining 48-bit hex value is printed in decimal.
pub fn mac_to_openflow_id(mac: &str) -> Result<NodeId, TopologyError> {
    let malformed = || TopologyError::MalformedMac(mac.to_string());
    let octets: Vec<&str> = mac.split(':').collect();
    if octets.len() != 6
        || octets
            .iter()
            .any(|o| o.len() != 2 || !o.bytes().all(|b| b.is_ascii_hexdigit()))
    {
        return Err(malformed());
    }
    let value = u64::from_str_radix(&octets.concat(), 16).map_err(|_| malformed())?;
    NodeId::new(format!("openflow:{value}"))
}
