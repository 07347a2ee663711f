//! Resource allocation and deallocation.
//!
//! Allocation filters fog-devices with enough compute headroom, grows a
//! shortest-path tree from the requesting end-device over links weighted by
//! the inverse of their spare bandwidth, picks the cheapest servicer and
//! derives the per-switch queues and flows that enforce the reservation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kheap::{HeapEntry, HeapError, KHeap};
use crate::protocol::{FailureReason, ServiceId, ServiceRequest, Transport};
use crate::scalar::{Scalar, Weight};
use crate::southbound::{Backend, ContainerSpec, FabricError, FlowAction, FlowMatch, FlowSpec, PortField, QueueSpec};
use crate::topology::{Bps, Link, Millicores, NodeId, NodeKind, PortNo, Topology, TopologyError};

/// Priority of every reservation flow.
pub const FLOW_PRIORITY: u16 = 100;

#[derive(Debug, Error)]
pub enum RaaError {
    #[error("unknown end-device {0}")]
    UnknownEndDevice(NodeId),
    #[error("{0} is not an end-device")]
    NotEndDevice(NodeId),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("path tree has no route back from {0}")]
    BrokenTree(NodeId),
    #[error("cookie {0} does not fit a queue id")]
    CookieOverflow(u64),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Heap(#[from] HeapError),
}

/// Reasons an otherwise well-formed request cannot be served.
#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum Failure {
    #[error("no fog-device has enough processing and memory headroom")]
    NoServicer,
    #[error("no servicer is reachable over links with enough bandwidth")]
    NoPath,
    #[error("port {port} is already in use on the selected fog-device")]
    PortBusy { port: u16 },
    #[error("no free proxy port on the selected fog-device")]
    NoFreePort,
}

impl From<Failure> for FailureReason {
    fn from(f: Failure) -> Self {
        match f {
            Failure::NoServicer => FailureReason::NoServicer,
            Failure::NoPath => FailureReason::NoPath,
            Failure::PortBusy { port } => FailureReason::PortBusy { port },
            Failure::NoFreePort => FailureReason::NoFreePort,
        }
    }
}

#[derive(Debug, Error)]
pub enum AllocError {
    #[error(transparent)]
    Failure(#[from] Failure),
    #[error(transparent)]
    Raa(#[from] RaaError),
}

impl AllocError {
    pub fn reason(&self) -> FailureReason {
        match self {
            AllocError::Failure(f) => f.clone().into(),
            AllocError::Raa(e) => FailureReason::Rejected { detail: e.to_string() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceRequest {
    pub end_device: NodeId,
    pub bw: Bps,
    pub processing: Millicores,
    pub memory: u64,
    pub image: String,
    pub desired_port: Option<u16>,
    pub transport: Transport,
}

impl ResourceRequest {
    pub fn new(end_device: NodeId, bw: Bps, processing: Millicores, memory: u64) -> Self {
        ResourceRequest {
            end_device,
            bw,
            processing,
            memory,
            image: "service".into(),
            desired_port: None,
            transport: Transport::Tcp,
        }
    }

    pub fn validate(&self) -> Result<(), RaaError> {
        if self.bw == 0 {
            return Err(RaaError::InvalidRequest("bandwidth must be positive".into()));
        }
        if self.processing.0 == 0 {
            return Err(RaaError::InvalidRequest("processing must be positive".into()));
        }
        if self.memory == 0 {
            return Err(RaaError::InvalidRequest("memory must be positive".into()));
        }
        Ok(())
    }
}

impl From<&ServiceRequest> for ResourceRequest {
    fn from(r: &ServiceRequest) -> Self {
        ResourceRequest {
            end_device: r.node_id.clone(),
            bw: r.bw,
            processing: Millicores::from_cores(r.processing),
            memory: r.memory,
            image: r.image.clone(),
            desired_port: r.desired_port,
            transport: r.transport,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeLink<C> {
    pub src: NodeId,
    pub dst: NodeId,
    pub weight: Weight<C>,
}

/// Shortest-path tree rooted at an end-device.
///
/// `best` holds, for every node reached at finite cost, the link through
/// which it was reached. The root maps to the seed link `(root, root, 0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathTree<C> {
    pub root: NodeId,
    pub best: BTreeMap<NodeId, TreeLink<C>>,
}

impl<C: Scalar> PathTree<C> {
    /// Total cost from the root; unreached nodes are infinite.
    pub fn weight(&self, id: &NodeId) -> Weight<C> {
        self.best.get(id).map_or(Weight::Infinite, |l| l.weight.clone())
    }

    /// Nodes from the root to `dst`, inclusive.
    pub fn path_to(&self, dst: &NodeId) -> Result<Vec<NodeId>, RaaError> {
        let mut path = vec![dst.clone()];
        let mut cur = dst;
        while cur != &self.root {
            let link = self.best.get(cur).ok_or_else(|| RaaError::BrokenTree(dst.clone()))?;
            cur = &link.src;
            if path.len() > self.best.len() {
                return Err(RaaError::BrokenTree(dst.clone()));
            }
            path.push(cur.clone());
        }
        path.reverse();
        Ok(path)
    }
}

/// Fog-devices whose free processing and memory both strictly exceed the
/// request.
pub fn find_request_servicers(t: &Topology, r: &ResourceRequest) -> BTreeSet<NodeId> {
    t.nodes_of(NodeKind::FogDevice)
        .filter(|n| {
            n.compute
                .as_ref()
                .is_some_and(|c| c.free_processing() > r.processing && c.free_memory() > r.memory)
        })
        .map(|n| n.id.clone())
        .collect()
}

/// Whether a link and its reverse both have at least `bw` spare.
pub fn link_feasible(t: &Topology, link: &Link, bw: Bps) -> bool {
    link.available_bw() >= bw && t.reverse(link).is_some_and(|r| r.available_bw() >= bw)
}

/// Dijkstra over a k-ary heap from end-device `e`, relaying only through
/// switches. Links without `bw` spare in either direction are infinite.
pub fn shortest_paths<C: Scalar>(t: &Topology, e: &NodeId, bw: Bps) -> Result<PathTree<C>, RaaError> {
    match t.kind(e) {
        None => return Err(RaaError::UnknownEndDevice(e.clone())),
        Some(NodeKind::EndDevice) => {}
        Some(_) => return Err(RaaError::NotEndDevice(e.clone())),
    }
    let mut heap: KHeap<&NodeId, Weight<C>> = KHeap::new(t.node_count(), t.link_count());
    let mut best = BTreeMap::new();
    heap.push(HeapEntry::new(e, e, Weight::zero()))?;

    while let Ok(entry) = heap.pop_min() {
        if !entry.weight.is_finite() {
            break;
        }
        let node = entry.dst;
        best.insert(
            node.clone(),
            TreeLink {
                src: entry.src.clone(),
                dst: node.clone(),
                weight: entry.weight.clone(),
            },
        );
        if node != e && t.kind(node) != Some(NodeKind::Switch) {
            continue;
        }
        for link in t.outgoing(node) {
            let dst = &link.dst;
            if best.contains_key(dst) {
                continue;
            }
            let w = if link_feasible(t, link, bw) {
                entry.weight.extend(C::link_cost(link.available_bw()))
            } else {
                Weight::Infinite
            };
            match heap.get(&dst) {
                Some(cur) if w < cur.weight => heap.decrease_key(HeapEntry::new(node, dst, w))?,
                Some(_) => {}
                None => heap.push(HeapEntry::new(node, dst, w))?,
            }
        }
    }
    Ok(PathTree { root: e.clone(), best })
}

/// Cheapest servicer reachable at finite cost; ties go to the smallest id.
pub fn select_fog<C: Scalar>(tree: &PathTree<C>, servicers: &BTreeSet<NodeId>) -> Option<NodeId> {
    let mut chosen: Option<(&NodeId, Weight<C>)> = None;
    for f in servicers {
        let w = tree.weight(f);
        if !w.is_finite() {
            continue;
        }
        if chosen.as_ref().is_none_or(|(_, b)| w < *b) {
            chosen = Some((f, w));
        }
    }
    chosen.map(|(f, _)| f.clone())
}

/// One directed hop of an allocated path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hop {
    pub src: NodeId,
    pub dst: NodeId,
    pub src_port: PortNo,
    pub dst_port: PortNo,
}

/// Everything configured on one switch for one reservation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchConfig {
    pub switch: NodeId,
    /// Toward the fog, then toward the end-device.
    pub queues: [QueueSpec; 2],
    pub flows: [FlowSpec; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub request: ResourceRequest,
    pub fog: NodeId,
    pub path: Vec<Hop>,
    pub switches: Vec<SwitchConfig>,
    pub proxy_port: u16,
    pub cost: f64,
    pub cookie: u64,
}

impl AllocationPlan {
    /// Nodes from the end-device to the fog-device.
    pub fn node_path(&self) -> Vec<NodeId> {
        let mut nodes: Vec<NodeId> = self.path.iter().map(|h| h.src.clone()).collect();
        nodes.extend(self.path.last().map(|h| h.dst.clone()));
        nodes
    }

    pub fn queue_count(&self) -> usize {
        self.switches.len() * 2
    }

    pub fn flow_count(&self) -> usize {
        self.switches.len() * 2
    }

    pub fn container(&self) -> ContainerSpec {
        ContainerSpec {
            fog: self.fog.clone(),
            image: self.request.image.clone(),
            cpu: self.request.processing,
            memory: self.request.memory,
            port: self.proxy_port,
        }
    }
}

/// Walks the tree from `fog` back to the root and emits the per-switch
/// enforcement state. `cookie` doubles as the queue id.
pub fn build_plan<C: Scalar>(
    t: &Topology,
    tree: &PathTree<C>,
    r: &ResourceRequest,
    fog: &NodeId,
    proxy_port: u16,
    cookie: u64,
) -> Result<AllocationPlan, RaaError> {
    let weight = tree.weight(fog);
    if !weight.is_finite() {
        return Err(RaaError::BrokenTree(fog.clone()));
    }
    let queue_id = u32::try_from(cookie).map_err(|_| RaaError::CookieOverflow(cookie))?;
    let nodes = tree.path_to(fog)?;
    let node = |id: &NodeId| t.node(id).ok_or_else(|| RaaError::BrokenTree(id.clone()));
    let e_addr = node(&tree.root)?.flow_address();
    let f_addr = node(fog)?.flow_address();

    let mut path = Vec::with_capacity(nodes.len() - 1);
    for w in nodes.windows(2) {
        let l = t.link(&w[0], &w[1]).ok_or_else(|| RaaError::BrokenTree(fog.clone()))?;
        path.push(Hop {
            src: l.src.clone(),
            dst: l.dst.clone(),
            src_port: l.src_port,
            dst_port: l.dst_port,
        });
    }

    let mut switches = Vec::new();
    for i in 1..nodes.len() - 1 {
        let sw = &nodes[i];
        if t.kind(sw) != Some(NodeKind::Switch) {
            return Err(RaaError::BrokenTree(sw.clone()));
        }
        let toward_fog = path[i].src_port;
        let back = t
            .link(sw, &nodes[i - 1])
            .ok_or_else(|| RaaError::BrokenTree(sw.clone()))?
            .src_port;
        let queue = |port| QueueSpec {
            switch: sw.clone(),
            port,
            queue_id,
            rate_limit: r.bw,
        };
        let flow = |port, src: &str, dst: &str, port_field| FlowSpec {
            switch: sw.clone(),
            matcher: FlowMatch {
                src_addr: src.to_string(),
                dst_addr: dst.to_string(),
                transport: r.transport,
                port_field,
                port_value: proxy_port,
            },
            actions: vec![FlowAction::Output { port }, FlowAction::Enqueue { port, queue_id }],
            priority: FLOW_PRIORITY,
            cookie,
        };
        switches.push(SwitchConfig {
            switch: sw.clone(),
            queues: [queue(toward_fog), queue(back)],
            flows: [
                flow(toward_fog, &e_addr, &f_addr, PortField::Dst),
                flow(back, &f_addr, &e_addr, PortField::Src),
            ],
        });
    }

    Ok(AllocationPlan {
        request: r.clone(),
        fog: fog.clone(),
        path,
        switches,
        proxy_port,
        cost: weight.to_f64(),
        cookie,
    })
}

/// Source of proxy ports on fog-devices.
pub trait ProxyPorts {
    fn assign(&mut self, fog: &NodeId, desired: Option<u16>) -> Result<u16, Failure>;
    fn release(&mut self, fog: &NodeId, port: u16);
}

/// Lowest-free-port allocator over an inclusive range, per fog-device.
#[derive(Clone, Debug)]
pub struct PortPool {
    low: u16,
    high: u16,
    used: BTreeMap<NodeId, BTreeSet<u16>>,
}

impl PortPool {
    pub fn new(low: u16, high: u16) -> Self {
        assert!(low <= high, "empty port range");
        PortPool {
            low,
            high,
            used: BTreeMap::new(),
        }
    }

    pub fn in_use(&self, fog: &NodeId) -> usize {
        self.used.get(fog).map_or(0, BTreeSet::len)
    }

    pub fn is_used(&self, fog: &NodeId, port: u16) -> bool {
        self.used.get(fog).is_some_and(|s| s.contains(&port))
    }
}

impl Default for PortPool {
    fn default() -> Self {
        PortPool::new(49152, 65535)
    }
}

impl ProxyPorts for PortPool {
    fn assign(&mut self, fog: &NodeId, desired: Option<u16>) -> Result<u16, Failure> {
        let used = self.used.entry(fog.clone()).or_default();
        let port = match desired {
            Some(p) if used.contains(&p) => return Err(Failure::PortBusy { port: p }),
            Some(p) => p,
            None => (self.low..=self.high)
                .find(|p| !used.contains(p))
                .ok_or(Failure::NoFreePort)?,
        };
        used.insert(port);
        Ok(port)
    }

    fn release(&mut self, fog: &NodeId, port: u16) {
        if let Some(s) = self.used.get_mut(fog) {
            s.remove(&port);
            if s.is_empty() {
                self.used.remove(fog);
            }
        }
    }
}

/// Charges the plan's bandwidth on every path link and its reverse, and its
/// compute on the fog. All or nothing.
pub fn charge(t: &mut Topology, plan: &AllocationPlan) -> Result<(), TopologyError> {
    let bw = plan.request.bw;
    let mut done: Vec<(&NodeId, &NodeId)> = Vec::new();
    let mut attempt = |t: &mut Topology| -> Result<(), TopologyError> {
        for h in &plan.path {
            for (a, b) in [(&h.src, &h.dst), (&h.dst, &h.src)] {
                t.charge_bw(a, b, bw)?;
                done.push((a, b));
            }
        }
        t.charge_compute(&plan.fog, plan.request.processing, plan.request.memory)
    };
    let res = attempt(t);
    if res.is_err() {
        for (a, b) in done {
            t.release_bw(a, b, bw).expect("undo of a successful charge");
        }
    }
    res
}

/// Inverse of [`charge`].
pub fn release(t: &mut Topology, plan: &AllocationPlan) -> Result<(), TopologyError> {
    let mut first = None;
    for h in &plan.path {
        for (a, b) in [(&h.src, &h.dst), (&h.dst, &h.src)] {
            if let Err(e) = t.release_bw(a, b, plan.request.bw) {
                first.get_or_insert(e);
            }
        }
    }
    if let Err(e) = t.release_compute(&plan.fog, plan.request.processing, plan.request.memory) {
        first.get_or_insert(e);
    }
    first.map_or(Ok(()), Err)
}

/// Runs the full allocation and charges the ledgers. On any error the
/// topology and the port pool are left unchanged.
pub fn allocate<C: Scalar>(
    t: &mut Topology,
    r: &ResourceRequest,
    cookie: u64,
    ports: &mut dyn ProxyPorts,
) -> Result<AllocationPlan, AllocError> {
    r.validate()?;
    let servicers = find_request_servicers(t, r);
    if servicers.is_empty() {
        return Err(Failure::NoServicer.into());
    }
    let tree = shortest_paths::<C>(t, &r.end_device, r.bw)?;
    let fog = select_fog(&tree, &servicers).ok_or(Failure::NoPath)?;
    let port = ports.assign(&fog, r.desired_port)?;
    let plan = build_plan(t, &tree, r, &fog, port, cookie)
        .and_then(|plan| charge(t, &plan).map(|_| plan).map_err(RaaError::from));
    if plan.is_err() {
        ports.release(&fog, port);
    }
    Ok(plan?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReservationState {
    Live,
    Dead,
}

/// A served request: its plan and the container it runs in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reservation {
    pub service_id: ServiceId,
    pub plan: AllocationPlan,
    pub state: ReservationState,
}

#[derive(Debug, Error)]
pub enum DeallocError {
    #[error("reservation {0} was already released")]
    AlreadyReleased(ServiceId),
    #[error("teardown of {service} incomplete: {source}")]
    Fabric {
        service: ServiceId,
        #[source]
        source: FabricError,
    },
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// Removes every fabric object the plan installed, in flows, queues,
/// container order. Missing objects are skipped; the first other error is
/// reported after the remaining steps run.
pub fn teardown(
    backend: &mut dyn Backend,
    plan: &AllocationPlan,
    service: Option<&ServiceId>,
) -> Result<(), FabricError> {
    let mut first = None;
    let mut note = |r: Result<(), FabricError>| {
        if let Err(e) = r {
            first.get_or_insert(e);
        }
    };
    for sc in &plan.switches {
        note(backend.delete_flow(&sc.switch, plan.cookie).map(|_| ()));
    }
    for sc in &plan.switches {
        for q in &sc.queues {
            let qr = q.queue_ref();
            match backend.remove_queue_from_qos(&sc.switch, q.port, qr) {
                Ok(()) | Err(FabricError::UnknownQueue { .. }) | Err(FabricError::UnknownQos(..)) => {}
                Err(e) => note(Err(e)),
            }
            match backend.delete_queue(&sc.switch, qr) {
                Ok(()) | Err(FabricError::UnknownQueue { .. }) => {}
                Err(e) => note(Err(e)),
            }
        }
    }
    if let Some(svc) = service {
        match backend.stop_container(svc) {
            Ok(()) | Err(FabricError::UnknownService(_)) => {}
            Err(e) => note(Err(e)),
        }
    }
    first.map_or(Ok(()), Err)
}

/// Tears down a live reservation. Ledgers and the proxy port are released
/// even when a fabric step fails, and the reservation ends up dead.
pub fn deallocate(
    t: &mut Topology,
    backend: &mut dyn Backend,
    ports: &mut dyn ProxyPorts,
    res: &mut Reservation,
) -> Result<(), DeallocError> {
    if res.state == ReservationState::Dead {
        return Err(DeallocError::AlreadyReleased(res.service_id.clone()));
    }
    let fabric = teardown(backend, &res.plan, Some(&res.service_id));
    res.state = ReservationState::Dead;
    ports.release(&res.plan.fog, res.plan.proxy_port);
    release(t, &res.plan)?;
    fabric.map_err(|source| DeallocError::Fabric {
        service: res.service_id.clone(),
        source,
    })
}

/// Exact best cost over all simple end-device to servicer paths with
/// switch-only interiors, or `None`. The independent check used by tests.
pub fn route_cost<C: Scalar>(t: &Topology, path: &[NodeId], bw: Bps) -> Weight<C> {
    let mut w = Weight::zero();
    for p in path.windows(2) {
        match t.link(&p[0], &p[1]) {
            Some(l) if link_feasible(t, l, bw) => w = w.extend(C::link_cost(l.available_bw())),
            _ => return Weight::Infinite,
        }
    }
    w
}
