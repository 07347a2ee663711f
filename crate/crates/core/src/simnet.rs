//! Discrete-event simulation of the control plane.
//!
//! Requests, replies and switch configuration messages travel hop by hop
//! between devices and the controller. Each hop costs the serialization time
//! of the message on the control allocation, inflated by the background data
//! load on the link. Allocation and enforcement run through the real
//! [`Orchestrator`] over a [`SimFabric`], so byte counts come from the
//! fabric's own ledger.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};
use std::io;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orchestrator::{Orchestrator, OrchestratorConfig, OrchestratorError};
use crate::protocol::{ResponseStatus, ServiceId, ServiceRequest, ShutdownRequest, ShutdownResult, Transport};
use crate::raa::{self, AllocationPlan, PortPool, ResourceRequest};
use crate::southbound::{ByteCost, ByteCosts, ByteRecord, PacketHeader, SimFabric, Verdict};
use crate::topology::{
    Bps, LinkDecl, Millicores, NodeDecl, NodeId, NodeKind, PortNo, Topology, TopologyError, TopologySnapshot,
    DEFAULT_CONTROL_BW,
};
use crate::Cost;

pub const CONTROLLER_ID: &str = "controller";
const GBPS: Bps = 1_000_000_000;
const GIB: u64 = 1 << 30;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid generator parameters: {0}")]
    InvalidGen(String),
    #[error("invalid load: {0}")]
    InvalidLoad(String),
    #[error("control channel saturated on {src} -> {dst}: data load {load} bps, capacity {total} bps")]
    Saturated {
        src: NodeId,
        dst: NodeId,
        load: Bps,
        total: Bps,
    },
    #[error("no control path between the controller and {0}")]
    NoControlPath(NodeId),
    #[error("topology has no controller node")]
    NoController,
    #[error("scenario references unknown node {0}")]
    UnknownNode(NodeId),
    #[error("scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenKind {
    /// Two levels; each level-1 switch reaches a third of the level-2 switches.
    LeafSpine,
    /// Three levels; each switch has one uplink.
    Tree,
}

/// Parameters of a generated evaluation topology.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologyGen {
    pub kind: GenKind,
    /// Switch counts from level 1 (edge) upward.
    pub levels: Vec<usize>,
    pub fogs_per_top_switch: usize,
    /// Defaults to one per level-1 switch.
    pub end_devices: Option<usize>,
    pub switch_bw: Bps,
    pub edge_bw: Bps,
    pub fog_cores: f64,
    pub fog_memory: u64,
    pub control_bw: Bps,
}

impl TopologyGen {
    pub fn leaf_spine(l1: usize, l2: usize) -> Self {
        TopologyGen {
            kind: GenKind::LeafSpine,
            levels: vec![l1, l2],
            fogs_per_top_switch: 1,
            end_devices: None,
            switch_bw: GBPS,
            edge_bw: GBPS,
            fog_cores: 4.0,
            fog_memory: 8 * GIB,
            control_bw: DEFAULT_CONTROL_BW,
        }
    }

    pub fn tree(l1: usize, l2: usize, l3: usize) -> Self {
        TopologyGen {
            kind: GenKind::Tree,
            levels: vec![l1, l2, l3],
            ..Self::leaf_spine(l1, l2)
        }
    }

    pub fn with_fogs(mut self, per_top_switch: usize) -> Self {
        self.fogs_per_top_switch = per_top_switch;
        self
    }

    /// Parses `a:L1,L2` or `b:L1,L2,L3`.
    pub fn parse(spec: &str) -> Result<Self, SimError> {
        let bad = || SimError::InvalidGen(format!("expected a:L1,L2 or b:L1,L2,L3, got {spec:?}"));
        let (kind, counts) = spec.split_once(':').ok_or_else(bad)?;
        let n: Vec<usize> = counts
            .split(',')
            .map(|c| c.trim().parse().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        let g = match (kind.trim(), n.as_slice()) {
            ("a", [l1, l2]) => Self::leaf_spine(*l1, *l2),
            ("b", [l1, l2, l3]) => Self::tree(*l1, *l2, *l3),
            _ => return Err(bad()),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn label(&self) -> String {
        let k = match self.kind {
            GenKind::LeafSpine => "a",
            GenKind::Tree => "b",
        };
        let lv: Vec<String> = self.levels.iter().map(usize::to_string).collect();
        format!("{k}:{}", lv.join(","))
    }

    fn validate(&self) -> Result<(), SimError> {
        let want = match self.kind {
            GenKind::LeafSpine => 2,
            GenKind::Tree => 3,
        };
        if self.levels.len() != want || self.levels.contains(&0) {
            return Err(SimError::InvalidGen(format!(
                "{:?} needs {want} positive level counts, got {:?}",
                self.kind, self.levels
            )));
        }
        if self.end_devices == Some(0) {
            return Err(SimError::InvalidGen("at least one end-device is required".into()));
        }
        if self.switch_bw < self.control_bw || self.edge_bw < self.control_bw {
            return Err(SimError::InvalidGen(
                "link bandwidth below the control reservation".into(),
            ));
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Result<TopologySnapshot, SimError> {
        self.validate()?;
        let mut b = Builder::default();
        let mut level_ids: Vec<Vec<NodeId>> = Vec::new();
        let mut n = 0;
        for &count in &self.levels {
            level_ids.push(
                (0..count)
                    .map(|_| {
                        n += 1;
                        b.node(&format!("openflow:{n}"), NodeKind::Switch)
                    })
                    .collect(),
            );
        }
        let l1 = &level_ids[0];
        let l2 = &level_ids[1];
        match self.kind {
            GenKind::LeafSpine => {
                let width = l2.len().div_ceil(3);
                for (i, s) in l1.iter().enumerate() {
                    let start = (i * l2.len() / l1.len()).min(l2.len() - width);
                    for up in &l2[start..start + width] {
                        b.link(s, up, self.switch_bw);
                    }
                }
            }
            GenKind::Tree => {
                let l3 = &level_ids[2];
                for (i, s) in l1.iter().enumerate() {
                    b.link(s, &l2[i * l2.len() / l1.len()], self.switch_bw);
                }
                for (j, s) in l2.iter().enumerate() {
                    b.link(s, &l3[j * l3.len() / l2.len()], self.switch_bw);
                }
            }
        }
        let top = level_ids.last().expect("validated");
        for w in top.windows(2) {
            b.link(&w[0], &w[1], self.switch_bw);
        }
        let controller = b.node(CONTROLLER_ID, NodeKind::Controller);
        b.link(&controller, &top[top.len() / 2], self.switch_bw);

        let mut f = 0;
        for s in top {
            for _ in 0..self.fogs_per_top_switch {
                f += 1;
                let id = b.node(&format!("fog:{f}"), NodeKind::FogDevice);
                let decl = b.nodes.last_mut().expect("just added");
                decl.total_processing = Some(self.fog_cores);
                decl.total_memory = Some(self.fog_memory);
                decl.address = Some(address(2, f));
                b.link(s, &id, self.edge_bw);
            }
        }
        for e in 0..self.end_devices.unwrap_or(l1.len()) {
            let id = b.node(&format!("end:{}", e + 1), NodeKind::EndDevice);
            b.nodes.last_mut().expect("just added").address = Some(address(1, e + 1));
            b.link(&id, &l1[e % l1.len()], self.edge_bw);
        }
        Ok(TopologySnapshot {
            nodes: b.nodes,
            links: b.links,
            duplex: true,
        })
    }

    pub fn generate(&self) -> Result<Topology, SimError> {
        Ok(Topology::from_snapshot(&self.snapshot()?, self.control_bw)?)
    }
}

fn address(net: u8, n: usize) -> String {
    format!("10.{net}.{}.{}", n / 256, n % 256)
}

#[derive(Default)]
struct Builder {
    nodes: Vec<NodeDecl>,
    links: Vec<LinkDecl>,
    ports: HashMap<NodeId, PortNo>,
}

impl Builder {
    fn node(&mut self, id: &str, kind: NodeKind) -> NodeId {
        let id = NodeId::new(id).expect("generated ids are non-empty");
        self.nodes.push(NodeDecl::new(id.clone(), kind));
        id
    }

    fn port(&mut self, id: &NodeId) -> PortNo {
        let p = self.ports.entry(id.clone()).or_insert(0);
        *p += 1;
        *p
    }

    fn link(&mut self, a: &NodeId, b: &NodeId, total_bw: Bps) {
        let src_port = self.port(a);
        let dst_port = self.port(b);
        self.links.push(LinkDecl {
            src: a.clone(),
            dst: b.clone(),
            src_port,
            dst_port,
            total_bw,
        });
    }
}

/// `end:1 - openflow:1 - ... - openflow:n - fog:1`, with the controller
/// attached directly to every switch.
pub fn line_topology(switches: usize, bw: Bps, control_bw: Bps) -> Result<Topology, SimError> {
    if switches == 0 {
        return Err(SimError::InvalidGen("a line needs at least one switch".into()));
    }
    let mut b = Builder::default();
    let e = b.node("end:1", NodeKind::EndDevice);
    b.nodes.last_mut().expect("just added").address = Some(address(1, 1));
    let ctl = b.node(CONTROLLER_ID, NodeKind::Controller);
    let mut prev = e;
    for i in 1..=switches {
        let s = b.node(&format!("openflow:{i}"), NodeKind::Switch);
        b.link(&prev, &s, bw);
        b.link(&ctl, &s, bw);
        prev = s;
    }
    let f = b.node("fog:1", NodeKind::FogDevice);
    let decl = b.nodes.last_mut().expect("just added");
    decl.total_processing = Some(4.0);
    decl.total_memory = Some(8 * GIB);
    decl.address = Some(address(2, 1));
    b.link(&prev, &f, bw);
    let snap = TopologySnapshot {
        nodes: b.nodes,
        links: b.links,
        duplex: true,
    };
    Ok(Topology::from_snapshot(&snap, control_bw)?)
}

/// Min-queue of timed events; equal times pop in insertion order.
#[derive(Debug)]
pub struct EventQueue<E> {
    heap: BinaryHeap<Queued<E>>,
    seq: u64,
}

#[derive(Debug)]
struct Queued<E> {
    time: f64,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Queued<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<E> Eq for Queued<E> {}

impl<E> PartialOrd for Queued<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Queued<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap.
        other.time.total_cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            seq: 0,
        }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time: f64, event: E) {
        assert!(time.is_finite(), "event time must be finite");
        self.heap.push(Queued {
            time,
            seq: self.seq,
            event,
        });
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<(f64, E)> {
        self.heap.pop().map(|q| (q.time, q.event))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Pops everything in order.
    pub fn drain_ordered(&mut self) -> Vec<(f64, E)> {
        std::iter::from_fn(|| self.pop()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimEventKind {
    MsgDeparture { msg: String, node: NodeId },
    MsgArrival { msg: String, node: NodeId },
    RaaStart,
    RaaEnd,
    ConfigApplied { node: NodeId },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: f64,
    #[serde(flatten)]
    pub kind: SimEventKind,
}

/// Background data load on every link and the bandwidth set aside for
/// control traffic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Load {
    /// Data bandwidth in use per link (x).
    pub x: Bps,
    /// Control bandwidth allocation (y).
    pub y: Bps,
}

impl Load {
    pub fn idle(y: Bps) -> Self {
        Load { x: 0, y }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RaaClock {
    /// Measured wall time of the allocation call.
    WallTime,
    /// A fixed duration in seconds, for reproducible runs.
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub request_bytes: u64,
    pub response_bytes: u64,
    pub costs: ByteCosts,
    pub raa_clock: RaaClock,
    /// Seconds a switch needs to apply its configuration.
    pub switch_exec_s: f64,
    /// Seconds a fog-device needs to start a container.
    pub fog_exec_s: f64,
    /// Upper bound of the throughput jitter subtracted from stream samples.
    pub jitter_bps: Bps,
    pub seed: u64,
    pub port_range: (u16, u16),
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            request_bytes: 256,
            response_bytes: 128,
            costs: ByteCosts {
                echo_per_queue: ByteCost::new(55, 1000),
                ..ByteCosts::default()
            },
            raa_clock: RaaClock::WallTime,
            switch_exec_s: 0.0,
            fog_exec_s: 0.0,
            jitter_bps: 0,
            seed: 0,
            port_range: (49152, 65535),
        }
    }
}

impl SimConfig {
    pub fn fixed_clock(mut self, seconds: f64) -> Self {
        self.raa_clock = RaaClock::Fixed(seconds);
        self
    }
}

/// The five components of fulfilling one request, in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayReport {
    pub request_id: String,
    pub send_request: f64,
    pub raa_exec: f64,
    pub config_comm: f64,
    pub config_exec: f64,
    pub reply: f64,
    pub total: f64,
    pub status: ResponseStatus,
    pub fog: Option<NodeId>,
    /// Links on the end-device to fog path.
    pub path_hops: usize,
    pub records: Vec<ByteRecord>,
    pub trace: Vec<SimEvent>,
}

/// Shortest control paths from the controller, relaying through switches.
#[derive(Clone, Debug)]
struct ControlRoutes {
    root: NodeId,
    parent: BTreeMap<NodeId, NodeId>,
}

impl ControlRoutes {
    fn new(t: &Topology) -> Result<Self, SimError> {
        let root = t
            .nodes_of(NodeKind::Controller)
            .map(|n| n.id.clone())
            .next()
            .ok_or(SimError::NoController)?;
        let mut parent = BTreeMap::new();
        let mut queue = VecDeque::from([root.clone()]);
        while let Some(n) = queue.pop_front() {
            if n != root && t.kind(&n) != Some(NodeKind::Switch) {
                continue;
            }
            for l in t.outgoing(&n) {
                if l.dst != root && !parent.contains_key(&l.dst) {
                    parent.insert(l.dst.clone(), n.clone());
                    queue.push_back(l.dst.clone());
                }
            }
        }
        Ok(ControlRoutes { root, parent })
    }

    /// Controller first, `to` last.
    fn path(&self, to: &NodeId) -> Result<Vec<NodeId>, SimError> {
        let mut p = vec![to.clone()];
        let mut cur = to;
        while cur != &self.root {
            cur = self
                .parent
                .get(cur)
                .ok_or_else(|| SimError::NoControlPath(to.clone()))?;
            p.push(cur.clone());
        }
        p.reverse();
        Ok(p)
    }
}

/// Runs requests against one orchestrator and times the control plane.
pub struct Simulator {
    orch: Orchestrator<SimFabric>,
    routes: ControlRoutes,
    cfg: SimConfig,
    load: Load,
    next_request: u64,
}

impl Simulator {
    pub fn new(t: Topology, cfg: SimConfig, load: Load) -> Result<Self, SimError> {
        if load.y == 0 {
            return Err(SimError::InvalidLoad("control allocation must be positive".into()));
        }
        let routes = ControlRoutes::new(&t)?;
        let ocfg = OrchestratorConfig {
            control_bw: t.control_bw(),
            port_range: cfg.port_range,
            ..OrchestratorConfig::default()
        };
        let orch = Orchestrator::new(t, SimFabric::new(cfg.costs), &ocfg)?;
        Ok(Simulator {
            orch,
            routes,
            cfg,
            load,
            next_request: 0,
        })
    }

    pub fn orchestrator(&self) -> &Orchestrator<SimFabric> {
        &self.orch
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn load(&self) -> Load {
        self.load
    }

    fn hop_delay(&self, t: &Topology, a: &NodeId, b: &NodeId, bytes: u64) -> Result<f64, SimError> {
        let link = t
            .link(a, b)
            .ok_or_else(|| TopologyError::UnknownLink(a.clone(), b.clone()))?;
        if self.load.x >= link.total_bw {
            return Err(SimError::Saturated {
                src: a.clone(),
                dst: b.clone(),
                load: self.load.x,
                total: link.total_bw,
            });
        }
        let serialization = (bytes * 8) as f64 / self.load.y as f64;
        Ok(serialization / (1.0 - self.load.x as f64 / link.total_bw as f64))
    }

    /// Store-and-forward transfer along `path` starting at `start`; returns
    /// the arrival time at the last node.
    fn transfer(
        &self,
        t: &Topology,
        path: &[NodeId],
        bytes: u64,
        msg: &str,
        start: f64,
        trace: &mut EventQueue<SimEventKind>,
    ) -> Result<f64, SimError> {
        let mut now = start;
        for hop in path.windows(2) {
            trace.push(
                now,
                SimEventKind::MsgDeparture {
                    msg: msg.to_string(),
                    node: hop[0].clone(),
                },
            );
            now += self.hop_delay(t, &hop[0], &hop[1], bytes)?;
            trace.push(
                now,
                SimEventKind::MsgArrival {
                    msg: msg.to_string(),
                    node: hop[1].clone(),
                },
            );
        }
        Ok(now)
    }

    fn uplink(&self, from: &NodeId) -> Result<Vec<NodeId>, SimError> {
        let mut p = self.routes.path(from)?;
        p.reverse();
        Ok(p)
    }

    /// Controller to switch exchanges for the given ledger records, sent one
    /// after another. Fog-device records are not timed.
    fn config_exchange(
        &self,
        t: &Topology,
        records: &[ByteRecord],
        start: f64,
        trace: &mut EventQueue<SimEventKind>,
    ) -> Result<f64, SimError> {
        let mut now = start;
        for r in records {
            if t.kind(&r.node) != Some(NodeKind::Switch) {
                continue;
            }
            let down = self.routes.path(&r.node)?;
            let msg = format!("{:?}", r.op);
            now = self.transfer(t, &down, r.up, &msg, now, trace)?;
            let mut up = down;
            up.reverse();
            now = self.transfer(t, &up, r.down, &msg, now, trace)?;
            trace.push(now, SimEventKind::ConfigApplied { node: r.node.clone() });
        }
        Ok(now)
    }

    fn ledger_mark(&self) -> usize {
        self.orch.with_backend(|b| b.ledger().len())
    }

    fn records_since(&self, mark: usize) -> Vec<ByteRecord> {
        self.orch.with_backend(|b| b.ledger().since(mark).to_vec())
    }

    pub fn service_request(&mut self, r: &ResourceRequest) -> ServiceRequest {
        self.next_request += 1;
        ServiceRequest {
            request_id: format!("req-{}", self.next_request),
            node_id: r.end_device.clone(),
            image: r.image.clone(),
            bw: r.bw,
            processing: r.processing.as_cores(),
            memory: r.memory,
            desired_port: r.desired_port,
            transport: r.transport,
        }
    }

    /// Times one request from the end-device's send to the reply's arrival.
    pub fn simulate_request(&mut self, r: &ResourceRequest) -> Result<DelayReport, SimError> {
        let req = self.service_request(r);
        self.simulate_at(&req, 0.0)
    }

    fn simulate_at(&self, req: &ServiceRequest, start: f64) -> Result<DelayReport, SimError> {
        let t = self.orch.snapshot();
        let mut trace = EventQueue::new();
        let up = self.uplink(&req.node_id)?;
        let at_ctl = self.transfer(&t, &up, self.cfg.request_bytes, "service_request", start, &mut trace)?;

        let mark = self.ledger_mark();
        trace.push(at_ctl, SimEventKind::RaaStart);
        let outcome = self.orch.service_end_device_detailed(req, &req.node_id)?;
        let raa_exec = match self.cfg.raa_clock {
            RaaClock::WallTime => outcome.raa_time.as_secs_f64(),
            RaaClock::Fixed(s) => s,
        };
        trace.push(at_ctl + raa_exec, SimEventKind::RaaEnd);
        let records = self.records_since(mark);
        let comm_end = self.config_exchange(&t, &records, at_ctl + raa_exec, &mut trace)?;
        let config_exec = match &outcome.plan {
            Some(p) => p.switches.len() as f64 * self.cfg.switch_exec_s + self.cfg.fog_exec_s,
            None => 0.0,
        };
        let reply_start = comm_end + config_exec;
        let mut down = up;
        down.reverse();
        let done = self.transfer(
            &t,
            &down,
            self.cfg.response_bytes,
            "service_response",
            reply_start,
            &mut trace,
        )?;

        let send_request = at_ctl - start;
        let config_comm = comm_end - (at_ctl + raa_exec);
        let reply = done - reply_start;
        Ok(DelayReport {
            request_id: req.request_id.clone(),
            send_request,
            raa_exec,
            config_comm,
            config_exec,
            reply,
            total: send_request + raa_exec + config_comm + config_exec + reply,
            status: outcome.response.status,
            fog: outcome.plan.as_ref().map(|p| p.fog.clone()),
            path_hops: outcome.plan.as_ref().map_or(0, |p| p.path.len()),
            records,
            trace: trace
                .drain_ordered()
                .into_iter()
                .map(|(time, kind)| SimEvent { time, kind })
                .collect(),
        })
    }

    /// Rate a packet of the reservation would be shaped to along its path:
    /// the smallest queue rate it is classified into, capped by `offered`.
    /// Zero if any switch would drop or misroute it.
    pub fn enforced_rate(&self, plan: &AllocationPlan, offered: Bps) -> Bps {
        let t = self.orch.snapshot();
        let addr = |id: &NodeId| t.node(id).map(|n| n.flow_address()).unwrap_or_else(|| id.to_string());
        let header = PacketHeader {
            src_addr: addr(&plan.request.end_device),
            dst_addr: addr(&plan.fog),
            transport: plan.request.transport,
            src_port: 40000,
            dst_port: plan.proxy_port,
        };
        self.orch.with_backend(|fabric| {
            let mut rate = offered;
            for hop in plan.path.iter().skip(1) {
                match fabric.classify(&hop.src, &header) {
                    Verdict::Forward { port, queue: Some(q) } if port == hop.src_port => {
                        let sw = &fabric.state().switches[&hop.src];
                        rate = rate.min(sw.queue_rate(q).unwrap_or(0));
                    }
                    _ => return 0,
                }
            }
            rate
        })
    }

    /// Replays a scenario. Requests reach the controller after their send
    /// delay and are served one at a time in arrival order.
    pub fn run_scenario(&mut self, s: &Scenario) -> Result<MetricSet, SimError> {
        Replay::new(self, s)?.run()
    }
}

/// One request through a fresh simulator.
pub fn simulate_request(
    t: &Topology,
    r: &ResourceRequest,
    load: Load,
    cfg: &SimConfig,
) -> Result<DelayReport, SimError> {
    Simulator::new(t.clone(), cfg.clone(), load)?.simulate_request(r)
}

/// A scenario through a fresh simulator.
pub fn run_scenario(t: Topology, s: &Scenario, cfg: &SimConfig) -> Result<MetricSet, SimError> {
    let load = s.load.unwrap_or(Load::idle(t.control_bw().max(1)));
    Simulator::new(t, cfg.clone(), load)?.run_scenario(s)
}

fn default_image() -> String {
    "service".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    /// Ask for a service. With `hold`, the end-device shuts it down that
    /// many seconds after the reply arrives.
    Request {
        bw: Bps,
        cpu: f64,
        mem: u64,
        #[serde(default = "default_image")]
        image: String,
        #[serde(default)]
        label: Option<String>,
        #[serde(default)]
        hold: Option<f64>,
        #[serde(default)]
        desired_port: Option<u16>,
        #[serde(default)]
        transport: Transport,
    },
    /// Shut down the labeled service, or the node's most recent one.
    Shutdown {
        #[serde(default)]
        label: Option<String>,
    },
    /// Send at `rate` over the labeled (or most recent) service for
    /// `duration` seconds, sampling throughput once per period.
    Stream {
        rate: Bps,
        duration: f64,
        #[serde(default)]
        label: Option<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioEvent {
    pub at: f64,
    pub node: NodeId,
    pub action: Action,
}

fn default_period() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub load: Option<Load>,
    #[serde(default = "default_period")]
    pub sample_period: f64,
    pub events: Vec<ScenarioEvent>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn validate(&self, t: &Topology) -> Result<(), SimError> {
        if !(self.sample_period.is_finite() && self.sample_period > 0.0) {
            return Err(SimError::Scenario("sample_period must be positive".into()));
        }
        let mut labels = BTreeMap::new();
        for e in &self.events {
            if !(e.at.is_finite() && e.at >= 0.0) {
                return Err(SimError::Scenario(format!("event time {} is invalid", e.at)));
            }
            if t.kind(&e.node) != Some(NodeKind::EndDevice) {
                return Err(SimError::UnknownNode(e.node.clone()));
            }
            match &e.action {
                Action::Request {
                    label: Some(l), hold, ..
                } => {
                    if labels.insert(l.clone(), ()).is_some() {
                        return Err(SimError::Scenario(format!("duplicate label {l}")));
                    }
                    if hold.is_some_and(|h| !(h.is_finite() && h >= 0.0)) {
                        return Err(SimError::Scenario(format!("hold of {l} is invalid")));
                    }
                }
                Action::Stream { duration, .. } if !(duration.is_finite() && *duration >= 0.0) => {
                    return Err(SimError::Scenario("stream duration is invalid".into()));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub time: f64,
    pub series: String,
    pub value: f64,
}

/// What happened to one scenario request or shutdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub label: String,
    pub node: NodeId,
    pub kind: String,
    pub issued_at: f64,
    pub completed_at: f64,
    /// `success`, or the failure code.
    pub status: String,
    pub fog: Option<NodeId>,
    pub service_id: Option<ServiceId>,
    /// Order in which the controller served it, from zero.
    pub served: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub samples: Vec<Sample>,
    pub outcomes: Vec<Outcome>,
    /// `None` when the ledgers reconcile at the end of the run.
    pub reconciliation_error: Option<String>,
    pub trace: Vec<SimEvent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub requests: usize,
    pub successes: usize,
    pub failures: BTreeMap<String, usize>,
    pub shutdowns: usize,
    pub samples: usize,
    pub reconciled: bool,
    pub reconciliation_error: Option<String>,
}

impl MetricSet {
    pub fn series(&self, name: &str) -> Vec<f64> {
        self.samples
            .iter()
            .filter(|s| s.series == name)
            .map(|s| s.value)
            .collect()
    }

    pub fn series_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.samples.iter().map(|s| s.series.clone()).collect();
        names.sort();
        names.dedup();
        names
    }

    pub fn reconciled(&self) -> bool {
        self.reconciliation_error.is_none()
    }

    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<(), SimError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["time", "series", "value"])?;
        for s in &self.samples {
            out.write_record([format!("{:.9}", s.time), s.series.clone(), format!("{}", s.value)])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> Summary {
        let requests: Vec<&Outcome> = self.outcomes.iter().filter(|o| o.kind == "request").collect();
        let mut failures = BTreeMap::new();
        for o in requests.iter().filter(|o| o.status != "success") {
            *failures.entry(o.status.clone()).or_insert(0) += 1;
        }
        Summary {
            requests: requests.len(),
            successes: requests.iter().filter(|o| o.status == "success").count(),
            failures,
            shutdowns: self.outcomes.iter().filter(|o| o.kind == "shutdown").count(),
            samples: self.samples.len(),
            reconciled: self.reconciled(),
            reconciliation_error: self.reconciliation_error.clone(),
        }
    }
}

/// Empirical CDF points `(value, fraction <= value)`.
pub fn ecdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter().enumerate().map(|(i, &x)| (x, (i + 1) as f64 / n)).collect()
}

/// Lower quartile, median and upper quartile with linear interpolation.
pub fn quartiles(values: &[f64]) -> Option<(f64, f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Some((q(0.25), q(0.5), q(0.75)))
}

pub fn median(values: &[f64]) -> Option<f64> {
    quartiles(values).map(|(_, m, _)| m)
}

fn failure_code(status: &ResponseStatus) -> String {
    match status {
        ResponseStatus::Success { .. } => "success".into(),
        ResponseStatus::Failure { reason } => serde_json::to_value(reason)
            .ok()
            .and_then(|v| v.get("code").and_then(|c| c.as_str().map(str::to_string)))
            .unwrap_or_else(|| "failure".into()),
    }
}

#[derive(Clone, Debug)]
enum Job {
    Request { idx: usize, req: ServiceRequest },
    Shutdown { idx: usize, service: Option<ServiceId> },
}

#[derive(Clone, Debug)]
enum Ev {
    Issue(usize),
    AtController(Job),
    ControllerFree,
    Reply { idx: usize },
    Sample { stream: usize, k: usize },
}

struct Pending {
    label: String,
    node: NodeId,
    kind: &'static str,
    issued_at: f64,
    status: Option<ResponseStatus>,
    plan: Option<AllocationPlan>,
    service: Option<ServiceId>,
    served: usize,
    hold: Option<f64>,
}

struct StreamState {
    label: String,
    rate: Bps,
    plan: Option<AllocationPlan>,
    samples: usize,
}

struct Replay<'a> {
    sim: &'a mut Simulator,
    s: &'a Scenario,
    queue: EventQueue<Ev>,
    trace: EventQueue<SimEventKind>,
    jobs: Vec<Pending>,
    waiting: VecDeque<Job>,
    busy: bool,
    served: usize,
    by_label: BTreeMap<String, usize>,
    latest: BTreeMap<NodeId, Vec<usize>>,
    streams: Vec<StreamState>,
    metrics: MetricSet,
    outcomes: Vec<(usize, Outcome)>,
    rng: StdRng,
    extra: Vec<ScenarioEvent>,
}

impl<'a> Replay<'a> {
    fn new(sim: &'a mut Simulator, s: &'a Scenario) -> Result<Self, SimError> {
        s.validate(&sim.orch.snapshot())?;
        let mut queue = EventQueue::new();
        let mut order: Vec<usize> = (0..s.events.len()).collect();
        order.sort_by(|&a, &b| s.events[a].at.total_cmp(&s.events[b].at));
        for i in order {
            queue.push(s.events[i].at, Ev::Issue(i));
        }
        let seed = sim.cfg.seed;
        Ok(Replay {
            sim,
            s,
            queue,
            trace: EventQueue::new(),
            jobs: Vec::new(),
            waiting: VecDeque::new(),
            busy: false,
            served: 0,
            by_label: BTreeMap::new(),
            latest: BTreeMap::new(),
            streams: Vec::new(),
            metrics: MetricSet::default(),
            outcomes: Vec::new(),
            rng: StdRng::seed_from_u64(seed),
            extra: Vec::new(),
        })
    }

    fn event(&self, i: usize) -> &ScenarioEvent {
        if i < self.s.events.len() {
            &self.s.events[i]
        } else {
            &self.extra[i - self.s.events.len()]
        }
    }

    fn sample(&mut self, time: f64, series: impl Into<String>, value: f64) {
        self.metrics.samples.push(Sample {
            time,
            series: series.into(),
            value,
        });
    }

    /// Live job index for a label, or the node's most recent live request.
    fn resolve(&self, node: &NodeId, label: &Option<String>) -> Option<usize> {
        match label {
            Some(l) => self.by_label.get(l).copied(),
            None => self
                .latest
                .get(node)
                .and_then(|v| v.iter().rev().find(|&&j| self.jobs[j].service.is_some()).copied()),
        }
    }

    fn run(mut self) -> Result<MetricSet, SimError> {
        while let Some((now, ev)) = self.queue.pop() {
            match ev {
                Ev::Issue(i) => self.issue(now, i)?,
                Ev::AtController(job) => {
                    self.waiting.push_back(job);
                    if !self.busy {
                        self.serve_next(now)?;
                    }
                }
                Ev::ControllerFree => {
                    self.busy = false;
                    self.serve_next(now)?;
                }
                Ev::Reply { idx } => self.reply(now, idx),
                Ev::Sample { stream, k } => self.stream_sample(now, stream, k),
            }
        }
        self.metrics.reconciliation_error = self.sim.orch.reconcile().err();
        self.outcomes.sort_by_key(|(i, _)| *i);
        self.metrics.outcomes = self.outcomes.into_iter().map(|(_, o)| o).collect();
        self.metrics.trace = self
            .trace
            .drain_ordered()
            .into_iter()
            .map(|(time, kind)| SimEvent { time, kind })
            .collect();
        Ok(self.metrics)
    }

    fn issue(&mut self, now: f64, i: usize) -> Result<(), SimError> {
        let ev = self.event(i).clone();
        let up = self.sim.uplink(&ev.node)?;
        let t = self.sim.orch.snapshot();
        match ev.action {
            Action::Request {
                bw,
                cpu,
                mem,
                image,
                label,
                hold,
                desired_port,
                transport,
            } => {
                let idx = self.jobs.len();
                let label = label.unwrap_or_else(|| format!("request-{idx}"));
                let r = ResourceRequest {
                    end_device: ev.node.clone(),
                    bw,
                    processing: Millicores::from_cores(cpu),
                    memory: mem,
                    image,
                    desired_port,
                    transport,
                };
                let mut req = self.sim.service_request(&r);
                req.processing = cpu;
                self.by_label.insert(label.clone(), idx);
                self.latest.entry(ev.node.clone()).or_default().push(idx);
                self.jobs.push(Pending {
                    label,
                    node: ev.node.clone(),
                    kind: "request",
                    issued_at: now,
                    status: None,
                    plan: None,
                    service: None,
                    served: 0,
                    hold,
                });
                let arrive = self.sim.transfer(
                    &t,
                    &up,
                    self.sim.cfg.request_bytes,
                    "service_request",
                    now,
                    &mut self.trace,
                )?;
                self.queue.push(arrive, Ev::AtController(Job::Request { idx, req }));
            }
            Action::Shutdown { label } => {
                let target = self.resolve(&ev.node, &label);
                let service = target.and_then(|j| self.jobs[j].service.clone());
                let idx = self.jobs.len();
                self.jobs.push(Pending {
                    label: label
                        .or_else(|| target.map(|j| self.jobs[j].label.clone()))
                        .unwrap_or_else(|| format!("shutdown-{idx}")),
                    node: ev.node.clone(),
                    kind: "shutdown",
                    issued_at: now,
                    status: None,
                    plan: None,
                    service: service.clone(),
                    served: 0,
                    hold: None,
                });
                let arrive = self.sim.transfer(
                    &t,
                    &up,
                    self.sim.cfg.request_bytes,
                    "shutdown_request",
                    now,
                    &mut self.trace,
                )?;
                self.queue
                    .push(arrive, Ev::AtController(Job::Shutdown { idx, service }));
            }
            Action::Stream { rate, duration, label } => {
                let target = self.resolve(&ev.node, &label).ok_or_else(|| {
                    SimError::Scenario(format!("stream from {} at {now} has no live service", ev.node))
                })?;
                let job = &self.jobs[target];
                let stream = self.streams.len();
                self.streams.push(StreamState {
                    label: job.label.clone(),
                    rate,
                    plan: job.plan.clone(),
                    samples: (duration / self.s.sample_period).floor() as usize,
                });
                if self.streams[stream].samples > 0 {
                    self.queue.push(now + self.s.sample_period, Ev::Sample { stream, k: 1 });
                }
            }
        }
        Ok(())
    }

    fn serve_next(&mut self, now: f64) -> Result<(), SimError> {
        let Some(job) = self.waiting.pop_front() else {
            return Ok(());
        };
        self.busy = true;
        let t = self.sim.orch.snapshot();
        let mark = self.sim.ledger_mark();
        let (idx, done) = match job {
            Job::Request { idx, req } => {
                self.trace.push(now, SimEventKind::RaaStart);
                let outcome = self.sim.orch.service_end_device_detailed(&req, &req.node_id)?;
                let raa = match self.sim.cfg.raa_clock {
                    RaaClock::WallTime => outcome.raa_time.as_secs_f64(),
                    RaaClock::Fixed(s) => s,
                };
                self.trace.push(now + raa, SimEventKind::RaaEnd);
                let records = self.sim.records_since(mark);
                let comm_end = self.sim.config_exchange(&t, &records, now + raa, &mut self.trace)?;
                let exec = match &outcome.plan {
                    Some(p) => p.switches.len() as f64 * self.sim.cfg.switch_exec_s + self.sim.cfg.fog_exec_s,
                    None => 0.0,
                };
                self.sample(now, "raa_exec", raa);
                self.sample(now, "config_comm", comm_end - (now + raa));
                let job = &mut self.jobs[idx];
                if let ResponseStatus::Success { service_id, .. } = &outcome.response.status {
                    job.service = Some(service_id.clone());
                }
                job.status = Some(outcome.response.status);
                job.plan = outcome.plan;
                (idx, comm_end + exec)
            }
            Job::Shutdown { idx, service } => {
                let result = match &service {
                    Some(s) => {
                        self.sim
                            .orch
                            .service_shutdown_request(&ShutdownRequest { service_id: s.clone() })
                            .result
                    }
                    None => ShutdownResult::UnknownService,
                };
                let records = self.sim.records_since(mark);
                let comm_end = self.sim.config_exchange(&t, &records, now, &mut self.trace)?;
                if result == ShutdownResult::Ok {
                    for j in &mut self.jobs {
                        if j.kind == "request" && j.service == service {
                            j.service = None;
                        }
                    }
                }
                let job = &mut self.jobs[idx];
                job.status = Some(match result {
                    ShutdownResult::Ok => ResponseStatus::Success {
                        fog_address: String::new(),
                        proxy_port: 0,
                        service_id: service.clone().expect("ok implies a service"),
                    },
                    ShutdownResult::UnknownService => ResponseStatus::Failure {
                        reason: crate::protocol::FailureReason::Rejected {
                            detail: "unknown service".into(),
                        },
                    },
                });
                (idx, comm_end)
            }
        };
        self.jobs[idx].served = self.served;
        self.served += 1;
        let mut down = self.sim.uplink(&self.jobs[idx].node)?;
        down.reverse();
        let arrive = self.sim.transfer(
            &t,
            &down,
            self.sim.cfg.response_bytes,
            "response",
            done,
            &mut self.trace,
        )?;
        self.queue.push(done, Ev::ControllerFree);
        self.queue.push(arrive, Ev::Reply { idx });
        Ok(())
    }

    fn reply(&mut self, now: f64, idx: usize) {
        let job = &self.jobs[idx];
        let status = job.status.clone().expect("served before reply");
        let outcome = Outcome {
            label: job.label.clone(),
            node: job.node.clone(),
            kind: job.kind.to_string(),
            issued_at: job.issued_at,
            completed_at: now,
            status: failure_code(&status),
            fog: job.plan.as_ref().map(|p| p.fog.clone()),
            service_id: match &status {
                ResponseStatus::Success { service_id, .. } => Some(service_id.clone()),
                _ => None,
            },
            served: job.served,
        };
        if job.kind == "request" {
            let waited = now - job.issued_at;
            let held = job.hold.filter(|_| job.service.is_some());
            let node = job.node.clone();
            let label = Some(job.label.clone());
            self.sample(now, "fulfillment", waited);
            if let Some(hold) = held {
                self.extra.push(ScenarioEvent {
                    at: now + hold,
                    node,
                    action: Action::Shutdown { label },
                });
                let i = self.s.events.len() + self.extra.len() - 1;
                self.queue.push(now + hold, Ev::Issue(i));
            }
        }
        self.outcomes.push((idx, outcome));
    }

    fn stream_sample(&mut self, now: f64, stream: usize, k: usize) {
        let st = &self.streams[stream];
        let live = st.plan.as_ref().filter(|p| {
            self.jobs.iter().any(|j| {
                j.kind == "request" && j.plan.as_ref().map(|q| q.cookie) == Some(p.cookie) && j.service.is_some()
            })
        });
        let mut value = live.map_or(0, |p| self.sim.enforced_rate(p, st.rate));
        if self.sim.cfg.jitter_bps > 0 && value > 0 {
            value = value.saturating_sub(self.rng.gen_range(0..=self.sim.cfg.jitter_bps));
        }
        let series = format!("throughput:{}", st.label);
        let more = k < st.samples;
        self.sample(now, series, value as f64);
        if more {
            self.queue
                .push(now + self.s.sample_period, Ev::Sample { stream, k: k + 1 });
        }
    }
}

/// Request used by the sweeps: small enough that any fog can serve many.
pub fn probe_request(end_device: NodeId) -> ResourceRequest {
    ResourceRequest::new(end_device, 10_000_000, Millicores(100), 64 << 20)
}

/// Wall time of the allocation algorithm from every end-device, in seconds.
/// Each end-device gets the minimum over `reps` runs on an untouched copy
/// of the topology.
pub fn raa_time_samples(t: &Topology, reps: usize) -> Vec<f64> {
    let ends: Vec<NodeId> = t.nodes_of(NodeKind::EndDevice).map(|n| n.id.clone()).collect();
    ends.into_iter()
        .map(|e| {
            let r = probe_request(e);
            (0..reps.max(1))
                .map(|i| {
                    let mut scratch = t.clone();
                    let mut ports = PortPool::default();
                    let start = std::time::Instant::now();
                    let res = raa::allocate::<Cost>(&mut scratch, &r, i as u64 + 1, &mut ports);
                    let dt = start.elapsed().as_secs_f64();
                    std::hint::black_box(res.ok());
                    dt
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// One request from every end-device in turn on a shared simulator; returns
/// `(path hops, total delay)` for each success.
pub fn alloc_delay_samples(t: Topology, load: Load, cfg: &SimConfig) -> Result<Vec<(usize, f64)>, SimError> {
    let ends: Vec<NodeId> = t.nodes_of(NodeKind::EndDevice).map(|n| n.id.clone()).collect();
    let mut sim = Simulator::new(t, cfg.clone(), load)?;
    let mut out = Vec::new();
    for e in ends {
        let d = sim.simulate_request(&probe_request(e))?;
        if matches!(d.status, ResponseStatus::Success { .. }) {
            out.push((d.path_hops, d.total));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::southbound::ControlOp;

    fn id(s: &str) -> NodeId {
        NodeId::new(s).unwrap()
    }

    fn switches(t: &Topology) -> usize {
        t.nodes_of(NodeKind::Switch).count()
    }

    #[test]
    fn tree_counts() {
        let t = TopologyGen::tree(25, 12, 6).with_fogs(5).generate().unwrap();
        assert_eq!(switches(&t), 43);
        assert_eq!(t.nodes_of(NodeKind::FogDevice).count(), 30);
        assert_eq!(t.nodes_of(NodeKind::EndDevice).count(), 25);
        t.check_invariants().unwrap();
        // The controller hangs off the middle level-3 switch.
        let ctl = id(CONTROLLER_ID);
        let up: Vec<_> = t.outgoing(&ctl).map(|l| l.dst.clone()).collect();
        assert_eq!(up, vec![id("openflow:41")]);
    }

    #[test]
    fn leaf_spine_smallest() {
        let snap = TopologyGen::leaf_spine(3, 3).snapshot().unwrap();
        let is_l2 = |n: &NodeId| ["openflow:4", "openflow:5", "openflow:6"].contains(&n.as_str());
        for i in 1..=3 {
            let up = snap
                .links
                .iter()
                .filter(|l| l.src.as_str() == format!("openflow:{i}") && is_l2(&l.dst))
                .count();
            assert_eq!(up, 1);
        }
        let horizontal = snap.links.iter().filter(|l| is_l2(&l.src) && is_l2(&l.dst)).count();
        assert_eq!(horizontal, 2);
        let t = TopologyGen::leaf_spine(3, 3).generate().unwrap();
        let h2 = t.links().filter(|l| is_l2(&l.src) && is_l2(&l.dst)).count();
        assert_eq!(h2, 4);
    }

    #[test]
    fn leaf_spine_window_stays_in_range() {
        let snap = TopologyGen::leaf_spine(25, 12).snapshot().unwrap();
        for i in 1..=25 {
            let ups: Vec<usize> = snap
                .links
                .iter()
                .filter(|l| l.src.as_str() == format!("openflow:{i}"))
                .filter_map(|l| l.dst.as_str().strip_prefix("openflow:")?.parse().ok())
                .collect();
            assert_eq!(ups.len(), 4);
            assert!(ups.iter().all(|&u| (26..=37).contains(&u)));
            assert!(ups.windows(2).all(|w| w[1] == w[0] + 1));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let g = TopologyGen::tree(7, 4, 2).with_fogs(3);
        assert_eq!(g.snapshot().unwrap(), g.snapshot().unwrap());
    }

    #[test]
    fn parse_gen() {
        assert_eq!(TopologyGen::parse("a:25,12").unwrap().levels, vec![25, 12]);
        assert_eq!(TopologyGen::parse("b:25,12,6").unwrap().kind, GenKind::Tree);
        assert!(TopologyGen::parse("a:25").is_err());
        assert!(TopologyGen::parse("b:1,0,1").is_err());
        assert!(TopologyGen::parse("c:1,1").is_err());
        assert_eq!(TopologyGen::parse("b:25,12,6").unwrap().label(), "b:25,12,6");
    }

    #[test]
    fn event_queue_orders_by_time_then_insertion() {
        let mut q = EventQueue::new();
        q.push(2.0, "c");
        q.push(1.0, "a");
        q.push(1.0, "b");
        q.push(0.5, "z");
        let order: Vec<_> = q.drain_ordered().into_iter().map(|(_, e)| e).collect();
        assert_eq!(order, vec!["z", "a", "b", "c"]);
    }

    fn fixed() -> SimConfig {
        SimConfig::default().fixed_clock(0.001)
    }

    #[test]
    fn components_sum_and_bytes() {
        let t = line_topology(3, 1_000_000_000, DEFAULT_CONTROL_BW).unwrap();
        let r = probe_request(id("end:1"));
        let d = simulate_request(&t, &r, Load::idle(DEFAULT_CONTROL_BW), &fixed()).unwrap();
        assert!(matches!(d.status, ResponseStatus::Success { .. }));
        let sum = d.send_request + d.raa_exec + d.config_comm + d.config_exec + d.reply;
        assert!((d.total - sum).abs() < 1e-12);
        let creates: Vec<_> = d.records.iter().filter(|r| r.op == ControlOp::CreateQueue).collect();
        assert_eq!(creates.len(), 6);
        assert!(creates.iter().all(|r| (r.up, r.down) == (55, 1000)));
        // Serialization at 50 Mbps: a 256-byte request over 2 hops.
        let hop = 256.0 * 8.0 / 50e6;
        assert!((d.send_request - 2.0 * hop).abs() < 1e-15);
    }

    #[test]
    fn hop_doubling() {
        let run = |n| {
            let t = line_topology(n, 1_000_000_000, DEFAULT_CONTROL_BW).unwrap();
            simulate_request(
                &t,
                &probe_request(id("end:1")),
                Load::idle(DEFAULT_CONTROL_BW),
                &fixed(),
            )
            .unwrap()
            .config_comm
        };
        for n in [1, 2, 4] {
            let ratio = run(2 * n) / run(n);
            assert!((ratio - 2.0).abs() < 1e-9, "{n}: {ratio}");
        }
    }

    #[test]
    fn load_monotonicity_and_saturation() {
        let t = TopologyGen::tree(4, 2, 2).with_fogs(2).generate().unwrap();
        let r = probe_request(id("end:1"));
        let total = |x, y| simulate_request(&t, &r, Load { x, y }, &fixed()).unwrap().total;
        assert!(total(500_000_000, 50_000_000) > total(0, 50_000_000));
        assert!(total(0, 100_000_000) < total(0, 50_000_000));
        assert!(matches!(
            simulate_request(&t, &r, Load { x: 1_000_000_000, y: 1 }, &fixed()),
            Err(SimError::Saturated { .. })
        ));
    }

    #[test]
    fn deterministic_reports() {
        let t = TopologyGen::tree(4, 2, 2).with_fogs(2).generate().unwrap();
        let r = probe_request(id("end:3"));
        let a = simulate_request(&t, &r, Load::idle(DEFAULT_CONTROL_BW), &fixed()).unwrap();
        let b = simulate_request(&t, &r, Load::idle(DEFAULT_CONTROL_BW), &fixed()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn queue_growth_raises_config_bytes() {
        let t = line_topology(2, 10_000_000_000, DEFAULT_CONTROL_BW).unwrap();
        let mut sim = Simulator::new(t, fixed(), Load::idle(DEFAULT_CONTROL_BW)).unwrap();
        let mut last = 0.0;
        for _ in 0..4 {
            let d = sim.simulate_request(&probe_request(id("end:1"))).unwrap();
            assert!(d.config_comm > last);
            last = d.config_comm;
        }
    }

    fn scenario(text: &str) -> Scenario {
        Scenario::from_json(text).unwrap()
    }

    #[test]
    fn sequential_sleep_apps() {
        let t = TopologyGen::tree(8, 4, 2).with_fogs(2).generate().unwrap();
        let events: Vec<String> = (0..8)
            .map(|i| {
                format!(
                    r#"{{"at": {}, "node": "end:{}", "action": {{"type": "request", "bw": 10000000, "cpu": 0.5, "mem": 1000000, "hold": 1.0}}}}"#,
                    i * 5,
                    i + 1
                )
            })
            .collect();
        let s = scenario(&format!(r#"{{"events": [{}]}}"#, events.join(",")));
        let m = run_scenario(t, &s, &fixed()).unwrap();
        let sum = m.summary();
        assert_eq!((sum.requests, sum.successes, sum.shutdowns), (8, 8, 8));
        assert!(m.reconciled(), "{:?}", m.reconciliation_error);
        assert_eq!(m.series("fulfillment").len(), 8);
    }

    #[test]
    fn concurrent_requests_served_in_arrival_order() {
        let t = TopologyGen::tree(6, 3, 3).with_fogs(3).generate().unwrap();
        let ends: Vec<String> = (1..=6).map(|i| format!("end:{i}")).collect();
        let events: Vec<String> = ends
            .iter()
            .map(|e| {
                format!(r#"{{"at": 0, "node": "{e}", "action": {{"type": "request", "bw": 1000000, "cpu": 0.1, "mem": 1000}}}}"#)
            })
            .collect();
        let s = scenario(&format!(r#"{{"events": [{}]}}"#, events.join(",")));
        let t2 = t.clone();
        let m = run_scenario(t, &s, &fixed()).unwrap();
        let sim = Simulator::new(t2, fixed(), Load::idle(DEFAULT_CONTROL_BW)).unwrap();
        let dist = |n: &NodeId| sim.uplink(n).unwrap().len();
        let mut expected: Vec<(usize, usize)> =
            m.outcomes.iter().enumerate().map(|(i, o)| (dist(&o.node), i)).collect();
        expected.sort();
        let served: Vec<usize> = {
            let mut v: Vec<(usize, usize)> = m.outcomes.iter().enumerate().map(|(i, o)| (o.served, i)).collect();
            v.sort();
            v.into_iter().map(|(_, i)| i).collect()
        };
        assert_eq!(served, expected.into_iter().map(|(_, i)| i).collect::<Vec<_>>());
        let mut done: Vec<f64> = m.outcomes.iter().map(|o| o.completed_at).collect();
        let before = done.clone();
        done.sort_by(f64::total_cmp);
        assert_eq!(served.iter().map(|&i| before[i]).collect::<Vec<_>>(), done);
    }

    #[test]
    fn stream_is_capped_by_reservation() {
        let t = TopologyGen::tree(4, 2, 2).with_fogs(2).generate().unwrap();
        let s = scenario(
            r#"{"events": [
                {"at": 0, "node": "end:1", "action": {"type": "request", "bw": 300000000, "cpu": 1, "mem": 1000, "label": "s"}},
                {"at": 1, "node": "end:1", "action": {"type": "stream", "rate": 900000000, "duration": 10, "label": "s"}},
                {"at": 5, "node": "end:2", "action": {"type": "request", "bw": 10000000, "cpu": 0.1, "mem": 1000, "hold": 1}}
            ]}"#,
        );
        let m = run_scenario(t, &s, &fixed()).unwrap();
        let tp = m.series("throughput:s");
        assert_eq!(tp.len(), 10);
        assert!(tp.iter().all(|&v| v == 300e6));
        assert!(m.reconciled());
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("time,series,value\n"));
    }

    #[test]
    fn scenario_rejects_unknown_nodes() {
        let t = TopologyGen::tree(2, 1, 1).generate().unwrap();
        let s = scenario(r#"{"events": [{"at": 0, "node": "end:99", "action": {"type": "shutdown"}}]}"#);
        assert!(matches!(run_scenario(t, &s, &fixed()), Err(SimError::UnknownNode(_))));
    }

    #[test]
    fn ecdf_and_quartiles() {
        assert_eq!(
            ecdf(&[3.0, 1.0, 2.0, 4.0]),
            vec![(1.0, 0.25), (2.0, 0.5), (3.0, 0.75), (4.0, 1.0)]
        );
        assert_eq!(quartiles(&[1.0, 2.0, 3.0, 4.0, 5.0]), Some((2.0, 3.0, 4.0)));
        assert_eq!(median(&[]), None);
    }
}
