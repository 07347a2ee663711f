//! Switch and fog-device configuration backend.
//!
//! [`Backend`] is the surface the orchestrator drives: queue and QoS
//! management over the switch management protocol, flow installation, and
//! container control on fog-devices. [`SimFabric`] is the deterministic
//! in-memory reference implementation. It also records the control bytes
//! each call would exchange.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::protocol::{ServiceId, Transport};
use crate::topology::{Bps, Millicores, NodeId, NodeKind, PortNo, Topology};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FabricError {
    #[error("unknown switch {0}")]
    UnknownSwitch(NodeId),
    #[error("switch {0} has no port {1}")]
    UnknownPort(NodeId, PortNo),
    #[error("queue {queue_id} on {switch} port {port} does not exist")]
    UnknownQueue {
        switch: NodeId,
        port: PortNo,
        queue_id: u32,
    },
    #[error("queue {queue_id} on {switch} port {port} is still referenced by a flow")]
    QueueInUse {
        switch: NodeId,
        port: PortNo,
        queue_id: u32,
    },
    #[error("queue {queue_id} on {switch} port {port} is still attached to QoS {qos_id}")]
    QueueAttached {
        switch: NodeId,
        port: PortNo,
        queue_id: u32,
        qos_id: u32,
    },
    #[error("queue rate limit must be positive")]
    ZeroRate,
    #[error("QoS {1} on {0} does not exist")]
    UnknownQos(NodeId, u32),
    #[error("QoS {1} already exists on {0}")]
    DuplicateQos(NodeId, u32),
    #[error("QoS {1} on {0} is still in use")]
    QosInUse(NodeId, u32),
    #[error("QoS {qos_id} on {switch} is not placed on port {port}")]
    QosPortMismatch { switch: NodeId, qos_id: u32, port: PortNo },
    #[error("port {1} on {0} already carries a QoS entry")]
    PortHasQos(NodeId, PortNo),
    #[error("port {1} on {0} carries no QoS entry")]
    PortWithoutQos(NodeId, PortNo),
    #[error("flow on {0} is malformed: {1}")]
    MalformedFlow(NodeId, String),
    #[error("unknown fog-device {0}")]
    UnknownFog(NodeId),
    #[error("fog-device {0} lacks headroom for the container")]
    InsufficientHeadroom(NodeId),
    #[error("port {1} already in use on fog-device {0}")]
    PortInUse(NodeId, u16),
    #[error("unknown service {0}")]
    UnknownService(ServiceId),
    #[error("injected fault at call {0}")]
    Injected(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct QueueRef {
    pub port: PortNo,
    pub queue_id: u32,
}

/// A rate-limited egress queue on one switch port.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueSpec {
    pub switch: NodeId,
    pub port: PortNo,
    pub queue_id: u32,
    pub rate_limit: Bps,
}

impl QueueSpec {
    pub fn queue_ref(&self) -> QueueRef {
        QueueRef {
            port: self.port,
            queue_id: self.queue_id,
        }
    }
}

/// A QoS entry: the set of queues shaping one port.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QosEntry {
    pub port: Option<PortNo>,
    pub queues: BTreeSet<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortField {
    Src,
    Dst,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FlowMatch {
    pub src_addr: String,
    pub dst_addr: String,
    pub transport: Transport,
    pub port_field: PortField,
    pub port_value: u16,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum FlowAction {
    Output { port: PortNo },
    Enqueue { port: PortNo, queue_id: u32 },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FlowSpec {
    pub switch: NodeId,
    #[serde(rename = "match")]
    pub matcher: FlowMatch,
    pub actions: Vec<FlowAction>,
    pub priority: u16,
    /// Identifies the reservation that owns the flow.
    pub cookie: u64,
}

impl FlowSpec {
    pub fn output_port(&self) -> Option<PortNo> {
        self.actions.iter().find_map(|a| match a {
            FlowAction::Output { port } => Some(*port),
            _ => None,
        })
    }

    pub fn enqueue(&self) -> Option<QueueRef> {
        self.actions.iter().find_map(|a| match a {
            FlowAction::Enqueue { port, queue_id } => Some(QueueRef {
                port: *port,
                queue_id: *queue_id,
            }),
            _ => None,
        })
    }

    pub fn matches(&self, h: &PacketHeader) -> bool {
        let m = &self.matcher;
        let port = match m.port_field {
            PortField::Src => h.src_port,
            PortField::Dst => h.dst_port,
        };
        m.src_addr == h.src_addr && m.dst_addr == h.dst_addr && m.transport == h.transport && m.port_value == port
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PacketHeader {
    pub src_addr: String,
    pub dst_addr: String,
    pub transport: Transport,
    pub src_port: u16,
    pub dst_port: u16,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Forward { port: PortNo, queue: Option<QueueRef> },
    Drop,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerSpec {
    pub fog: NodeId,
    pub image: String,
    pub cpu: Millicores,
    pub memory: u64,
    pub port: u16,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Container {
    pub image: String,
    pub cpu: Millicores,
    pub memory: u64,
    pub port: u16,
}

/// Configuration surface of the network and the fog-devices.
///
/// Every call is synchronous. Queue identity is `(switch, port, queue_id)`.
pub trait Backend: Send {
    /// Creates a queue, or updates the rate of an existing one.
    fn create_queue(&mut self, queue: &QueueSpec) -> Result<(), FabricError>;
    fn delete_queue(&mut self, switch: &NodeId, queue: QueueRef) -> Result<(), FabricError>;
    fn create_qos(&mut self, switch: &NodeId, qos_id: u32) -> Result<(), FabricError>;
    fn delete_qos(&mut self, switch: &NodeId, qos_id: u32) -> Result<(), FabricError>;
    fn place_queue_on_qos(&mut self, switch: &NodeId, qos_id: u32, queue: QueueRef) -> Result<(), FabricError>;
    fn remove_queue_from_qos(&mut self, switch: &NodeId, qos_id: u32, queue: QueueRef) -> Result<(), FabricError>;
    fn place_qos_on_port(&mut self, switch: &NodeId, qos_id: u32, port: PortNo) -> Result<(), FabricError>;
    fn remove_qos_from_port(&mut self, switch: &NodeId, port: PortNo) -> Result<(), FabricError>;

    fn create_flow(&mut self, flow: &FlowSpec) -> Result<(), FabricError>;
    /// Removes every flow bearing `cookie` on `switch`, returning how many.
    fn delete_flow(&mut self, switch: &NodeId, cookie: u64) -> Result<usize, FabricError>;

    fn start_container(&mut self, spec: &ContainerSpec) -> Result<ServiceId, FabricError>;
    fn stop_container(&mut self, service: &ServiceId) -> Result<(), FabricError>;

    /// Full configuration state, for audits and assertions.
    fn dump(&self) -> FabricState;

    /// Learns switches, ports and fog-devices from the topology.
    fn observe_topology(&mut self, _topology: &Topology) {}
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchState {
    pub ports: BTreeSet<PortNo>,
    /// Queue rate limits by port, then queue id.
    pub queues: BTreeMap<PortNo, BTreeMap<u32, Bps>>,
    pub qos: BTreeMap<u32, QosEntry>,
    pub port_qos: BTreeMap<PortNo, u32>,
    pub flows: Vec<FlowSpec>,
}

impl SwitchState {
    pub fn queue_count(&self) -> usize {
        self.queues.values().map(BTreeMap::len).sum()
    }

    pub fn queue_rate(&self, q: QueueRef) -> Option<Bps> {
        self.queues.get(&q.port).and_then(|m| m.get(&q.queue_id)).copied()
    }

    fn attached_qos(&self, q: QueueRef) -> Option<u32> {
        let qos_id = *self.port_qos.get(&q.port)?;
        self.qos[&qos_id].queues.contains(&q.queue_id).then_some(qos_id)
    }

    /// Highest-priority matching flow; equal priorities go to the lower cookie.
    pub fn classify(&self, header: &PacketHeader) -> Verdict {
        let best = self
            .flows
            .iter()
            .filter(|f| f.matches(header))
            .min_by_key(|f| (std::cmp::Reverse(f.priority), f.cookie));
        match best.and_then(|f| f.output_port().map(|p| (p, f.enqueue()))) {
            Some((port, queue)) => Verdict::Forward { port, queue },
            None => Verdict::Drop,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FogState {
    pub total_processing: Millicores,
    pub total_memory: u64,
    pub containers: BTreeMap<ServiceId, Container>,
}

impl FogState {
    pub fn used(&self) -> (Millicores, u64) {
        self.containers.values().fold((Millicores(0), 0), |(c, m), k| {
            (Millicores(c.0 + k.cpu.0), m + k.memory)
        })
    }
}

/// Switch tables and fog container ledgers.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FabricState {
    pub switches: BTreeMap<NodeId, SwitchState>,
    pub fogs: BTreeMap<NodeId, FogState>,
}

impl FabricState {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fabric state serializes")
    }

    pub fn classify(&self, switch: &NodeId, header: &PacketHeader) -> Verdict {
        self.switches.get(switch).map_or(Verdict::Drop, |s| s.classify(header))
    }

    pub fn flows_with_cookie(&self, cookie: u64) -> usize {
        self.switches
            .values()
            .map(|s| s.flows.iter().filter(|f| f.cookie == cookie).count())
            .sum()
    }

    /// Checks that every flow's enqueue target exists on its own output port
    /// and that containers fit their fog-device.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (id, sw) in &self.switches {
            for f in &sw.flows {
                let q = f
                    .enqueue()
                    .ok_or_else(|| format!("flow on {id} has no enqueue action"))?;
                if Some(q.port) != f.output_port() {
                    return Err(format!(
                        "flow on {id} enqueues on port {} but outputs elsewhere",
                        q.port
                    ));
                }
                if sw.queue_rate(q).is_none() {
                    return Err(format!("flow on {id} targets missing queue {q:?}"));
                }
            }
        }
        for (id, fog) in &self.fogs {
            let (cpu, mem) = fog.used();
            if cpu > fog.total_processing || mem > fog.total_memory {
                return Err(format!("containers on {id} exceed its capacity"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlOp {
    CreateQueue,
    DeleteQueue,
    CreateQos,
    DeleteQos,
    PlaceQueueOnQos,
    RemoveQueueFromQos,
    PlaceQosOnPort,
    RemoveQosFromPort,
    CreateFlow,
    DeleteFlow,
    StartContainer,
    StopContainer,
    /// Queue-table state returned by the switch during a management
    /// transaction; grows with the number of queues already configured.
    OvsdbEcho,
}

/// Bytes exchanged by one control operation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteCost {
    /// Controller to device.
    pub up: u64,
    /// Device to controller.
    pub down: u64,
}

impl ByteCost {
    pub const fn new(up: u64, down: u64) -> Self {
        ByteCost { up, down }
    }
}

/// Control-message sizes charged per southbound call.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ByteCosts {
    pub queue_create: ByteCost,
    /// Every other queue and QoS management call.
    pub ovsdb_other: ByteCost,
    pub flow_mod: ByteCost,
    pub container_rpc: ByteCost,
    /// Per queue already present on a switch, echoed during each queue
    /// creation on that switch.
    pub echo_per_queue: ByteCost,
}

impl Default for ByteCosts {
    fn default() -> Self {
        ByteCosts {
            queue_create: ByteCost::new(55, 1000),
            ovsdb_other: ByteCost::new(0, 0),
            flow_mod: ByteCost::new(150, 100),
            container_rpc: ByteCost::new(2000, 500),
            echo_per_queue: ByteCost::new(0, 0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteRecord {
    pub op: ControlOp,
    pub node: NodeId,
    pub up: u64,
    pub down: u64,
}

/// Append-only log of control bytes per operation.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteLedger {
    records: Vec<ByteRecord>,
}

impl ByteLedger {
    pub fn record(&mut self, op: ControlOp, node: &NodeId, cost: ByteCost) {
        self.records.push(ByteRecord {
            op,
            node: node.clone(),
            up: cost.up,
            down: cost.down,
        });
    }

    pub fn records(&self) -> &[ByteRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn since(&self, mark: usize) -> &[ByteRecord] {
        &self.records[mark.min(self.records.len())..]
    }

    pub fn totals(&self) -> ByteCost {
        self.records.iter().fold(ByteCost::default(), |acc, r| ByteCost {
            up: acc.up + r.up,
            down: acc.down + r.down,
        })
    }
}

/// Deterministic simulated switch/fog fabric.
#[derive(Clone, Debug, Default)]
pub struct SimFabric {
    state: FabricState,
    costs: ByteCosts,
    ledger: ByteLedger,
    next_service: u64,
}

impl SimFabric {
    pub fn new(costs: ByteCosts) -> Self {
        SimFabric {
            costs,
            ..Default::default()
        }
    }

    pub fn from_topology(topology: &Topology, costs: ByteCosts) -> Self {
        let mut f = SimFabric::new(costs);
        f.observe_topology(topology);
        f
    }

    pub fn state(&self) -> &FabricState {
        &self.state
    }

    pub fn ledger(&self) -> &ByteLedger {
        &self.ledger
    }

    pub fn costs(&self) -> &ByteCosts {
        &self.costs
    }

    pub fn classify(&self, switch: &NodeId, header: &PacketHeader) -> Verdict {
        self.state.classify(switch, header)
    }

    pub fn add_switch(&mut self, id: NodeId, ports: impl IntoIterator<Item = PortNo>) {
        self.state.switches.entry(id).or_default().ports.extend(ports);
    }

    pub fn add_fog(&mut self, id: NodeId, processing: Millicores, memory: u64) {
        let fog = self.state.fogs.entry(id).or_default();
        fog.total_processing = processing;
        fog.total_memory = memory;
    }

    fn switch_mut(&mut self, id: &NodeId) -> Result<&mut SwitchState, FabricError> {
        self.state
            .switches
            .get_mut(id)
            .ok_or_else(|| FabricError::UnknownSwitch(id.clone()))
    }

    fn charge(&mut self, op: ControlOp, node: &NodeId) {
        let cost = match op {
            ControlOp::CreateQueue => self.costs.queue_create,
            ControlOp::CreateFlow | ControlOp::DeleteFlow => self.costs.flow_mod,
            ControlOp::StartContainer | ControlOp::StopContainer => self.costs.container_rpc,
            ControlOp::OvsdbEcho => self.costs.echo_per_queue,
            _ => self.costs.ovsdb_other,
        };
        self.ledger.record(op, node, cost);
    }
}

impl Backend for SimFabric {
    fn create_queue(&mut self, queue: &QueueSpec) -> Result<(), FabricError> {
        if queue.rate_limit == 0 {
            return Err(FabricError::ZeroRate);
        }
        let sw = self.switch_mut(&queue.switch)?;
        if !sw.ports.contains(&queue.port) {
            return Err(FabricError::UnknownPort(queue.switch.clone(), queue.port));
        }
        let existing = sw.queue_count() as u64;
        sw.queues
            .entry(queue.port)
            .or_default()
            .insert(queue.queue_id, queue.rate_limit);
        self.charge(ControlOp::CreateQueue, &queue.switch);
        let echo = self.costs.echo_per_queue;
        if existing > 0 && echo != ByteCost::default() {
            self.ledger.record(
                ControlOp::OvsdbEcho,
                &queue.switch,
                ByteCost::new(echo.up * existing, echo.down * existing),
            );
        }
        Ok(())
    }

    fn delete_queue(&mut self, switch: &NodeId, q: QueueRef) -> Result<(), FabricError> {
        let sw = self.switch_mut(switch)?;
        if sw.queue_rate(q).is_none() {
            return Err(FabricError::UnknownQueue {
                switch: switch.clone(),
                port: q.port,
                queue_id: q.queue_id,
            });
        }
        if sw.flows.iter().any(|f| f.enqueue() == Some(q)) {
            return Err(FabricError::QueueInUse {
                switch: switch.clone(),
                port: q.port,
                queue_id: q.queue_id,
            });
        }
        if let Some(qos_id) = sw.attached_qos(q) {
            return Err(FabricError::QueueAttached {
                switch: switch.clone(),
                port: q.port,
                queue_id: q.queue_id,
                qos_id,
            });
        }
        let port_queues = sw.queues.get_mut(&q.port).expect("checked");
        port_queues.remove(&q.queue_id);
        if port_queues.is_empty() {
            sw.queues.remove(&q.port);
        }
        self.charge(ControlOp::DeleteQueue, switch);
        Ok(())
    }

    fn create_qos(&mut self, switch: &NodeId, qos_id: u32) -> Result<(), FabricError> {
        let sw = self.switch_mut(switch)?;
        if sw.qos.contains_key(&qos_id) {
            return Err(FabricError::DuplicateQos(switch.clone(), qos_id));
        }
        sw.qos.insert(qos_id, QosEntry::default());
        self.charge(ControlOp::CreateQos, switch);
        Ok(())
    }

    fn delete_qos(&mut self, switch: &NodeId, qos_id: u32) -> Result<(), FabricError> {
        let sw = self.switch_mut(switch)?;
        let qos = sw
            .qos
            .get(&qos_id)
            .ok_or_else(|| FabricError::UnknownQos(switch.clone(), qos_id))?;
        if qos.port.is_some() || !qos.queues.is_empty() {
            return Err(FabricError::QosInUse(switch.clone(), qos_id));
        }
        sw.qos.remove(&qos_id);
        self.charge(ControlOp::DeleteQos, switch);
        Ok(())
    }

    fn place_queue_on_qos(&mut self, switch: &NodeId, qos_id: u32, q: QueueRef) -> Result<(), FabricError> {
        let sw = self.switch_mut(switch)?;
        if sw.queue_rate(q).is_none() {
            return Err(FabricError::UnknownQueue {
                switch: switch.clone(),
                port: q.port,
                queue_id: q.queue_id,
            });
        }
        let qos = sw
            .qos
            .get_mut(&qos_id)
            .ok_or_else(|| FabricError::UnknownQos(switch.clone(), qos_id))?;
        if qos.port != Some(q.port) {
            return Err(FabricError::QosPortMismatch {
                switch: switch.clone(),
                qos_id,
                port: q.port,
            });
        }
        qos.queues.insert(q.queue_id);
        self.charge(ControlOp::PlaceQueueOnQos, switch);
        Ok(())
    }

    fn remove_queue_from_qos(&mut self, switch: &NodeId, qos_id: u32, q: QueueRef) -> Result<(), FabricError> {
        let sw = self.switch_mut(switch)?;
        let qos = sw
            .qos
            .get_mut(&qos_id)
            .ok_or_else(|| FabricError::UnknownQos(switch.clone(), qos_id))?;
        if qos.port != Some(q.port) || !qos.queues.remove(&q.queue_id) {
            return Err(FabricError::UnknownQueue {
                switch: switch.clone(),
                port: q.port,
                queue_id: q.queue_id,
            });
        }
        self.charge(ControlOp::RemoveQueueFromQos, switch);
        Ok(())
    }

    fn place_qos_on_port(&mut self, switch: &NodeId, qos_id: u32, port: PortNo) -> Result<(), FabricError> {
        let sw = self.switch_mut(switch)?;
        if !sw.ports.contains(&port) {
            return Err(FabricError::UnknownPort(switch.clone(), port));
        }
        if sw.port_qos.contains_key(&port) {
            return Err(FabricError::PortHasQos(switch.clone(), port));
        }
        let qos = sw
            .qos
            .get_mut(&qos_id)
            .ok_or_else(|| FabricError::UnknownQos(switch.clone(), qos_id))?;
        if qos.port.is_some() {
            return Err(FabricError::QosInUse(switch.clone(), qos_id));
        }
        qos.port = Some(port);
        sw.port_qos.insert(port, qos_id);
        self.charge(ControlOp::PlaceQosOnPort, switch);
        Ok(())
    }

    fn remove_qos_from_port(&mut self, switch: &NodeId, port: PortNo) -> Result<(), FabricError> {
        let sw = self.switch_mut(switch)?;
        let qos_id = *sw
            .port_qos
            .get(&port)
            .ok_or_else(|| FabricError::PortWithoutQos(switch.clone(), port))?;
        if !sw.qos[&qos_id].queues.is_empty() {
            return Err(FabricError::QosInUse(switch.clone(), qos_id));
        }
        sw.port_qos.remove(&port);
        sw.qos.get_mut(&qos_id).expect("indexed").port = None;
        self.charge(ControlOp::RemoveQosFromPort, switch);
        Ok(())
    }

    fn create_flow(&mut self, flow: &FlowSpec) -> Result<(), FabricError> {
        let sw = self.switch_mut(&flow.switch)?;
        let malformed = |why: &str| FabricError::MalformedFlow(flow.switch.clone(), why.to_string());
        let out = flow.output_port().ok_or_else(|| malformed("no output action"))?;
        if !sw.ports.contains(&out) {
            return Err(FabricError::UnknownPort(flow.switch.clone(), out));
        }
        if let Some(q) = flow.enqueue() {
            if q.port != out {
                return Err(malformed("enqueue port differs from output port"));
            }
            if sw.queue_rate(q).is_none() {
                return Err(FabricError::UnknownQueue {
                    switch: flow.switch.clone(),
                    port: q.port,
                    queue_id: q.queue_id,
                });
            }
        }
        sw.flows.push(flow.clone());
        self.charge(ControlOp::CreateFlow, &flow.switch);
        Ok(())
    }

    fn delete_flow(&mut self, switch: &NodeId, cookie: u64) -> Result<usize, FabricError> {
        let sw = self.switch_mut(switch)?;
        let before = sw.flows.len();
        sw.flows.retain(|f| f.cookie != cookie);
        let removed = before - sw.flows.len();
        if removed > 0 {
            self.charge(ControlOp::DeleteFlow, switch);
        }
        Ok(removed)
    }

    fn start_container(&mut self, spec: &ContainerSpec) -> Result<ServiceId, FabricError> {
        let fog = self
            .state
            .fogs
            .get_mut(&spec.fog)
            .ok_or_else(|| FabricError::UnknownFog(spec.fog.clone()))?;
        if fog.containers.values().any(|c| c.port == spec.port) {
            return Err(FabricError::PortInUse(spec.fog.clone(), spec.port));
        }
        let (cpu, mem) = fog.used();
        if cpu.0 + spec.cpu.0 > fog.total_processing.0 || mem + spec.memory > fog.total_memory {
            return Err(FabricError::InsufficientHeadroom(spec.fog.clone()));
        }
        self.next_service += 1;
        let id = ServiceId(format!("svc-{}", self.next_service));
        fog.containers.insert(
            id.clone(),
            Container {
                image: spec.image.clone(),
                cpu: spec.cpu,
                memory: spec.memory,
                port: spec.port,
            },
        );
        self.charge(ControlOp::StartContainer, &spec.fog);
        Ok(id)
    }

    fn stop_container(&mut self, service: &ServiceId) -> Result<(), FabricError> {
        let fog_id = self
            .state
            .fogs
            .iter()
            .find(|(_, f)| f.containers.contains_key(service))
            .map(|(id, _)| id.clone())
            .ok_or_else(|| FabricError::UnknownService(service.clone()))?;
        self.state
            .fogs
            .get_mut(&fog_id)
            .expect("found")
            .containers
            .remove(service);
        self.charge(ControlOp::StopContainer, &fog_id);
        Ok(())
    }

    fn dump(&self) -> FabricState {
        self.state.clone()
    }

    fn observe_topology(&mut self, topology: &Topology) {
        let switches: BTreeSet<&NodeId> = topology.nodes_of(NodeKind::Switch).map(|n| &n.id).collect();
        self.state.switches.retain(|id, _| switches.contains(id));
        for id in switches {
            let ports: BTreeSet<PortNo> = topology.outgoing(id).map(|l| l.src_port).collect();
            let sw = self.state.switches.entry(id.clone()).or_default();
            sw.ports = ports;
        }
        let fogs: BTreeMap<&NodeId, _> = topology
            .nodes_of(NodeKind::FogDevice)
            .filter_map(|n| n.compute.map(|c| (&n.id, c)))
            .collect();
        self.state.fogs.retain(|id, _| fogs.contains_key(id));
        for (id, c) in fogs {
            self.add_fog(id.clone(), c.total_processing, c.total_memory);
        }
    }
}

/// Wraps a backend and fails exactly one mutating call, counted from zero.
#[derive(Debug)]
pub struct FaultInjector<B> {
    inner: B,
    fail_at: Option<usize>,
    calls: usize,
}

impl<B: Backend> FaultInjector<B> {
    pub fn new(inner: B, fail_at: Option<usize>) -> Self {
        FaultInjector {
            inner,
            fail_at,
            calls: 0,
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn into_inner(self) -> B {
        self.inner
    }

    /// Mutating calls seen so far, including the failed one.
    pub fn calls(&self) -> usize {
        self.calls
    }

    pub fn arm(&mut self, fail_at: Option<usize>) {
        self.fail_at = fail_at.map(|n| self.calls + n);
    }

    fn tick(&mut self) -> Result<(), FabricError> {
        let n = self.calls;
        self.calls += 1;
        if self.fail_at == Some(n) {
            self.fail_at = None;
            return Err(FabricError::Injected(n));
        }
        Ok(())
    }
}

impl<B: Backend> Backend for FaultInjector<B> {
    fn create_queue(&mut self, queue: &QueueSpec) -> Result<(), FabricError> {
        self.tick()?;
        self.inner.create_queue(queue)
    }
    fn delete_queue(&mut self, switch: &NodeId, queue: QueueRef) -> Result<(), FabricError> {
        self.tick()?;
        self.inner.delete_queue(switch, queue)
    }
    fn create_qos(&mut self, switch: &NodeId, qos_id: u32) -> Result<(), FabricError> {
        self.tick()?;
        self.inner.create_qos(switch, qos_id)
    }
    fn delete_qos(&mut self, switch: &NodeId, qos_id: u32) -> Result<(), FabricError> {
        self.tick()?;
        self.inner.delete_qos(switch, qos_id)
    }
    fn place_queue_on_qos(&mut self, switch: &NodeId, qos_id: u32, queue: QueueRef) -> Result<(), FabricError> {
        self.tick()?;
        self.inner.place_queue_on_qos(switch, qos_id, queue)
    }
    fn remove_queue_from_qos(&mut self, switch: &NodeId, qos_id: u32, queue: QueueRef) -> Result<(), FabricError> {
        self.tick()?;
        self.inner.remove_queue_from_qos(switch, qos_id, queue)
    }
    fn place_qos_on_port(&mut self, switch: &NodeId, qos_id: u32, port: PortNo) -> Result<(), FabricError> {
        self.tick()?;
        self.inner.place_qos_on_port(switch, qos_id, port)
    }
    fn remove_qos_from_port(&mut self, switch: &NodeId, port: PortNo) -> Result<(), FabricError> {
        self.tick()?;
        self.inner.remove_qos_from_port(switch, port)
    }
    fn create_flow(&mut self, flow: &FlowSpec) -> Result<(), FabricError> {
        self.tick()?;
        self.inner.create_flow(flow)
    }
    fn delete_flow(&mut self, switch: &NodeId, cookie: u64) -> Result<usize, FabricError> {
        self.tick()?;
        self.inner.delete_flow(switch, cookie)
    }
    fn start_container(&mut self, spec: &ContainerSpec) -> Result<ServiceId, FabricError> {
        self.tick()?;
        self.inner.start_container(spec)
    }
    fn stop_container(&mut self, service: &ServiceId) -> Result<(), FabricError> {
        self.tick()?;
        self.inner.stop_container(service)
    }
    fn dump(&self) -> FabricState {
        self.inner.dump()
    }
    fn observe_topology(&mut self, topology: &Topology) {
        self.inner.observe_topology(topology)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(s: &str) -> NodeId {
        NodeId::new(s).unwrap()
    }

    fn fabric() -> SimFabric {
        let mut f = SimFabric::new(ByteCosts::default());
        f.add_switch(id("s1"), [1, 2, 3]);
        f.add_fog(id("fog:1"), Millicores(4000), 8 << 30);
        for port in [1, 2, 3] {
            f.create_qos(&id("s1"), port).unwrap();
            f.place_qos_on_port(&id("s1"), port, port).unwrap();
        }
        f
    }

    fn queue(port: PortNo, queue_id: u32, rate: Bps) -> QueueSpec {
        QueueSpec {
            switch: id("s1"),
            port,
            queue_id,
            rate_limit: rate,
        }
    }

    fn flow(src: &str, port: PortNo, queue_id: u32, priority: u16, cookie: u64) -> FlowSpec {
        FlowSpec {
            switch: id("s1"),
            matcher: FlowMatch {
                src_addr: src.into(),
                dst_addr: "10.0.0.9".into(),
                transport: Transport::Tcp,
                port_field: PortField::Dst,
                port_value: 5201,
            },
            actions: vec![FlowAction::Output { port }, FlowAction::Enqueue { port, queue_id }],
            priority,
            cookie,
        }
    }

    fn header(src: &str) -> PacketHeader {
        PacketHeader {
            src_addr: src.into(),
            dst_addr: "10.0.0.9".into(),
            transport: Transport::Tcp,
            src_port: 40000,
            dst_port: 5201,
        }
    }

    #[test]
    fn queue_create_read_update() {
        let mut f = fabric();
        f.create_queue(&queue(2, 7, 300_000_000)).unwrap();
        let sw = &f.state().switches[&id("s1")];
        assert_eq!(sw.queue_rate(QueueRef { port: 2, queue_id: 7 }), Some(300_000_000));
        f.create_queue(&queue(2, 7, 100_000_000)).unwrap();
        assert_eq!(
            f.state().switches[&id("s1")].queue_rate(QueueRef { port: 2, queue_id: 7 }),
            Some(100_000_000)
        );
    }

    #[test]
    fn queue_creation_bytes() {
        let mut f = fabric();
        let mark = f.ledger().len();
        f.create_queue(&queue(2, 7, 300_000_000)).unwrap();
        assert_eq!(
            f.ledger().since(mark),
            &[ByteRecord {
                op: ControlOp::CreateQueue,
                node: id("s1"),
                up: 55,
                down: 1000
            }]
        );
    }

    #[test]
    fn echo_grows_with_existing_queues() {
        let mut f = SimFabric::new(ByteCosts {
            echo_per_queue: ByteCost::new(10, 20),
            ..ByteCosts::default()
        });
        f.add_switch(id("s1"), [1]);
        f.create_queue(&queue(1, 1, 1)).unwrap();
        f.create_queue(&queue(1, 2, 1)).unwrap();
        f.create_queue(&queue(1, 3, 1)).unwrap();
        let echoes: Vec<u64> = f
            .ledger()
            .records()
            .iter()
            .filter(|r| r.op == ControlOp::OvsdbEcho)
            .map(|r| r.down)
            .collect();
        assert_eq!(echoes, vec![20, 40]);
    }

    #[test]
    fn delete_errors() {
        let mut f = fabric();
        let q = QueueRef { port: 2, queue_id: 9 };
        assert!(matches!(
            f.delete_queue(&id("s1"), q),
            Err(FabricError::UnknownQueue { .. })
        ));
        f.create_queue(&queue(2, 9, 10)).unwrap();
        f.place_queue_on_qos(&id("s1"), 2, q).unwrap();
        assert!(matches!(
            f.delete_queue(&id("s1"), q),
            Err(FabricError::QueueAttached { .. })
        ));
        f.create_flow(&flow("a", 2, 9, 1, 1)).unwrap();
        f.remove_queue_from_qos(&id("s1"), 2, q).unwrap();
        assert!(matches!(
            f.delete_queue(&id("s1"), q),
            Err(FabricError::QueueInUse { .. })
        ));
        assert_eq!(f.delete_flow(&id("s1"), 1), Ok(1));
        f.delete_queue(&id("s1"), q).unwrap();
        assert!(matches!(
            f.create_queue(&queue(9, 1, 10)),
            Err(FabricError::UnknownPort(..))
        ));
        assert!(matches!(
            f.delete_queue(&id("nope"), q),
            Err(FabricError::UnknownSwitch(..))
        ));
    }

    #[test]
    fn qos_lifecycle() {
        let mut f = SimFabric::new(ByteCosts::default());
        f.add_switch(id("s1"), [1, 2]);
        f.create_qos(&id("s1"), 5).unwrap();
        assert!(f.create_qos(&id("s1"), 5).is_err());
        f.create_queue(&queue(1, 1, 10)).unwrap();
        let q = QueueRef { port: 1, queue_id: 1 };
        assert!(matches!(
            f.place_queue_on_qos(&id("s1"), 5, q),
            Err(FabricError::QosPortMismatch { .. })
        ));
        f.place_qos_on_port(&id("s1"), 5, 1).unwrap();
        f.place_queue_on_qos(&id("s1"), 5, q).unwrap();
        assert!(f.remove_qos_from_port(&id("s1"), 1).is_err());
        assert!(f.delete_qos(&id("s1"), 5).is_err());
        f.remove_queue_from_qos(&id("s1"), 5, q).unwrap();
        f.remove_qos_from_port(&id("s1"), 1).unwrap();
        f.delete_qos(&id("s1"), 5).unwrap();
        assert!(f.state().switches[&id("s1")].qos.is_empty());
    }

    #[test]
    fn flow_requires_enqueue_target() {
        let mut f = fabric();
        assert!(matches!(
            f.create_flow(&flow("a", 2, 4, 1, 1)),
            Err(FabricError::UnknownQueue { .. })
        ));
        let mut bad = flow("a", 2, 4, 1, 1);
        bad.actions[1] = FlowAction::Enqueue { port: 3, queue_id: 4 };
        assert!(matches!(f.create_flow(&bad), Err(FabricError::MalformedFlow(..))));
    }

    #[test]
    fn classify_direct_and_miss() {
        let mut f = fabric();
        f.create_queue(&queue(2, 4, 10)).unwrap();
        f.create_flow(&flow("10.0.0.1", 2, 4, 1, 1)).unwrap();
        assert_eq!(
            f.classify(&id("s1"), &header("10.0.0.1")),
            Verdict::Forward {
                port: 2,
                queue: Some(QueueRef { port: 2, queue_id: 4 })
            }
        );
        assert_eq!(f.classify(&id("s1"), &header("10.0.0.2")), Verdict::Drop);
        assert_eq!(f.classify(&id("nope"), &header("10.0.0.1")), Verdict::Drop);
    }

    #[test]
    fn source_address_demultiplexes_shared_port() {
        let mut f = fabric();
        f.create_queue(&queue(2, 4, 10)).unwrap();
        f.create_queue(&queue(2, 5, 10)).unwrap();
        f.create_flow(&flow("10.0.0.1", 2, 4, 1, 1)).unwrap();
        f.create_flow(&flow("10.0.0.2", 2, 5, 1, 2)).unwrap();
        let q = |src| match f.classify(&id("s1"), &header(src)) {
            Verdict::Forward { queue, .. } => queue.unwrap().queue_id,
            Verdict::Drop => panic!("dropped"),
        };
        assert_eq!((q("10.0.0.1"), q("10.0.0.2")), (4, 5));
    }

    #[test]
    fn overlapping_flows_priority_then_cookie() {
        // Exhaustive over small priority/cookie pairs.
        for (pa, pb) in [(1u16, 1u16), (1, 2), (2, 1)] {
            for (ca, cb) in [(1u64, 2u64), (2, 1)] {
                let mut f = fabric();
                f.create_queue(&queue(2, 4, 10)).unwrap();
                f.create_queue(&queue(3, 5, 10)).unwrap();
                f.create_flow(&flow("a", 2, 4, pa, ca)).unwrap();
                f.create_flow(&flow("a", 3, 5, pb, cb)).unwrap();
                let a_wins = pa > pb || (pa == pb && ca < cb);
                let expect = if a_wins { 2 } else { 3 };
                match f.classify(&id("s1"), &header("a")) {
                    Verdict::Forward { port, .. } => assert_eq!(port, expect, "{pa} {pb} {ca} {cb}"),
                    Verdict::Drop => panic!("dropped"),
                }
            }
        }
    }

    #[test]
    fn delete_by_cookie_leaves_other_reservations() {
        let mut f = fabric();
        for cookie in 1..=5u64 {
            f.create_queue(&queue(2, cookie as u32, 10)).unwrap();
            f.create_flow(&flow(&format!("10.0.0.{cookie}"), 2, cookie as u32, 1, cookie))
                .unwrap();
            f.create_flow(&flow(&format!("10.0.1.{cookie}"), 2, cookie as u32, 1, cookie))
                .unwrap();
        }
        assert_eq!(f.delete_flow(&id("s1"), 3), Ok(2));
        assert_eq!(f.state().flows_with_cookie(3), 0);
        assert_eq!(f.state().switches[&id("s1")].flows.len(), 8);
        assert_eq!(f.delete_flow(&id("s1"), 3), Ok(0));
    }

    #[test]
    fn containers() {
        let mut f = fabric();
        let before = f.dump();
        let spec = ContainerSpec {
            fog: id("fog:1"),
            image: "iperf".into(),
            cpu: Millicores::from_cores(1.25),
            memory: 512 << 20,
            port: 5201,
        };
        let svc = f.start_container(&spec).unwrap();
        let c = &f.state().fogs[&id("fog:1")].containers[&svc];
        assert_eq!((c.cpu, c.memory, c.port), (Millicores(1250), 512 << 20, 5201));
        assert_eq!(f.start_container(&spec), Err(FabricError::PortInUse(id("fog:1"), 5201)));
        let big = ContainerSpec {
            port: 6000,
            cpu: Millicores(3000),
            ..spec.clone()
        };
        assert_eq!(
            f.start_container(&big),
            Err(FabricError::InsufficientHeadroom(id("fog:1")))
        );
        f.stop_container(&svc).unwrap();
        assert_eq!(f.dump(), before);
        assert_eq!(f.stop_container(&svc), Err(FabricError::UnknownService(svc)));
    }

    #[test]
    fn dump_is_json() {
        let mut f = fabric();
        f.create_queue(&queue(2, 4, 10)).unwrap();
        f.create_flow(&flow("a", 2, 4, 1, 1)).unwrap();
        let json = f.dump().to_json();
        let back: FabricState = serde_json::from_str(&json).unwrap();
        assert_eq!(back, f.dump());
        back.check_invariants().unwrap();
    }

    #[test]
    fn fault_injector_fails_once() {
        let mut f = FaultInjector::new(fabric(), Some(1));
        f.create_queue(&queue(2, 1, 10)).unwrap();
        assert_eq!(f.create_queue(&queue(2, 2, 10)), Err(FabricError::Injected(1)));
        f.create_queue(&queue(2, 2, 10)).unwrap();
        assert_eq!(f.calls(), 3);
    }
}
