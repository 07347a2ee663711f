//! Controller runtime.
//!
//! [`Orchestrator`] owns the topology, the backend, the proxy-port pool and
//! the reservation table. Allocation, deallocation and every other mutation
//! run one at a time under a FIFO ticket lock. A read-only copy of the
//! topology is republished after each mutation for lock-free readers.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, RwLock};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{
    read_message, write_message, FailureReason, Greeting, Message, ProtocolError, ResourceReport, ResponseStatus,
    ServiceId, ServiceRequest, ServiceResponse, ShutdownRequest, ShutdownResponse, ShutdownResult, StreamError,
};
use crate::raa::{self, AllocationPlan, PortPool, ProxyPorts, Reservation, ReservationState, ResourceRequest};
use crate::southbound::{Backend, FabricError, QueueRef};
use crate::topology::{
    Bps, ChangeSet, Millicores, NodeId, NodeKind, Telemetry, Topology, TopologyError, TopologySnapshot,
    DEFAULT_CONTROL_BW,
};
use crate::Cost;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("{0} has not registered as an end-device")]
    Unregistered(NodeId),
    #[error("request names {claimed} but arrived from {sender}")]
    SenderMismatch { sender: NodeId, claimed: NodeId },
    #[error("{0} has not registered as a fog-device")]
    UnknownFog(NodeId),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("configuration: {0}")]
    Config(String),
}

/// Runtime configuration, loadable from a JSON document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrchestratorConfig {
    /// Bandwidth reserved for controller traffic on every link.
    pub control_bw: Bps,
    /// Inclusive proxy-port range handed out per fog-device.
    pub port_range: (u16, u16),
    pub greeting_addr: String,
    pub service_addr: String,
    pub shutdown_addr: String,
    pub refresh_period_ms: u64,
    pub topology: Option<PathBuf>,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        OrchestratorConfig {
            control_bw: DEFAULT_CONTROL_BW,
            port_range: (49152, 65535),
            greeting_addr: "127.0.0.1:7001".into(),
            service_addr: "127.0.0.1:7002".into(),
            shutdown_addr: "127.0.0.1:7003".into(),
            refresh_period_ms: 1000,
            topology: None,
        }
    }
}

impl OrchestratorConfig {
    pub fn from_json(text: &str) -> Result<Self, OrchestratorError> {
        let cfg: OrchestratorConfig =
            serde_json::from_str(text).map_err(|e| OrchestratorError::Config(e.to_string()))?;
        if cfg.port_range.0 > cfg.port_range.1 {
            return Err(OrchestratorError::Config("port range is empty".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn refresh_period(&self) -> Duration {
        Duration::from_millis(self.refresh_period_ms)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LockEvent {
    Acquired,
    Released,
}

/// One entry of the lock trace. `seq` is global and strictly increasing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub ticket: u64,
    pub event: LockEvent,
    pub label: String,
}

/// Mutual exclusion granted strictly in arrival order.
#[derive(Debug, Default)]
struct TicketLock {
    next: AtomicU64,
    serving: Mutex<u64>,
    turn: Condvar,
}

impl TicketLock {
    fn acquire(&self) -> u64 {
        let ticket = self.next.fetch_add(1, Ordering::SeqCst);
        let mut serving = self.serving.lock().expect("ticket lock poisoned");
        while *serving != ticket {
            serving = self.turn.wait(serving).expect("ticket lock poisoned");
        }
        ticket
    }

    fn release(&self) {
        *self.serving.lock().expect("ticket lock poisoned") += 1;
        self.turn.notify_all();
    }
}

struct State<B> {
    topology: Topology,
    backend: B,
    ports: PortPool,
    reservations: BTreeMap<ServiceId, Reservation>,
    next_cookie: u64,
}

/// Exclusive access to the runtime state, released in ticket order.
pub struct Session<'a, B: Backend> {
    orch: &'a Orchestrator<B>,
    ticket: u64,
    label: String,
    state: Option<MutexGuard<'a, State<B>>>,
}

impl<B: Backend> Drop for Session<'_, B> {
    fn drop(&mut self) {
        if let Some(state) = self.state.take() {
            *self.orch.published.write().expect("snapshot lock poisoned") = Arc::new(state.topology.clone());
            drop(state);
        }
        self.orch.record(self.ticket, LockEvent::Released, &self.label);
        self.orch.lock.release();
    }
}

impl<B: Backend> Session<'_, B> {
    fn st(&mut self) -> &mut State<B> {
        self.state.as_mut().expect("live session")
    }
}

/// Result of a served request with timing of the allocation step.
#[derive(Clone, Debug)]
pub struct RequestOutcome {
    pub response: ServiceResponse,
    pub plan: Option<AllocationPlan>,
    /// Time spent in the allocation algorithm proper.
    pub raa_time: Duration,
    pub ticket: u64,
}

#[derive(Clone, Debug, Default)]
pub struct RefreshOutcome {
    pub changes: ChangeSet,
    /// Reservations torn down because their path or fog changed underneath.
    pub evicted: Vec<ServiceId>,
}

/// Allocated amounts of every link and fog, for exact comparisons.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LedgerView {
    pub links: BTreeMap<(NodeId, NodeId), Bps>,
    pub fogs: BTreeMap<NodeId, (Millicores, u64)>,
}

impl LedgerView {
    pub fn of(t: &Topology) -> Self {
        LedgerView {
            links: t
                .links()
                .map(|l| ((l.src.clone(), l.dst.clone()), l.alloc_bw))
                .collect(),
            fogs: t
                .nodes()
                .filter_map(|n| n.compute.map(|c| (n.id.clone(), (c.alloc_processing, c.alloc_memory))))
                .collect(),
        }
    }

    /// Control reservation plus the sum of the given live plans.
    pub fn expected<'a>(t: &Topology, plans: impl IntoIterator<Item = &'a AllocationPlan>) -> Self {
        let mut v = LedgerView {
            links: t
                .links()
                .map(|l| ((l.src.clone(), l.dst.clone()), t.control_bw()))
                .collect(),
            fogs: t
                .nodes()
                .filter_map(|n| n.compute.map(|_| (n.id.clone(), (Millicores(0), 0))))
                .collect(),
        };
        for p in plans {
            for h in &p.path {
                for key in [(h.src.clone(), h.dst.clone()), (h.dst.clone(), h.src.clone())] {
                    *v.links.entry(key).or_default() += p.request.bw;
                }
            }
            let f = v.fogs.entry(p.fog.clone()).or_default();
            f.0 .0 += p.request.processing.0;
            f.1 += p.request.memory;
        }
        v
    }
}

pub struct Orchestrator<B: Backend> {
    lock: TicketLock,
    state: Mutex<State<B>>,
    published: RwLock<Arc<Topology>>,
    trace: Mutex<Vec<TraceEvent>>,
    seq: AtomicU64,
}

impl<B: Backend> Orchestrator<B> {
    /// Takes ownership of a topology whose control reservation is already
    /// charged, teaches the backend about it and creates one QoS entry per
    /// switch port.
    pub fn new(topology: Topology, mut backend: B, config: &OrchestratorConfig) -> Result<Self, OrchestratorError> {
        backend.observe_topology(&topology);
        ensure_qos(&mut backend)?;
        Ok(Orchestrator {
            lock: TicketLock::default(),
            published: RwLock::new(Arc::new(topology.clone())),
            state: Mutex::new(State {
                topology,
                backend,
                ports: PortPool::new(config.port_range.0, config.port_range.1),
                reservations: BTreeMap::new(),
                next_cookie: 1,
            }),
            trace: Mutex::new(Vec::new()),
            seq: AtomicU64::new(0),
        })
    }

    fn record(&self, ticket: u64, event: LockEvent, label: &str) {
        let mut trace = self.trace.lock().expect("trace lock poisoned");
        let seq = self.seq.fetch_add(1, Ordering::SeqCst);
        trace.push(TraceEvent {
            seq,
            ticket,
            event,
            label: label.to_string(),
        });
    }

    /// Waits for the global lock. Everything done through the session is
    /// serialized with every other session in arrival order.
    pub fn session(&self, label: impl Into<String>) -> Session<'_, B> {
        let label = label.into();
        let ticket = self.lock.acquire();
        self.record(ticket, LockEvent::Acquired, &label);
        Session {
            orch: self,
            ticket,
            label,
            state: Some(self.state.lock().expect("state lock poisoned")),
        }
    }

    /// Point-in-time copy of the topology as of the last mutation.
    pub fn snapshot(&self) -> Arc<Topology> {
        self.published.read().expect("snapshot lock poisoned").clone()
    }

    pub fn trace(&self) -> Vec<TraceEvent> {
        self.trace.lock().expect("trace lock poisoned").clone()
    }

    pub fn reservations(&self) -> Vec<Reservation> {
        self.session("inspect").st().reservations.values().cloned().collect()
    }

    pub fn with_backend<R>(&self, f: impl FnOnce(&B) -> R) -> R {
        f(&self.session("inspect").st().backend)
    }

    /// Direct mutable access to the backend, e.g. to arm a fault injector.
    pub fn with_backend_mut<R>(&self, f: impl FnOnce(&mut B) -> R) -> R {
        f(&mut self.session("admin").st().backend)
    }

    /// Direct mutable access to the ledgers, bypassing every check. Meant
    /// for audits and corruption drills.
    pub fn with_topology_mut<R>(&self, f: impl FnOnce(&mut Topology) -> R) -> R {
        f(&mut self.session("admin").st().topology)
    }

    pub fn register_greeting(&self, g: &Greeting) -> Result<(), OrchestratorError> {
        Message::from(g.clone()).validate()?;
        let mut s = self.session(format!("greeting {}", g.node_id));
        let st = s.st();
        let before = st.topology.revision();
        st.topology.register_greeting(g)?;
        if st.topology.revision() != before {
            st.backend.observe_topology(&st.topology);
            ensure_qos(&mut st.backend)?;
        }
        Ok(())
    }

    pub fn service_fog_device(&self, report: &ResourceReport) -> Result<(), OrchestratorError> {
        Message::from(report.clone()).validate()?;
        let mut s = self.session(format!("report {}", report.fog_id));
        let t = &mut s.st().topology;
        if t.kind(&report.fog_id) != Some(NodeKind::FogDevice) {
            return Err(OrchestratorError::UnknownFog(report.fog_id.clone()));
        }
        t.set_telemetry(
            &report.fog_id,
            Telemetry {
                processor_utilization: report.processor_utilization,
                memory_utilization: report.memory_utilization,
                timestamp_ms: report.timestamp_ms,
            },
        )?;
        Ok(())
    }

    pub fn service_end_device(
        &self,
        req: &ServiceRequest,
        from: &NodeId,
    ) -> Result<ServiceResponse, OrchestratorError> {
        self.service_end_device_detailed(req, from).map(|o| o.response)
    }

    /// Serves one request end to end: allocation, then queues, QoS
    /// placement, flows and the container. A failing step rolls back
    /// everything before it and the reply carries the failure.
    pub fn service_end_device_detailed(
        &self,
        req: &ServiceRequest,
        from: &NodeId,
    ) -> Result<RequestOutcome, OrchestratorError> {
        if &req.node_id != from {
            return Err(OrchestratorError::SenderMismatch {
                sender: from.clone(),
                claimed: req.node_id.clone(),
            });
        }
        let mut s = self.session(format!("request {}", req.request_id));
        let ticket = s.ticket;
        let st = s.st();
        if st.topology.kind(from) != Some(NodeKind::EndDevice) {
            return Err(OrchestratorError::Unregistered(from.clone()));
        }
        let fail = |reason: FailureReason, raa_time| RequestOutcome {
            response: ServiceResponse {
                request_id: req.request_id.clone(),
                status: ResponseStatus::Failure { reason },
            },
            plan: None,
            raa_time,
            ticket,
        };
        if let Err(e) = Message::from(req.clone()).validate() {
            return Ok(fail(FailureReason::Rejected { detail: e.to_string() }, Duration::ZERO));
        }

        let r = ResourceRequest::from(req);
        let cookie = st.next_cookie;
        let started = Instant::now();
        let allocated = raa::allocate::<Cost>(&mut st.topology, &r, cookie, &mut st.ports);
        let raa_time = started.elapsed();
        let plan = match allocated {
            Ok(plan) => plan,
            Err(e) => return Ok(fail(e.reason(), raa_time)),
        };
        st.next_cookie += 1;

        match apply_plan(&mut st.backend, &plan) {
            Ok(service_id) => {
                let fog_address = st
                    .topology
                    .node(&plan.fog)
                    .map(|n| n.flow_address())
                    .unwrap_or_else(|| plan.fog.to_string());
                st.reservations.insert(
                    service_id.clone(),
                    Reservation {
                        service_id: service_id.clone(),
                        plan: plan.clone(),
                        state: ReservationState::Live,
                    },
                );
                Ok(RequestOutcome {
                    response: ServiceResponse {
                        request_id: req.request_id.clone(),
                        status: ResponseStatus::Success {
                            fog_address,
                            proxy_port: plan.proxy_port,
                            service_id,
                        },
                    },
                    plan: Some(plan),
                    raa_time,
                    ticket,
                })
            }
            Err(e) => {
                st.ports.release(&plan.fog, plan.proxy_port);
                raa::release(&mut st.topology, &plan)?;
                Ok(fail(FailureReason::Enforcement { detail: e.to_string() }, raa_time))
            }
        }
    }

    pub fn service_shutdown_request(&self, req: &ShutdownRequest) -> ShutdownResponse {
        let mut s = self.session(format!("shutdown {}", req.service_id));
        let st = s.st();
        let result = match st.reservations.remove(&req.service_id) {
            None => ShutdownResult::UnknownService,
            Some(mut res) => {
                if let Err(e) = raa::deallocate(&mut st.topology, &mut st.backend, &mut st.ports, &mut res) {
                    log::warn!("shutdown of {}: {e}", req.service_id);
                }
                ShutdownResult::Ok
            }
        };
        ShutdownResponse {
            service_id: req.service_id.clone(),
            result,
        }
    }

    /// Applies an observed snapshot. Reservations whose path or fog the
    /// snapshot removes or shrinks below their allocation are torn down
    /// first.
    pub fn refresh(&self, observed: &TopologySnapshot) -> Result<RefreshOutcome, OrchestratorError> {
        let mut s = self.session("refresh");
        let st = s.st();
        let victims = affected_reservations(&st.topology, observed, st.reservations.values());
        let mut evicted = Vec::new();
        for id in victims {
            let mut res = st.reservations.remove(&id).expect("listed");
            if let Err(e) = raa::deallocate(&mut st.topology, &mut st.backend, &mut st.ports, &mut res) {
                log::warn!("eviction of {id}: {e}");
            }
            evicted.push(id);
        }
        let changes = st.topology.update_topology(observed)?;
        if !changes.is_empty() {
            st.backend.observe_topology(&st.topology);
            ensure_qos(&mut st.backend)?;
        }
        Ok(RefreshOutcome { changes, evicted })
    }

    /// Checks that every ledger equals the control reservation plus the sum
    /// of live reservations, and that the backend holds exactly the live
    /// reservations' queues, flows and containers.
    pub fn reconcile(&self) -> Result<(), String> {
        let mut s = self.session("audit");
        let st = s.st();
        st.topology.check_invariants().map_err(|e| e.to_string())?;
        let plans: Vec<&AllocationPlan> = st.reservations.values().map(|r| &r.plan).collect();
        let expected = LedgerView::expected(&st.topology, plans.iter().copied());
        let actual = LedgerView::of(&st.topology);
        if expected != actual {
            let link = expected
                .links
                .iter()
                .find(|(k, v)| actual.links.get(*k) != Some(v))
                .map(|((a, b), v)| {
                    format!(
                        "link {a}->{b}: expected {v} bps, found {:?}",
                        actual.links.get(&(a.clone(), b.clone()))
                    )
                });
            let fog = expected
                .fogs
                .iter()
                .find(|(k, v)| actual.fogs.get(*k) != Some(v))
                .map(|(f, v)| format!("fog {f}: expected {v:?}, found {:?}", actual.fogs.get(f)));
            return Err(link.or(fog).unwrap_or_else(|| "ledger key sets differ".into()));
        }

        let fabric = st.backend.dump();
        fabric.check_invariants()?;
        let live: BTreeSet<u64> = plans.iter().map(|p| p.cookie).collect();
        for p in &plans {
            let h = p.switches.len();
            let flows = fabric.flows_with_cookie(p.cookie);
            if flows != 2 * h {
                return Err(format!("cookie {} has {flows} flows, expected {}", p.cookie, 2 * h));
            }
            for sc in &p.switches {
                for q in &sc.queues {
                    let present = fabric
                        .switches
                        .get(&sc.switch)
                        .and_then(|sw| sw.queue_rate(q.queue_ref()));
                    if present != Some(q.rate_limit) {
                        return Err(format!(
                            "queue {:?} on {} missing or wrong rate",
                            q.queue_ref(),
                            sc.switch
                        ));
                    }
                }
            }
        }
        let queues: usize = fabric.switches.values().map(|s| s.queue_count()).sum();
        let expected_queues: usize = plans.iter().map(|p| p.queue_count()).sum();
        if queues != expected_queues {
            return Err(format!(
                "{queues} queues installed, live reservations own {expected_queues}"
            ));
        }
        for sw in fabric.switches.values() {
            if let Some(f) = sw.flows.iter().find(|f| !live.contains(&f.cookie)) {
                return Err(format!("orphan flow with cookie {} on {}", f.cookie, f.switch));
            }
        }
        let containers: BTreeSet<&ServiceId> = fabric.fogs.values().flat_map(|f| f.containers.keys()).collect();
        let services: BTreeSet<&ServiceId> = st.reservations.keys().collect();
        if containers != services {
            return Err(format!(
                "{} containers running for {} live services",
                containers.len(),
                services.len()
            ));
        }
        for p in &plans {
            if !st.ports.is_used(&p.fog, p.proxy_port) {
                return Err(format!(
                    "port {} on {} is free but held by cookie {}",
                    p.proxy_port, p.fog, p.cookie
                ));
            }
        }
        Ok(())
    }

    /// Starts the three stream servers. Each connection carries a sequence
    /// of framed messages.
    pub fn serve(self: &Arc<Self>, config: &OrchestratorConfig) -> Result<ServerHandle, OrchestratorError>
    where
        B: 'static,
    {
        let stop = Arc::new(AtomicBool::new(false));
        let mut addrs = Vec::new();
        let mut threads = Vec::new();
        for (addr, endpoint) in [
            (&config.greeting_addr, Endpoint::Greeting),
            (&config.service_addr, Endpoint::Service),
            (&config.shutdown_addr, Endpoint::Shutdown),
        ] {
            let listener = TcpListener::bind(addr)?;
            addrs.push(listener.local_addr()?);
            let orch = Arc::clone(self);
            let stop = Arc::clone(&stop);
            threads.push(thread::spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let orch = Arc::clone(&orch);
                    thread::spawn(move || {
                        if let Err(e) = orch.handle_connection(stream, endpoint) {
                            log::debug!("connection closed: {e}");
                        }
                    });
                }
            }));
        }
        Ok(ServerHandle {
            greeting: addrs[0],
            service: addrs[1],
            shutdown: addrs[2],
            stop,
            threads,
        })
    }

    fn handle_connection(&self, mut stream: TcpStream, endpoint: Endpoint) -> Result<(), StreamError> {
        while let Some(msg) = read_message(&mut stream)? {
            let reply: Option<Message> = match (endpoint, msg) {
                (Endpoint::Greeting, Message::Greeting(g)) => {
                    if let Err(e) = self.register_greeting(&g) {
                        log::warn!("greeting from {}: {e}", g.node_id);
                    }
                    None
                }
                (Endpoint::Greeting, Message::ResourceReport(r)) => {
                    if let Err(e) = self.service_fog_device(&r) {
                        log::warn!("report from {}: {e}", r.fog_id);
                    }
                    None
                }
                (Endpoint::Service, Message::ServiceRequest(r)) => {
                    let response = self
                        .service_end_device(&r, &r.node_id)
                        .unwrap_or_else(|e| ServiceResponse {
                            request_id: r.request_id.clone(),
                            status: ResponseStatus::Failure {
                                reason: FailureReason::Rejected { detail: e.to_string() },
                            },
                        });
                    Some(response.into())
                }
                (Endpoint::Shutdown, Message::ShutdownRequest(r)) => Some(self.service_shutdown_request(&r).into()),
                (_, other) => {
                    return Err(ProtocolError::Invalid(format!(
                        "{} is not accepted on this endpoint",
                        other.type_name()
                    ))
                    .into())
                }
            };
            if let Some(reply) = reply {
                write_message(&mut stream, &reply)?;
            }
        }
        Ok(())
    }

    /// Polls `source` every `period` and applies each snapshot.
    pub fn spawn_refresher(self: &Arc<Self>, mut source: Box<dyn TopologySource>, period: Duration) -> RefresherHandle
    where
        B: 'static,
    {
        let stop = Arc::new(AtomicBool::new(false));
        let orch = Arc::clone(self);
        let flag = Arc::clone(&stop);
        let thread = thread::spawn(move || {
            while !flag.load(Ordering::SeqCst) {
                match source.poll() {
                    Ok(snapshot) => {
                        if let Err(e) = orch.refresh(&snapshot) {
                            log::warn!("topology refresh rejected: {e}");
                        }
                    }
                    Err(e) => log::warn!("topology poll failed: {e}"),
                }
                let until = Instant::now() + period;
                while Instant::now() < until && !flag.load(Ordering::SeqCst) {
                    thread::sleep(period.min(Duration::from_millis(20)));
                }
            }
        });
        RefresherHandle { stop, thread }
    }
}

#[derive(Clone, Copy, Debug)]
enum Endpoint {
    Greeting,
    Service,
    Shutdown,
}

pub struct ServerHandle {
    pub greeting: SocketAddr,
    pub service: SocketAddr,
    pub shutdown: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    /// Stops accepting connections and joins the listener threads.
    pub fn shutdown(self) {
        self.stop.store(true, Ordering::SeqCst);
        for addr in [self.greeting, self.service, self.shutdown] {
            let _ = TcpStream::connect(addr);
        }
        for t in self.threads {
            let _ = t.join();
        }
    }
}

pub struct RefresherHandle {
    stop: Arc<AtomicBool>,
    thread: JoinHandle<()>,
}

impl RefresherHandle {
    pub fn stop(self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = self.thread.join();
    }
}

/// Where periodic topology snapshots come from.
pub trait TopologySource: Send {
    fn poll(&mut self) -> Result<TopologySnapshot, String>;
}

/// Re-reads a topology file on every poll.
pub struct FileSource(pub PathBuf);

impl TopologySource for FileSource {
    fn poll(&mut self) -> Result<TopologySnapshot, String> {
        let text = std::fs::read_to_string(&self.0).map_err(|e| e.to_string())?;
        TopologySnapshot::from_json(&text).map_err(|e| e.to_string())
    }
}

/// Creates QoS entry `p` on every switch port `p` that lacks one.
pub fn ensure_qos(backend: &mut dyn Backend) -> Result<(), FabricError> {
    for (sw, state) in backend.dump().switches {
        for port in &state.ports {
            if state.port_qos.contains_key(port) {
                continue;
            }
            if !state.qos.contains_key(port) {
                backend.create_qos(&sw, *port)?;
            }
            backend.place_qos_on_port(&sw, *port, *port)?;
        }
    }
    Ok(())
}

enum Undo {
    Queue(NodeId, QueueRef),
    Placement(NodeId, QueueRef),
    Flows(NodeId, u64),
}

/// Installs a plan; on failure removes whatever was installed, newest first.
pub fn apply_plan(backend: &mut dyn Backend, plan: &AllocationPlan) -> Result<ServiceId, FabricError> {
    let mut undo = Vec::new();
    let result = (|| {
        for sc in &plan.switches {
            for q in &sc.queues {
                backend.create_queue(q)?;
                undo.push(Undo::Queue(sc.switch.clone(), q.queue_ref()));
            }
        }
        for sc in &plan.switches {
            for q in &sc.queues {
                backend.place_queue_on_qos(&sc.switch, q.port, q.queue_ref())?;
                undo.push(Undo::Placement(sc.switch.clone(), q.queue_ref()));
            }
        }
        for sc in &plan.switches {
            undo.push(Undo::Flows(sc.switch.clone(), plan.cookie));
            for f in &sc.flows {
                backend.create_flow(f)?;
            }
        }
        backend.start_container(&plan.container())
    })();
    if result.is_err() {
        for step in undo.into_iter().rev() {
            let r = match step {
                Undo::Queue(sw, q) => backend.delete_queue(&sw, q),
                Undo::Placement(sw, q) => backend.remove_queue_from_qos(&sw, q.port, q),
                Undo::Flows(sw, cookie) => backend.delete_flow(&sw, cookie).map(|_| ()),
            };
            if let Err(e) = r {
                log::warn!("rollback step failed: {e}");
            }
        }
    }
    result
}

fn affected_reservations<'a>(
    t: &Topology,
    observed: &TopologySnapshot,
    live: impl Iterator<Item = &'a Reservation>,
) -> Vec<ServiceId> {
    let links = observed.directed_links();
    let nodes: BTreeMap<&NodeId, _> = observed.nodes.iter().map(|n| (&n.id, n)).collect();
    let shrunk = |a: &NodeId, b: &NodeId| match (links.get(&(a.clone(), b.clone())), t.link(a, b)) {
        (None, _) => true,
        (Some(decl), Some(l)) => decl.total_bw < l.alloc_bw,
        (Some(_), None) => false,
    };
    let fog_gone = |f: &NodeId| match nodes.get(f) {
        None => true,
        Some(decl) => {
            let kind_ok = matches!(decl.kind, NodeKind::FogDevice | NodeKind::Unknown);
            let cap_ok = match (decl.capacity(), t.node(f).and_then(|n| n.compute)) {
                (Some((p, m)), Some(c)) => p >= c.alloc_processing && m >= c.alloc_memory,
                _ => true,
            };
            !kind_ok || !cap_ok
        }
    };
    live.filter(|r| {
        fog_gone(&r.plan.fog)
            || r.plan
                .path
                .iter()
                .any(|h| shrunk(&h.src, &h.dst) || shrunk(&h.dst, &h.src))
    })
    .map(|r| r.service_id.clone())
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::Transport;
    use crate::southbound::{ByteCosts, FaultInjector, SimFabric};
    use crate::topology::{LinkDecl, NodeDecl};

    const MBPS: u64 = 1_000_000;
    const GIB: u64 = 1 << 30;

    fn id(s: &str) -> NodeId {
        NodeId::new(s).unwrap()
    }

    /// end:1 - s1 - s2 - fog:1, with fog:2 hanging off s1.
    fn snapshot() -> TopologySnapshot {
        let node = |n: &str, k| NodeDecl::new(id(n), k);
        let fog = |n: &str| NodeDecl {
            total_processing: Some(4.0),
            total_memory: Some(8 * GIB),
            address: Some(format!("10.0.1.{}", &n[4..])),
            ..node(n, NodeKind::FogDevice)
        };
        let link = |a: &str, pa, b: &str, pb, mbps: u64| LinkDecl {
            src: id(a),
            dst: id(b),
            src_port: pa,
            dst_port: pb,
            total_bw: mbps * MBPS,
        };
        TopologySnapshot {
            nodes: vec![
                NodeDecl {
                    address: Some("10.0.0.1".into()),
                    ..node("end:1", NodeKind::EndDevice)
                },
                node("s1", NodeKind::Switch),
                node("s2", NodeKind::Switch),
                fog("fog:1"),
                fog("fog:2"),
            ],
            links: vec![
                link("end:1", 1, "s1", 1, 1000),
                link("s1", 2, "s2", 1, 1000),
                link("s2", 2, "fog:1", 1, 1000),
                link("s1", 3, "fog:2", 1, 200),
            ],
            duplex: true,
        }
    }

    fn orch_with<B: Backend>(backend: impl FnOnce(&Topology) -> B) -> Orchestrator<B> {
        let t = Topology::from_snapshot(&snapshot(), DEFAULT_CONTROL_BW).unwrap();
        let b = backend(&t);
        Orchestrator::new(t, b, &OrchestratorConfig::default()).unwrap()
    }

    fn orch() -> Orchestrator<SimFabric> {
        orch_with(|_| SimFabric::new(ByteCosts::default()))
    }

    fn request(n: u32, bw_mbps: u64) -> ServiceRequest {
        ServiceRequest {
            request_id: format!("r{n}"),
            node_id: id("end:1"),
            image: "iperf".into(),
            bw: bw_mbps * MBPS,
            processing: 0.5,
            memory: GIB / 4,
            desired_port: None,
            transport: Transport::Tcp,
        }
    }

    fn success(r: &ServiceResponse) -> (String, u16, ServiceId) {
        match &r.status {
            ResponseStatus::Success {
                fog_address,
                proxy_port,
                service_id,
            } => (fog_address.clone(), *proxy_port, service_id.clone()),
            other => panic!("expected success, got {other:?}"),
        }
    }

    #[test]
    fn startup_creates_qos_per_port() {
        let o = orch();
        let dump = o.with_backend(|b| b.dump());
        assert_eq!(dump.switches[&id("s1")].port_qos.len(), 3);
        assert_eq!(dump.switches[&id("s2")].port_qos.len(), 2);
        o.reconcile().unwrap();
    }

    #[test]
    fn happy_path_and_shutdown() {
        let o = orch();
        let before = LedgerView::of(&o.snapshot());
        let r = o.service_end_device(&request(1, 100), &id("end:1")).unwrap();
        let (addr, port, svc) = success(&r);
        assert_eq!((addr.as_str(), port), ("10.0.1.1", 49152));
        o.reconcile().unwrap();
        let r2 = o.service_end_device(&request(2, 100), &id("end:1")).unwrap();
        assert_eq!(success(&r2).1, 49153);
        assert_eq!(
            o.service_shutdown_request(&ShutdownRequest {
                service_id: svc.clone()
            })
            .result,
            ShutdownResult::Ok
        );
        assert_eq!(
            o.service_shutdown_request(&ShutdownRequest { service_id: svc }).result,
            ShutdownResult::UnknownService
        );
        o.service_shutdown_request(&ShutdownRequest {
            service_id: success(&r2).2,
        });
        assert_eq!(LedgerView::of(&o.snapshot()), before);
        o.reconcile().unwrap();
    }

    #[test]
    fn failures() {
        let o = orch();
        let mut r = request(1, 100);
        r.memory = 64 * GIB;
        let resp = o.service_end_device(&r, &id("end:1")).unwrap();
        assert_eq!(
            resp.status,
            ResponseStatus::Failure {
                reason: FailureReason::NoServicer
            }
        );
        let resp = o.service_end_device(&request(2, 5000), &id("end:1")).unwrap();
        assert_eq!(
            resp.status,
            ResponseStatus::Failure {
                reason: FailureReason::NoPath
            }
        );
        let mut r = request(3, 10);
        r.node_id = id("s1");
        assert!(matches!(
            o.service_end_device(&r, &id("s1")),
            Err(OrchestratorError::Unregistered(_))
        ));
        assert!(matches!(
            o.service_end_device(&request(4, 10), &id("end:2")),
            Err(OrchestratorError::SenderMismatch { .. })
        ));
        let mut r = request(5, 10);
        r.desired_port = Some(5201);
        success(&o.service_end_device(&r, &id("end:1")).unwrap());
        let resp = o.service_end_device(&r, &id("end:1")).unwrap();
        assert_eq!(
            resp.status,
            ResponseStatus::Failure {
                reason: FailureReason::PortBusy { port: 5201 }
            }
        );
        o.reconcile().unwrap();
    }

    #[test]
    fn reports_do_not_touch_ledgers() {
        let o = orch();
        let before = LedgerView::of(&o.snapshot());
        let report = |p| ResourceReport {
            fog_id: id("fog:1"),
            processor_utilization: p,
            memory_utilization: 0.6,
            timestamp_ms: 1,
        };
        o.service_fog_device(&report(0.4)).unwrap();
        assert_eq!(LedgerView::of(&o.snapshot()), before);
        let tele = o.snapshot().node(&id("fog:1")).unwrap().telemetry.unwrap();
        assert_eq!(tele.processor_utilization, 0.4);
        assert!(matches!(
            o.service_fog_device(&report(1.3)),
            Err(OrchestratorError::Protocol(_))
        ));
        let mut stray = report(0.1);
        stray.fog_id = id("s1");
        assert!(matches!(
            o.service_fog_device(&stray),
            Err(OrchestratorError::UnknownFog(_))
        ));
    }

    #[test]
    fn greeting_registers_new_fog() {
        let o = orch();
        o.register_greeting(&Greeting::fog(id("fog:9"), 4.0, 8 * GIB)).unwrap();
        let c = o.snapshot().node(&id("fog:9")).unwrap().compute.unwrap();
        assert_eq!(c.total_processing, Millicores(4000));
        assert!(o.register_greeting(&Greeting::end_device(id("fog:9"))).is_err());
    }

    #[test]
    fn rollback_at_every_step() {
        let clean = orch_with(|_| FaultInjector::new(SimFabric::new(ByteCosts::default()), None));
        let base = clean.with_backend(|b| b.calls());
        success(&clean.service_end_device(&request(1, 100), &id("end:1")).unwrap());
        let steps = clean.with_backend(|b| b.calls()) - base;
        assert_eq!(steps, 4 + 4 + 4 + 1);
        for k in 0..steps {
            let o = orch_with(|_| FaultInjector::new(SimFabric::new(ByteCosts::default()), None));
            let ledgers = LedgerView::of(&o.snapshot());
            let fabric = o.with_backend(|b| b.dump());
            o.with_topology_mut(|_| ());
            o.session("arm").st().backend.arm(Some(k));
            let resp = o.service_end_device(&request(1, 100), &id("end:1")).unwrap();
            assert!(
                matches!(
                    resp.status,
                    ResponseStatus::Failure {
                        reason: FailureReason::Enforcement { .. }
                    }
                ),
                "step {k}"
            );
            assert_eq!(LedgerView::of(&o.snapshot()), ledgers, "step {k}");
            assert_eq!(o.with_backend(|b| b.dump()), fabric, "step {k}");
            o.reconcile().unwrap();
            success(&o.service_end_device(&request(2, 100), &id("end:1")).unwrap());
        }
    }

    #[test]
    fn refresh_evicts_reservations_on_removed_links() {
        let o = orch();
        let r = o.service_end_device(&request(1, 100), &id("end:1")).unwrap();
        let svc = success(&r).2;
        let mut snap = snapshot();
        snap.links.retain(|l| !(l.src == id("s1") && l.dst == id("s2")));
        let out = o.refresh(&snap).unwrap();
        assert_eq!(out.evicted, vec![svc]);
        assert_eq!(out.changes.removed_links.len(), 2);
        o.reconcile().unwrap();
        assert!(o.reservations().is_empty());
        let again = o.refresh(&snap).unwrap();
        assert!(again.changes.is_empty() && again.evicted.is_empty());
    }

    #[test]
    fn refresh_evicts_reservations_on_removed_fog() {
        let o = orch();
        let svc = success(&o.service_end_device(&request(1, 100), &id("end:1")).unwrap()).2;
        let mut snap = snapshot();
        snap.nodes.retain(|n| n.id != id("fog:1"));
        snap.links.retain(|l| l.dst != id("fog:1"));
        let out = o.refresh(&snap).unwrap();
        assert_eq!(out.evicted, vec![svc]);
        assert_eq!(out.changes.removed_nodes, vec![id("fog:1")]);
        o.reconcile().unwrap();
    }

    #[test]
    fn corrupted_ledger_fails_reconcile() {
        let o = orch();
        success(&o.service_end_device(&request(1, 100), &id("end:1")).unwrap());
        o.with_topology_mut(|t| t.charge_bw(&id("s1"), &id("s2"), 1).unwrap());
        assert!(o.reconcile().unwrap_err().contains("s1->s2"));
    }

    #[test]
    fn fifo_trace() {
        let o = Arc::new(orch());
        let handles: Vec<_> = (0..8)
            .map(|i| {
                let o = Arc::clone(&o);
                thread::spawn(move || o.service_end_device_detailed(&request(i, 10), &id("end:1")).unwrap())
            })
            .collect();
        let outcomes: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        assert!(outcomes.iter().all(|o| o.response.is_success()));
        let trace = o.trace();
        let mut open = None;
        let mut last_ticket = None;
        for ev in &trace {
            match ev.event {
                LockEvent::Acquired => {
                    assert!(open.is_none(), "overlapping sessions");
                    assert!(last_ticket.is_none_or(|t| ev.ticket == t + 1));
                    open = Some(ev.ticket);
                    last_ticket = Some(ev.ticket);
                }
                LockEvent::Released => assert_eq!(open.take(), Some(ev.ticket)),
            }
        }
        o.reconcile().unwrap();
    }

    #[test]
    fn config_round_trip() {
        let cfg = OrchestratorConfig::from_json(r#"{"control_bw": 10, "port_range": [5000, 5010]}"#).unwrap();
        assert_eq!(cfg.control_bw, 10);
        assert_eq!(cfg.port_range, (5000, 5010));
        assert_eq!(cfg.refresh_period(), Duration::from_secs(1));
        assert!(OrchestratorConfig::from_json(r#"{"port_range": [9, 1]}"#).is_err());
        assert!(OrchestratorConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn tcp_endpoints() {
        let o = Arc::new(orch());
        let cfg = OrchestratorConfig {
            greeting_addr: "127.0.0.1:0".into(),
            service_addr: "127.0.0.1:0".into(),
            shutdown_addr: "127.0.0.1:0".into(),
            ..Default::default()
        };
        let server = o.serve(&cfg).unwrap();
        let mut g = TcpStream::connect(server.greeting).unwrap();
        write_message(&mut g, &Greeting::end_device(id("end:7")).into()).unwrap();
        drop(g);
        let mut s = TcpStream::connect(server.service).unwrap();
        write_message(&mut s, &request(1, 10).into()).unwrap();
        let reply = read_message(&mut s).unwrap().unwrap();
        let Message::ServiceResponse(resp) = reply else {
            panic!("wrong reply")
        };
        let svc = success(&resp).2;
        let mut d = TcpStream::connect(server.shutdown).unwrap();
        write_message(&mut d, &ShutdownRequest { service_id: svc }.into()).unwrap();
        let Message::ShutdownResponse(sr) = read_message(&mut d).unwrap().unwrap() else {
            panic!("wrong reply")
        };
        assert_eq!(sr.result, ShutdownResult::Ok);
        server.shutdown();
        let deadline = Instant::now() + Duration::from_secs(5);
        while o.snapshot().kind(&id("end:7")).is_none() && Instant::now() < deadline {
            thread::sleep(Duration::from_millis(5));
        }
        assert_eq!(o.snapshot().kind(&id("end:7")), Some(NodeKind::EndDevice));
    }
}
