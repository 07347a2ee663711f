//! Randomized checking of a live orchestrator against the exhaustive oracle
//! and the ledger audit.

use std::fmt;

use num_rational::BigRational;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::oracle;
use crate::orchestrator::Orchestrator;
use crate::protocol::{ResourceReport, ResponseStatus, ServiceId, ServiceRequest, ShutdownRequest, ShutdownResult};
use crate::southbound::Backend;
use crate::topology::{Millicores, Node, NodeId, NodeKind, Topology};

/// Random small network: one end-device, up to `max_fogs` fog-devices, the
/// rest switches, with random capacities and nothing allocated.
pub fn random_graph(rng: &mut impl Rng, max_nodes: usize, max_fogs: usize) -> Topology {
    assert!(max_nodes >= 3 && max_fogs >= 1);
    let n = rng.gen_range(3..=max_nodes);
    let fogs = rng.gen_range(1..=max_fogs.min(n - 2));
    let mut t = Topology::new(0);
    let mut ids = Vec::with_capacity(n);
    let id = |s: String| NodeId::new(s).expect("non-empty");
    let e = id("end:1".into());
    t.add_node(Node::new(e.clone(), NodeKind::EndDevice)).expect("fresh");
    ids.push(e);
    for i in 1..=fogs {
        let f = id(format!("fog:{i}"));
        let cpu = Millicores(rng.gen_range(1..=8) * 500);
        let mem = rng.gen_range(1..=8) << 28;
        t.add_node(Node::fog(f.clone(), cpu, mem)).expect("fresh");
        ids.push(f);
    }
    for i in 1..=n - 1 - fogs {
        let s = id(format!("openflow:{i}"));
        t.add_node(Node::new(s.clone(), NodeKind::Switch)).expect("fresh");
        ids.push(s);
    }
    let density = rng.gen_range(0.2..0.7);
    let mut next_port = vec![1u32; n];
    let bws = [100_000_000u64, 250_000_000, 500_000_000, 1_000_000_000];
    for a in 0..n {
        for b in a + 1..n {
            if !rng.gen_bool(density) {
                continue;
            }
            let bw = *bws.choose(rng).expect("non-empty");
            t.add_duplex_link(&ids[a], next_port[a], &ids[b], next_port[b], bw)
                .expect("fresh link");
            next_port[a] += 1;
            next_port[b] += 1;
        }
    }
    t
}

/// Charges random background bandwidth and compute, as if other tenants
/// already held part of every resource.
pub fn preload(rng: &mut impl Rng, t: &mut Topology) {
    let links: Vec<(NodeId, NodeId, u64)> = t.links().map(|l| (l.src.clone(), l.dst.clone(), l.total_bw)).collect();
    for (a, b, bw) in links {
        if rng.gen_bool(0.5) {
            let used = rng.gen_range(0..=bw / 1_000_000) * 1_000_000;
            t.charge_bw(&a, &b, used).expect("within capacity");
        }
    }
    let fogs: Vec<NodeId> = t.nodes_of(NodeKind::FogDevice).map(|n| n.id.clone()).collect();
    for f in &fogs {
        let c = t.node(f).and_then(|n| n.compute).expect("fog");
        let p = Millicores(rng.gen_range(0..=c.total_processing.0));
        let m = rng.gen_range(0..=c.total_memory);
        t.charge_compute(f, p, m).expect("within capacity");
    }
}

/// Random request sized so that both outcomes are common on
/// [`random_graph`] networks.
pub fn random_request(rng: &mut impl Rng, end_device: NodeId, seq: u64) -> ServiceRequest {
    ServiceRequest {
        request_id: format!("fuzz-{seq}"),
        node_id: end_device,
        image: "fuzz".into(),
        bw: rng.gen_range(1..=400) * 1_000_000,
        processing: rng.gen_range(1..=20) as f64 * 0.1,
        memory: rng.gen_range(1..=512) << 20,
        desired_port: None,
        transport: Default::default(),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FuzzConfig {
    pub ops: usize,
    pub seed: u64,
    /// Compare every allocation with the exhaustive oracle when the network
    /// has at most this many nodes.
    pub oracle_max_nodes: usize,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        FuzzConfig {
            ops: 500,
            seed: 0,
            oracle_max_nodes: 12,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FuzzReport {
    pub allocations: usize,
    pub failures: usize,
    pub deallocations: usize,
    pub reports: usize,
    pub oracle_checks: usize,
}

/// A failed check, with the network state just before the offending step.
#[derive(Clone, Debug, Serialize)]
pub struct Counterexample {
    pub op: usize,
    pub problem: String,
    pub request: Option<ServiceRequest>,
    pub topology: serde_json::Value,
}

impl fmt::Display for Counterexample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "op {}: {}", self.op, self.problem)
    }
}

impl std::error::Error for Counterexample {}

/// The topology document plus every allocated amount.
pub fn dump(t: &Topology) -> serde_json::Value {
    let links: Vec<serde_json::Value> = t
        .links()
        .map(|l| serde_json::json!({"src": l.src, "dst": l.dst, "total_bw": l.total_bw, "alloc_bw": l.alloc_bw}))
        .collect();
    let fogs: Vec<serde_json::Value> = t
        .nodes()
        .filter_map(|n| n.compute.as_ref().map(|c| (n, c)))
        .map(|(n, c)| {
            serde_json::json!({
                "id": n.id,
                "alloc_processing": c.alloc_processing.0,
                "alloc_memory": c.alloc_memory,
            })
        })
        .collect();
    serde_json::json!({
        "document": serde_json::to_value(t.to_snapshot()).unwrap_or_default(),
        "links": links,
        "fogs": fogs,
    })
}

/// Drives random allocate, shutdown and report operations and audits the
/// ledgers after each one.
pub fn fuzz<B: Backend>(orch: &Orchestrator<B>, cfg: &FuzzConfig) -> Result<FuzzReport, Box<Counterexample>> {
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut report = FuzzReport::default();
    let mut live: Vec<ServiceId> = Vec::new();
    let snap = orch.snapshot();
    let ends: Vec<NodeId> = snap.nodes_of(NodeKind::EndDevice).map(|n| n.id.clone()).collect();
    let fogs: Vec<NodeId> = snap.nodes_of(NodeKind::FogDevice).map(|n| n.id.clone()).collect();
    let use_oracle = snap.node_count() <= cfg.oracle_max_nodes;
    drop(snap);

    let counterexample = |op, problem: String, request: Option<ServiceRequest>, t: &Topology| {
        Box::new(Counterexample {
            op,
            problem,
            request,
            topology: dump(t),
        })
    };

    if let Err(e) = orch.reconcile() {
        return Err(counterexample(0, e, None, &orch.snapshot()));
    }
    for op in 1..=cfg.ops {
        let before = orch.snapshot();
        let roll = rng.gen_range(0..10);
        if roll < 5 && !ends.is_empty() {
            let e = ends.choose(&mut rng).expect("non-empty").clone();
            let req = random_request(&mut rng, e.clone(), op as u64);
            let expected = use_oracle.then(|| {
                oracle::best_choice(
                    &before,
                    &e,
                    req.bw,
                    Millicores::from_cores(req.processing).0,
                    req.memory,
                )
            });
            let outcome = orch
                .service_end_device_detailed(&req, &e)
                .map_err(|err| counterexample(op, err.to_string(), Some(req.clone()), &before))?;
            if let ResponseStatus::Success { service_id, .. } = &outcome.response.status {
                live.push(service_id.clone());
                report.allocations += 1;
            } else {
                report.failures += 1;
            }
            if let Some(expected) = expected {
                report.oracle_checks += 1;
                let got: Option<BigRational> = outcome
                    .plan
                    .as_ref()
                    .map(|p| {
                        let nodes = p.node_path();
                        oracle::path_cost(&before, &nodes, req.bw)
                    })
                    .map(|c| c.unwrap_or_else(|| BigRational::from_integer((-1).into())));
                let want = expected.as_ref().map(|c| c.cost.clone());
                if got != want {
                    return Err(counterexample(
                        op,
                        format!("allocation cost {got:?} differs from the oracle's {want:?}"),
                        Some(req),
                        &before,
                    ));
                }
            }
        } else if roll < 8 && !live.is_empty() {
            let i = rng.gen_range(0..live.len());
            let id = live.swap_remove(i);
            let resp = orch.service_shutdown_request(&ShutdownRequest { service_id: id.clone() });
            if resp.result != ShutdownResult::Ok {
                return Err(counterexample(
                    op,
                    format!("shutdown of live {id} was refused"),
                    None,
                    &before,
                ));
            }
            report.deallocations += 1;
        } else if !fogs.is_empty() {
            let f = fogs.choose(&mut rng).expect("non-empty").clone();
            orch.service_fog_device(&ResourceReport {
                fog_id: f,
                processor_utilization: rng.gen_range(0.0..=1.0),
                memory_utilization: rng.gen_range(0.0..=1.0),
                timestamp_ms: op as u64,
            })
            .map_err(|err| counterexample(op, err.to_string(), None, &before))?;
            report.reports += 1;
        }
        if let Err(e) = orch.reconcile() {
            return Err(counterexample(op, e, None, &orch.snapshot()));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::OrchestratorConfig;
    use crate::southbound::{ByteCosts, SimFabric};

    #[test]
    fn random_graphs_are_valid() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..200 {
            let t = random_graph(&mut rng, 10, 4);
            assert!(t.node_count() <= 10);
            assert!(t.nodes_of(NodeKind::FogDevice).count() <= 4);
            t.check_invariants().unwrap();
        }
    }

    #[test]
    fn short_fuzz_passes() {
        let mut rng = StdRng::seed_from_u64(3);
        let t = random_graph(&mut rng, 8, 3);
        let orch = Orchestrator::new(t, SimFabric::new(ByteCosts::default()), &OrchestratorConfig::default()).unwrap();
        let r = fuzz(
            &orch,
            &FuzzConfig {
                ops: 100,
                seed: 1,
                oracle_max_nodes: 12,
            },
        )
        .unwrap();
        assert_eq!(r.allocations + r.failures + r.deallocations + r.reports, 100);
    }

    #[test]
    fn corrupted_ledger_is_caught() {
        let mut rng = StdRng::seed_from_u64(5);
        let mut t = random_graph(&mut rng, 6, 2);
        preload(&mut rng, &mut t);
        let orch = Orchestrator::new(t, SimFabric::new(ByteCosts::default()), &OrchestratorConfig::default()).unwrap();
        let err = fuzz(&orch, &FuzzConfig::default()).unwrap_err();
        assert!(err.problem.contains("expected"));
        assert_eq!(err.op, 0);
    }
}
