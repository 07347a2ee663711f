//! Exhaustive reference allocator for small graphs.
//!
//! Enumerates every simple path from the end-device to every eligible
//! fog-device, relaying only through switches, and prices each path exactly.
//! Shares no code with the heap-based allocator.

use std::collections::BTreeSet;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;

use crate::topology::{Bps, NodeId, NodeKind, Topology};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OracleChoice {
    pub fog: NodeId,
    pub path: Vec<NodeId>,
    pub cost: BigRational,
}

/// Fog-devices whose free compute strictly exceeds the request.
pub fn servicers(t: &Topology, processing_millicores: u64, memory: u64) -> BTreeSet<NodeId> {
    let mut out = BTreeSet::new();
    for n in t.nodes() {
        if n.kind != NodeKind::FogDevice {
            continue;
        }
        if let Some(c) = &n.compute {
            let free_p = c.total_processing.0 as i128 - c.alloc_processing.0 as i128;
            let free_m = c.total_memory as i128 - c.alloc_memory as i128;
            if free_p > processing_millicores as i128 && free_m > memory as i128 {
                out.insert(n.id.clone());
            }
        }
    }
    out
}

fn spare(t: &Topology, a: &NodeId, b: &NodeId) -> Option<u64> {
    t.link(a, b)
        .map(|l| l.total_bw as i128 - l.alloc_bw as i128)
        .and_then(|s| u64::try_from(s).ok())
}

/// Exact price of a node sequence, or `None` if a hop is missing or lacks
/// `bw` spare in either direction.
pub fn path_cost(t: &Topology, path: &[NodeId], bw: Bps) -> Option<BigRational> {
    let mut total = BigRational::zero();
    for hop in path.windows(2) {
        let fwd = spare(t, &hop[0], &hop[1])?;
        let back = spare(t, &hop[1], &hop[0])?;
        if fwd < bw || back < bw || fwd == 0 {
            return None;
        }
        total += BigRational::new(BigInt::from(1_000_000u64), BigInt::from(fwd));
    }
    Some(total)
}

/// Every simple path from `src` to `dst` whose interior nodes are switches.
pub fn simple_paths(t: &Topology, src: &NodeId, dst: &NodeId) -> Vec<Vec<NodeId>> {
    fn walk(t: &Topology, dst: &NodeId, stack: &mut Vec<NodeId>, out: &mut Vec<Vec<NodeId>>) {
        let here = stack.last().expect("non-empty").clone();
        if &here == dst {
            out.push(stack.clone());
            return;
        }
        if stack.len() > 1 && t.kind(&here) != Some(NodeKind::Switch) {
            return;
        }
        let next: Vec<NodeId> = t.links().filter(|l| l.src == here).map(|l| l.dst.clone()).collect();
        for n in next {
            if stack.contains(&n) {
                continue;
            }
            stack.push(n);
            walk(t, dst, stack, out);
            stack.pop();
        }
    }
    let mut out = Vec::new();
    walk(t, dst, &mut vec![src.clone()], &mut out);
    out
}

/// The cheapest feasible (servicer, path) pair. Equal costs go to the
/// lexically smallest fog id.
pub fn best_choice(t: &Topology, e: &NodeId, bw: Bps, processing_millicores: u64, memory: u64) -> Option<OracleChoice> {
    let mut best: Option<OracleChoice> = None;
    for fog in servicers(t, processing_millicores, memory) {
        for path in simple_paths(t, e, &fog) {
            let Some(cost) = path_cost(t, &path, bw) else { continue };
            let better = match &best {
                None => true,
                Some(b) => cost < b.cost || (cost == b.cost && fog < b.fog),
            };
            if better {
                best = Some(OracleChoice {
                    fog: fog.clone(),
                    path,
                    cost,
                });
            }
        }
    }
    best
}
