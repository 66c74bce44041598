//! Flow networks, routings and routing evaluation.
//!
//! A [`Network`] is a directed capacitated graph with edges kept in canonical
//! `(tail, head)` order, so an edge id is stable for a given edge set. A
//! [`Routing`] stores per-flow splitting ratios as dense per-edge vectors and
//! [`simulate_routing`] turns ratios into per-link utilisation by pushing each
//! flow forward through its (acyclic) edge set.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use thiserror::Error;

use crate::demand::DemandMatrix;
use crate::scalar::{Ordered, Scalar};

pub type VertexId = usize;
pub type EdgeId = usize;

/// Tolerance used when checking that splitting ratios sum to one.
pub const RATIO_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("network must have at least one vertex")]
    NoVertices,
    #[error("edge ({tail},{head}) has an endpoint outside 0..{vertex_count}")]
    VertexOutOfRange {
        tail: VertexId,
        head: VertexId,
        vertex_count: usize,
    },
    #[error("self-loop on vertex {0}")]
    SelfLoop(VertexId),
    #[error("duplicate edge ({0},{1})")]
    DuplicateEdge(VertexId, VertexId),
    #[error("nonpositive capacity on edge ({0},{1})")]
    NonpositiveCapacity(VertexId, VertexId),
    #[error("{edges} edges but {capacities} capacities")]
    CapacityCount { edges: usize, capacities: usize },
    #[error("flow source and sink are both {0}")]
    DegenerateFlow(VertexId),
    #[error("demand matrix is {got}x{got}, network has {expected} vertices")]
    DemandSize { expected: usize, got: usize },
    #[error("routing has no ratios for flow ({0},{1})")]
    MissingFlow(VertexId, VertexId),
    #[error("routing ratio vector has {got} entries, network has {expected} edges")]
    RoutingWidth { expected: usize, got: usize },
    #[error("routing contains a loop for flow ({0},{1})")]
    RoutingLoop(VertexId, VertexId),
    #[error("flow ({0},{1}) cannot reach sink")]
    Unreachable(VertexId, VertexId),
    #[error("flow ({from},{to}): ratios at vertex {vertex} sum to {sum}")]
    RatioSum {
        from: VertexId,
        to: VertexId,
        vertex: VertexId,
        sum: f64,
    },
    #[error("flow ({from},{to}): ratio {value} on edge {edge} outside [0,1]")]
    RatioRange {
        from: VertexId,
        to: VertexId,
        edge: EdgeId,
        value: f64,
    },
    #[error("flow ({0},{1}): sink forwards traffic")]
    SinkForwards(VertexId, VertexId),
}

/// Directed capacitated graph with dense vertex ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    vertex_count: usize,
    edges: Vec<(VertexId, VertexId)>,
    capacity: Vec<T>,
    out_edges: Vec<Vec<EdgeId>>,
    in_edges: Vec<Vec<EdgeId>>,
}

impl<T: Scalar> Network<T> {
    /// Validates and builds a network. Edges are re-sorted by `(tail, head)`.
    pub fn new(
        vertex_count: usize,
        edges: impl IntoIterator<Item = (VertexId, VertexId, T)>,
    ) -> Result<Self, GraphError> {
        if vertex_count == 0 {
            return Err(GraphError::NoVertices);
        }
        let mut list: Vec<(VertexId, VertexId, T)> = edges.into_iter().collect();
        for &(tail, head, cap) in &list {
            if tail >= vertex_count || head >= vertex_count {
                return Err(GraphError::VertexOutOfRange {
                    tail,
                    head,
                    vertex_count,
                });
            }
            if tail == head {
                return Err(GraphError::SelfLoop(tail));
            }
            if !(cap > T::zero()) || !cap.is_finite() {
                return Err(GraphError::NonpositiveCapacity(tail, head));
            }
        }
        list.sort_by_key(|&(t, h, _)| (t, h));
        if let Some(w) = list
            .windows(2)
            .find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1))
        {
            return Err(GraphError::DuplicateEdge(w[0].0, w[0].1));
        }

        let mut out_edges = vec![Vec::new(); vertex_count];
        let mut in_edges = vec![Vec::new(); vertex_count];
        for (id, &(t, h, _)) in list.iter().enumerate() {
            out_edges[t].push(id);
            in_edges[h].push(id);
        }
        Ok(Self {
            vertex_count,
            edges: list.iter().map(|&(t, h, _)| (t, h)).collect(),
            capacity: list.into_iter().map(|(_, _, c)| c).collect(),
            out_edges,
            in_edges,
        })
    }

    /// Builds from parallel edge and capacity lists.
    pub fn from_parts(
        vertex_count: usize,
        edges: &[(VertexId, VertexId)],
        capacities: &[T],
    ) -> Result<Self, GraphError> {
        if edges.len() != capacities.len() {
            return Err(GraphError::CapacityCount {
                edges: edges.len(),
                capacities: capacities.len(),
            });
        }
        Self::new(
            vertex_count,
            edges.iter().zip(capacities).map(|(&(t, h), &c)| (t, h, c)),
        )
    }

    /// Builds a network where every undirected link becomes two directed edges.
    pub fn bidirectional(
        vertex_count: usize,
        links: &[(VertexId, VertexId)],
        capacity: T,
    ) -> Result<Self, GraphError> {
        Self::new(
            vertex_count,
            links
                .iter()
                .flat_map(|&(a, b)| [(a, b, capacity), (b, a, capacity)]),
        )
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Edges in canonical order.
    pub fn edges(&self) -> &[(VertexId, VertexId)] {
        &self.edges
    }

    pub fn edge(&self, id: EdgeId) -> (VertexId, VertexId) {
        self.edges[id]
    }

    pub fn capacity(&self, id: EdgeId) -> T {
        self.capacity[id]
    }

    pub fn capacities(&self) -> &[T] {
        &self.capacity
    }

    pub fn out_edges(&self, v: VertexId) -> &[EdgeId] {
        &self.out_edges[v]
    }

    pub fn in_edges(&self, v: VertexId) -> &[EdgeId] {
        &self.in_edges[v]
    }

    pub fn edge_id(&self, tail: VertexId, head: VertexId) -> Option<EdgeId> {
        self.edges.binary_search(&(tail, head)).ok()
    }

    pub fn max_capacity(&self) -> T {
        self.capacity.iter().copied().fold(T::zero(), T::max)
    }

    /// Same edges with every capacity divided by `divisor`.
    pub fn scale_capacities(&self, divisor: T) -> Result<Self, GraphError> {
        let caps: Vec<T> = self.capacity.iter().map(|&c| c / divisor).collect();
        Self::from_parts(self.vertex_count, &self.edges, &caps)
    }

    /// Converts capacities to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            vertex_count: self.vertex_count,
            edges: self.edges.clone(),
            capacity: self.capacity.iter().map(|c| U::of(c.as_f64())).collect(),
            out_edges: self.out_edges.clone(),
            in_edges: self.in_edges.clone(),
        }
    }

    /// Relabels vertex `i` as `perm[i]`. Also returns `edge_map[old] = new`.
    pub fn permuted(&self, perm: &[VertexId]) -> Result<(Self, Vec<EdgeId>), GraphError> {
        let net = Self::new(
            self.vertex_count,
            self.edges
                .iter()
                .zip(&self.capacity)
                .map(|(&(t, h), &c)| (perm[t], perm[h], c)),
        )?;
        let map = self
            .edges
            .iter()
            .map(|&(t, h)| {
                net.edge_id(perm[t], perm[h])
                    .expect("relabelled edge exists")
            })
            .collect();
        Ok((net, map))
    }

    /// Vertices reachable from `from` along directed edges.
    pub fn reachable_from(&self, from: VertexId) -> Vec<bool> {
        let mut seen = vec![false; self.vertex_count];
        let mut queue = VecDeque::from([from]);
        seen[from] = true;
        while let Some(v) = queue.pop_front() {
            for &e in &self.out_edges[v] {
                let h = self.edges[e].1;
                if !seen[h] {
                    seen[h] = true;
                    queue.push_back(h);
                }
            }
        }
        seen
    }

    /// Vertices that can reach `to` along directed edges.
    pub fn reaching(&self, to: VertexId) -> Vec<bool> {
        let mut seen = vec![false; self.vertex_count];
        let mut queue = VecDeque::from([to]);
        seen[to] = true;
        while let Some(v) = queue.pop_front() {
            for &e in &self.in_edges[v] {
                let t = self.edges[e].0;
                if !seen[t] {
                    seen[t] = true;
                    queue.push_back(t);
                }
            }
        }
        seen
    }

    pub fn is_strongly_connected(&self) -> bool {
        self.reachable_from(0).iter().all(|&r| r) && self.reaching(0).iter().all(|&r| r)
    }

    /// Weighted shortest distance from every vertex to `sink` over the edges
    /// accepted by `keep`. Ties in the queue are broken by lower vertex id.
    pub fn distances_to(
        &self,
        weights: &[T],
        sink: VertexId,
        keep: impl Fn(EdgeId) -> bool,
    ) -> Vec<Option<T>> {
        let mut dist: Vec<Option<T>> = vec![None; self.vertex_count];
        let mut heap = BinaryHeap::new();
        dist[sink] = Some(T::zero());
        heap.push(Reverse((Ordered(T::zero()), sink)));
        while let Some(Reverse((Ordered(d), v))) = heap.pop() {
            if dist[v].is_some_and(|best| d > best) {
                continue;
            }
            for &e in &self.in_edges[v] {
                if !keep(e) {
                    continue;
                }
                let t = self.edges[e].0;
                let nd = d + weights[e];
                if dist[t].is_none_or(|cur| nd < cur) {
                    dist[t] = Some(nd);
                    heap.push(Reverse((Ordered(nd), t)));
                }
            }
        }
        dist
    }
}

/// A single commodity: `demand` units from `source` to `sink`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flow<T> {
    pub source: VertexId,
    pub sink: VertexId,
    pub demand: T,
}

impl<T: Scalar> Flow<T> {
    pub fn new(source: VertexId, sink: VertexId, demand: T) -> Result<Self, GraphError> {
        if source == sink {
            return Err(GraphError::DegenerateFlow(source));
        }
        Ok(Self {
            source,
            sink,
            demand,
        })
    }
}

/// Per-flow splitting ratios, one dense vector over canonical edges per
/// `(source, sink)` pair.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Routing<T> {
    edge_count: usize,
    flows: BTreeMap<(VertexId, VertexId), Vec<T>>,
}

impl<T: Scalar> Routing<T> {
    pub fn new(edge_count: usize) -> Self {
        Self {
            edge_count,
            flows: BTreeMap::new(),
        }
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn insert(
        &mut self,
        source: VertexId,
        sink: VertexId,
        ratios: Vec<T>,
    ) -> Result<(), GraphError> {
        if ratios.len() != self.edge_count {
            return Err(GraphError::RoutingWidth {
                expected: self.edge_count,
                got: ratios.len(),
            });
        }
        self.flows.insert((source, sink), ratios);
        Ok(())
    }

    pub fn ratios(&self, source: VertexId, sink: VertexId) -> Option<&[T]> {
        self.flows.get(&(source, sink)).map(Vec::as_slice)
    }

    pub fn flows(&self) -> impl Iterator<Item = ((VertexId, VertexId), &[T])> {
        self.flows.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }

    /// Checks routing constraints for every stored flow: ratios in `[0,1]`,
    /// rows summing to one at every vertex carrying the flow, nothing
    /// forwarded by the sink, and an acyclic edge set.
    pub fn validate(&self, net: &Network<T>) -> Result<(), GraphError> {
        let tol = T::of(RATIO_TOLERANCE);
        for (&(s, t), ratios) in &self.flows {
            for (e, &r) in ratios.iter().enumerate() {
                if !(r >= T::zero() && r <= T::one() + tol) {
                    return Err(GraphError::RatioRange {
                        from: s,
                        to: t,
                        edge: e,
                        value: r.as_f64(),
                    });
                }
            }
            if net.out_edges(t).iter().any(|&e| ratios[e] != T::zero()) {
                return Err(GraphError::SinkForwards(s, t));
            }
            let (_, vertex_frac) = propagate(net, ratios, s, t)?;
            for (v, &frac) in vertex_frac.iter().enumerate() {
                if v == t || frac <= T::zero() {
                    continue;
                }
                let sum: T = net.out_edges(v).iter().map(|&e| ratios[e]).sum();
                if (sum - T::one()).abs() > tol {
                    return Err(GraphError::RatioSum {
                        from: s,
                        to: t,
                        vertex: v,
                        sum: sum.as_f64(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Per-edge fraction of a flow's traffic under `routing`.
pub fn flow_fractions<T: Scalar>(
    net: &Network<T>,
    routing: &Routing<T>,
    source: VertexId,
    sink: VertexId,
) -> Result<Vec<T>, GraphError> {
    let ratios = routing
        .ratios(source, sink)
        .ok_or(GraphError::MissingFlow(source, sink))?;
    if ratios.len() != net.edge_count() {
        return Err(GraphError::RoutingWidth {
            expected: net.edge_count(),
            got: ratios.len(),
        });
    }
    propagate(net, ratios, source, sink).map(|(edge_frac, _)| edge_frac)
}

/// Forward propagation of a unit flow in topological order of the
/// positive-ratio subgraph reachable from `source`. Returns per-edge and
/// per-vertex (inflow) fractions.
fn propagate<T: Scalar>(
    net: &Network<T>,
    ratios: &[T],
    source: VertexId,
    sink: VertexId,
) -> Result<(Vec<T>, Vec<T>), GraphError> {
    let n = net.vertex_count();
    let active = |e: EdgeId| ratios[e] > T::zero() && net.edge(e).0 != sink;

    let mut reach = vec![false; n];
    let mut stack = vec![source];
    reach[source] = true;
    while let Some(v) = stack.pop() {
        for &e in net.out_edges(v) {
            let h = net.edge(e).1;
            if active(e) && !reach[h] {
                reach[h] = true;
                stack.push(h);
            }
        }
    }
    if !reach[sink] {
        return Err(GraphError::Unreachable(source, sink));
    }

    let mut indegree = vec![0usize; n];
    for (e, &(tail, head)) in net.edges().iter().enumerate() {
        if reach[tail] && active(e) {
            indegree[head] += 1;
        }
    }
    let mut vertex_frac = vec![T::zero(); n];
    let mut edge_frac = vec![T::zero(); net.edge_count()];
    vertex_frac[source] = T::one();
    let mut queue: VecDeque<VertexId> = (0..n).filter(|&v| reach[v] && indegree[v] == 0).collect();
    let mut processed = 0usize;
    while let Some(v) = queue.pop_front() {
        processed += 1;
        let inflow = vertex_frac[v];
        let mut forwarded = false;
        for &e in net.out_edges(v) {
            if !active(e) {
                continue;
            }
            forwarded = true;
            let f = inflow * ratios[e];
            edge_frac[e] = f;
            let h = net.edge(e).1;
            vertex_frac[h] += f;
            indegree[h] -= 1;
            if indegree[h] == 0 {
                queue.push_back(h);
            }
        }
        if v != sink && inflow > T::zero() && !forwarded {
            return Err(GraphError::Unreachable(source, sink));
        }
    }
    if processed != reach.iter().filter(|&&r| r).count() {
        return Err(GraphError::RoutingLoop(source, sink));
    }
    Ok((edge_frac, vertex_frac))
}

/// Per-edge utilisation (load / capacity) and its maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkLoadReport<T> {
    pub utilisation: Vec<T>,
    pub u_max: T,
}

impl<T: Scalar> LinkLoadReport<T> {
    fn from_loads(net: &Network<T>, loads: Vec<T>) -> Self {
        let utilisation: Vec<T> = loads
            .into_iter()
            .zip(net.capacities())
            .map(|(l, &c)| l / c)
            .collect();
        let u_max = utilisation.iter().copied().fold(T::zero(), T::max);
        Self { utilisation, u_max }
    }
}

/// Simulates `routing` under `demands`. Zero-demand flows are skipped and need
/// no ratios.
pub fn simulate_routing<T: Scalar>(
    net: &Network<T>,
    demands: &DemandMatrix<T>,
    routing: &Routing<T>,
) -> Result<LinkLoadReport<T>, GraphError> {
    if demands.size() != net.vertex_count() {
        return Err(GraphError::DemandSize {
            expected: net.vertex_count(),
            got: demands.size(),
        });
    }
    let mut loads = vec![T::zero(); net.edge_count()];
    for flow in demands.flows() {
        let fractions = flow_fractions(net, routing, flow.source, flow.sink)?;
        for (load, f) in loads.iter_mut().zip(fractions) {
            *load += f * flow.demand;
        }
    }
    Ok(LinkLoadReport::from_loads(net, loads))
}

/// Utilisation report for explicit per-flow edge fractions (used for LP
/// solutions, which are not expressed as splitting ratios).
pub fn load_report_from_fractions<T: Scalar>(
    net: &Network<T>,
    demands: &DemandMatrix<T>,
    fractions: &BTreeMap<(VertexId, VertexId), Vec<T>>,
) -> LinkLoadReport<T> {
    let mut loads = vec![T::zero(); net.edge_count()];
    for flow in demands.flows() {
        if let Some(fr) = fractions.get(&(flow.source, flow.sink)) {
            for (load, &f) in loads.iter_mut().zip(fr) {
                *load += f * flow.demand;
            }
        }
    }
    LinkLoadReport::from_loads(net, loads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_path() -> Network<f64> {
        Network::new(3, [(0, 2, 1.0), (0, 1, 1.0), (1, 2, 1.0)]).unwrap()
    }

    fn split_routing(net: &Network<f64>, direct: f64) -> Routing<f64> {
        let mut r = Routing::new(net.edge_count());
        let mut ratios = vec![0.0; net.edge_count()];
        ratios[net.edge_id(0, 2).unwrap()] = direct;
        ratios[net.edge_id(0, 1).unwrap()] = 1.0 - direct;
        ratios[net.edge_id(1, 2).unwrap()] = 1.0;
        r.insert(0, 2, ratios).unwrap();
        r
    }

    #[test]
    fn edges_are_canonical() {
        let net = Network::new(3, [(1, 2, 1.0), (0, 2, 1.0), (0, 1, 1.0)]).unwrap();
        assert_eq!(net.edges(), &[(0, 1), (0, 2), (1, 2)]);
        assert_eq!(net.edge_count(), 3);
    }

    #[test]
    fn rejects_invalid_edges() {
        let e = Network::new(3, [(0, 0, 1.0)]).unwrap_err();
        assert!(e.to_string().contains("self-loop"));
        let e = Network::new(3, [(0, 1, 0.0)]).unwrap_err();
        assert!(e.to_string().contains("nonpositive capacity"));
        let e = Network::new(3, [(0, 1, 1.0), (0, 1, 2.0)]).unwrap_err();
        assert!(e.to_string().contains("duplicate edge"));
        assert!(Network::new(2, [(0, 5, 1.0)]).is_err());
    }

    #[test]
    fn symmetric_split_halves_load() {
        let net = two_path();
        let r = split_routing(&net, 0.5);
        let d = DemandMatrix::from_fn(3, |s, t| if (s, t) == (0, 2) { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(simulate_routing(&net, &d, &r).unwrap().u_max, 0.5);
        let d2 = d.scaled(2.0);
        assert_eq!(simulate_routing(&net, &d2, &r).unwrap().u_max, 1.0);
    }

    #[test]
    fn detects_loops_and_dead_ends() {
        let net = Network::bidirectional(3, &[(0, 1), (1, 2)], 1.0).unwrap();
        let mut ratios = vec![0.0; net.edge_count()];
        ratios[net.edge_id(0, 1).unwrap()] = 1.0;
        ratios[net.edge_id(1, 0).unwrap()] = 0.5;
        ratios[net.edge_id(1, 2).unwrap()] = 0.5;
        let mut r = Routing::new(net.edge_count());
        r.insert(0, 2, ratios).unwrap();
        let e = flow_fractions(&net, &r, 0, 2).unwrap_err();
        assert_eq!(e, GraphError::RoutingLoop(0, 2));
        assert!(e.to_string().contains("routing contains a loop"));

        let mut ratios = vec![0.0; net.edge_count()];
        ratios[net.edge_id(0, 1).unwrap()] = 1.0;
        let mut r = Routing::new(net.edge_count());
        r.insert(0, 2, ratios).unwrap();
        let e = flow_fractions(&net, &r, 0, 2).unwrap_err();
        assert!(e.to_string().contains("cannot reach sink"));
    }

    #[test]
    fn zero_demand_flows_need_no_ratios() {
        let net = two_path();
        let r = Routing::new(net.edge_count());
        let d = DemandMatrix::zeros(3);
        assert_eq!(simulate_routing(&net, &d, &r).unwrap().u_max, 0.0);
        let d = DemandMatrix::from_fn(3, |s, t| if (s, t) == (0, 2) { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(
            simulate_routing(&net, &d, &r).unwrap_err(),
            GraphError::MissingFlow(0, 2)
        );
    }

    #[test]
    fn validate_flags_bad_rows() {
        let net = two_path();
        let mut r = split_routing(&net, 0.5);
        assert!(r.validate(&net).is_ok());
        let mut ratios = r.ratios(0, 2).unwrap().to_vec();
        ratios[net.edge_id(0, 2).unwrap()] = 0.7;
        r.insert(0, 2, ratios).unwrap();
        assert!(matches!(
            r.validate(&net),
            Err(GraphError::RatioSum { vertex: 0, .. })
        ));
    }

    #[test]
    fn works_in_single_precision() {
        let net = two_path().cast::<f32>();
        let mut r = Routing::new(3);
        r.insert(0, 2, vec![0.5f32, 0.5, 1.0]).unwrap();
        let d =
            DemandMatrix::from_fn(3, |s, t| if (s, t) == (0, 2) { 1.0f32 } else { 0.0 }).unwrap();
        assert_eq!(simulate_routing(&net, &d, &r).unwrap().u_max, 0.5f32);
    }

    #[test]
    fn distances_break_ties_deterministically() {
        let net = Network::bidirectional(4, &[(0, 1), (1, 3), (0, 2), (2, 3)], 1.0).unwrap();
        let w = vec![1.0; net.edge_count()];
        let d = net.distances_to(&w, 3, |_| true);
        assert_eq!(d, vec![Some(2.0), Some(1.0), Some(1.0), Some(0.0)]);
    }
}
