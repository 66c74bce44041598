//! Edge weights to loop-free routing.
//!
//! For each positive-demand flow the network is first pruned to a DAG that
//! still contains every shortest path (and usually many longer ones). Then at
//! every vertex of the DAG, traffic is split over the retained out-edges by a
//! softmin of `w(v,u) + dist(u, sink)`.
//!
//! Two pruning strategies exist:
//!
//! * [`PruneStrategy::FrontierMeets`] (default) runs Dijkstra from the
//!   source, records parent links and frontier meets, marks on-path vertices
//!   by walking parents back from the sink, and splices frontier meets into
//!   extra paths. Edges between on-path vertices are kept when they point
//!   forward in settle order (sink last). Its output is checked by
//!   [`validate_dag`]; any failure falls back to the distance-decreasing rule
//!   for that flow.
//! * [`PruneStrategy::DistanceDecreasing`] keeps edge `(u,v)` iff
//!   `dist(v,t) < dist(u,t)`, restricted to vertices reachable from the
//!   source. Acyclic by construction, but drops equal-distance detours.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use log::warn;
use thiserror::Error;

use crate::demand::DemandMatrix;
use crate::graph::{EdgeId, GraphError, Network, Routing, VertexId};
use crate::scalar::{Ordered, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RoutingError {
    #[error("softmin of an empty vector")]
    Empty,
    #[error("softmin input is not finite")]
    NonFinite,
    #[error("gamma must be positive and finite, got {0}")]
    Gamma(f64),
    #[error("edge weight {value} on edge {edge} is not positive and finite")]
    Weight { edge: EdgeId, value: f64 },
    #[error("{got} weights for {expected} edges")]
    WeightCount { expected: usize, got: usize },
    #[error("no path source to sink for flow ({0},{1})")]
    NoPath(VertexId, VertexId),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// `softmin(x)_i = exp(-gamma x_i) / sum_j exp(-gamma x_j)`, evaluated after
/// shifting by `min(x)`.
pub fn softmin<T: Scalar>(x: &[T], gamma: T) -> Result<Vec<T>, RoutingError> {
    if x.is_empty() {
        return Err(RoutingError::Empty);
    }
    if !(gamma > T::zero()) || !gamma.is_finite() {
        return Err(RoutingError::Gamma(gamma.as_f64()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(RoutingError::NonFinite);
    }
    let lo = x.iter().copied().fold(T::infinity(), T::min);
    let exps: Vec<T> = x.iter().map(|&v| (-gamma * (v - lo)).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Strictly positive per-edge lengths, aligned with canonical edge order.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeWeights<T>(Vec<T>);

impl<T: Scalar> EdgeWeights<T> {
    pub fn new(weights: Vec<T>) -> Result<Self, RoutingError> {
        if let Some((edge, &value)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(**w > T::zero()) || !w.is_finite())
        {
            return Err(RoutingError::Weight {
                edge,
                value: value.as_f64(),
            });
        }
        Ok(Self(weights))
    }

    pub fn uniform(edge_count: usize, w: T) -> Self {
        Self(vec![w; edge_count])
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scaled(&self, k: T) -> Self {
        Self(self.0.iter().map(|&w| w * k).collect())
    }

    fn check_len(&self, net: &Network<T>) -> Result<(), RoutingError> {
        if self.0.len() != net.edge_count() {
            return Err(RoutingError::WeightCount {
                expected: net.edge_count(),
                got: self.0.len(),
            });
        }
        Ok(())
    }
}

/// Per-flow acyclic subgraph used for splitting.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDag<T> {
    pub source: VertexId,
    pub sink: VertexId,
    /// Retention flag per canonical edge.
    pub retained: Vec<bool>,
    /// Weighted distance to the sink inside the retained subgraph.
    pub dist_to_sink: Vec<Option<T>>,
}

impl<T: Scalar> FlowDag<T> {
    pub fn retained_edges(&self) -> impl Iterator<Item = EdgeId> + '_ {
        self.retained
            .iter()
            .enumerate()
            .filter(|(_, &r)| r)
            .map(|(e, _)| e)
    }

    fn from_retained(
        net: &Network<T>,
        weights: &[T],
        source: VertexId,
        sink: VertexId,
        retained: Vec<bool>,
    ) -> Self {
        let dist_to_sink = net.distances_to(weights, sink, |e| retained[e]);
        Self {
            source,
            sink,
            retained,
            dist_to_sink,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PruneStrategy {
    DistanceDecreasing,
    #[default]
    FrontierMeets,
}

/// Prunes with the default (frontier-meet) strategy, falling back to the
/// distance-decreasing rule if the result fails validation.
pub fn prune_graph<T: Scalar>(
    net: &Network<T>,
    weights: &EdgeWeights<T>,
    source: VertexId,
    sink: VertexId,
) -> Result<FlowDag<T>, RoutingError> {
    prune_graph_with(net, weights, source, sink, PruneStrategy::FrontierMeets).map(|o| o.dag)
}

/// Prunes with the distance-decreasing rule: keep `(u,v)` iff
/// `dist(v,t) < dist(u,t)`.
pub fn prune_reference<T: Scalar>(
    net: &Network<T>,
    weights: &EdgeWeights<T>,
    source: VertexId,
    sink: VertexId,
) -> Result<FlowDag<T>, RoutingError> {
    weights.check_len(net)?;
    let dist = net.distances_to(weights.as_slice(), sink, |_| true);
    if dist[source].is_none() {
        return Err(RoutingError::NoPath(source, sink));
    }
    Ok(distance_decreasing(
        net,
        weights.as_slice(),
        source,
        sink,
        &dist,
    ))
}

fn distance_decreasing<T: Scalar>(
    net: &Network<T>,
    w: &[T],
    source: VertexId,
    sink: VertexId,
    dist: &[Option<T>],
) -> FlowDag<T> {
    let decreasing = |e: EdgeId| {
        let (a, b) = net.edge(e);
        matches!((dist[a], dist[b]), (Some(da), Some(db)) if db < da)
    };
    // restrict to the part reachable from the source
    let mut reach = vec![false; net.vertex_count()];
    let mut stack = vec![source];
    reach[source] = true;
    while let Some(v) = stack.pop() {
        for &e in net.out_edges(v) {
            let h = net.edge(e).1;
            if decreasing(e) && !reach[h] {
                reach[h] = true;
                stack.push(h);
            }
        }
    }
    let retained = (0..net.edge_count())
        .map(|e| reach[net.edge(e).0] && decreasing(e))
        .collect();
    FlowDag::from_retained(net, w, source, sink, retained)
}

/// Result of a pruning attempt with its fallback flag.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome<T> {
    pub dag: FlowDag<T>,
    pub fell_back: bool,
}

pub fn prune_graph_with<T: Scalar>(
    net: &Network<T>,
    weights: &EdgeWeights<T>,
    source: VertexId,
    sink: VertexId,
    strategy: PruneStrategy,
) -> Result<PruneOutcome<T>, RoutingError> {
    match strategy {
        PruneStrategy::DistanceDecreasing => {
            let dag = prune_reference(net, weights, source, sink)?;
            let fell_back = match validate_dag(net, weights, &dag) {
                Ok(()) => false,
                Err(reason) => {
                    warn!("reference pruning failed validation for ({source},{sink}): {reason}");
                    true
                }
            };
            Ok(PruneOutcome { dag, fell_back })
        }
        PruneStrategy::FrontierMeets => {
            weights.check_len(net)?;
            let dag = frontier_meets(net, weights.as_slice(), source, sink)?;
            match validate_dag(net, weights, &dag) {
                Ok(()) => Ok(PruneOutcome {
                    dag,
                    fell_back: false,
                }),
                Err(reason) => {
                    warn!("frontier pruning invalid for ({source},{sink}): {reason}; using distance rule");
                    Ok(PruneOutcome {
                        dag: prune_reference(net, weights, source, sink)?,
                        fell_back: true,
                    })
                }
            }
        }
    }
}

fn frontier_meets<T: Scalar>(
    net: &Network<T>,
    w: &[T],
    source: VertexId,
    sink: VertexId,
) -> Result<FlowDag<T>, RoutingError> {
    let n = net.vertex_count();
    let mut parent: Vec<Option<VertexId>> = vec![None; n];
    let mut sink_parents: Vec<VertexId> = Vec::new();
    let mut explored = vec![false; n];
    let mut dist_source: Vec<Option<T>> = vec![None; n];
    let mut meets: Vec<(VertexId, VertexId)> = Vec::new();

    let mut heap = BinaryHeap::new();
    heap.push(Reverse((Ordered(T::zero()), source, usize::MAX)));
    while let Some(Reverse((Ordered(d), v, p))) = heap.pop() {
        if explored[v] {
            continue;
        }
        explored[v] = true;
        dist_source[v] = Some(d);
        parent[v] = (p != usize::MAX).then_some(p);
        for &e in net.out_edges(v) {
            let u = net.edge(e).1;
            if Some(u) == parent[v] {
                continue;
            }
            if u == sink {
                sink_parents.push(v);
            } else if explored[u] {
                meets.push((v, u));
            } else {
                heap.push(Reverse((Ordered(d + w[e]), u, v)));
            }
        }
    }
    if sink_parents.is_empty() && source != sink {
        return Err(RoutingError::NoPath(source, sink));
    }

    // mark on-path vertices by walking parent links back from the sink
    let weight = |a: VertexId, b: VertexId| net.edge_id(a, b).map(|e| w[e]);
    let mut on_path = vec![false; n];
    let mut label: Vec<Option<T>> = vec![None; n];
    on_path[sink] = true;
    label[sink] = Some(T::zero());
    let mut queue: VecDeque<VertexId> = VecDeque::new();
    for &p in &sink_parents {
        let d = weight(p, sink).unwrap_or_else(T::zero);
        if label[p].is_none_or(|cur| d < cur) {
            label[p] = Some(d);
        }
        on_path[p] = true;
        queue.push_back(p);
    }
    while let Some(v) = queue.pop_front() {
        if let Some(p) = parent[v] {
            let d = label[v].unwrap_or_else(T::zero) + weight(p, v).unwrap_or_else(T::zero);
            if label[p].is_none_or(|cur| d < cur) {
                label[p] = Some(d);
                on_path[p] = true;
                queue.push_back(p);
            }
        }
    }

    let ancestor = |on_path: &[bool], mut v: VertexId| -> (VertexId, Vec<VertexId>) {
        let mut chain = vec![v];
        while !on_path[v] {
            match parent[v] {
                Some(p) => {
                    v = p;
                    chain.push(v);
                }
                None => break,
            }
        }
        (v, chain)
    };

    for &(u, v) in &meets {
        let (a, chain_a) = ancestor(&on_path, u);
        let (b, chain_b) = ancestor(&on_path, v);
        let (Some(da), Some(db)) = (label[a], label[b]) else {
            continue;
        };
        if da == db {
            continue;
        }
        // path a -> ... -> u -> v -> ... -> b, oriented from the farther
        // ancestor to the nearer one
        let mut path: Vec<VertexId> = chain_a.iter().rev().copied().collect();
        path.extend(chain_b.iter().copied());
        let (far, near) = if da > db { (da, db) } else { (db, da) };
        if da < db {
            path.reverse();
        }
        if path.windows(2).any(|p| net.edge_id(p[0], p[1]).is_none()) {
            continue;
        }
        let steps = T::of((path.len() - 1) as f64);
        for (k, &x) in path.iter().enumerate() {
            if on_path[x] {
                continue;
            }
            let frac = T::of(k as f64) / steps;
            label[x] = Some(far - (far - near) * frac);
            on_path[x] = true;
        }
    }

    // orient by settle order from the source, sink last
    let rank = |v: VertexId| {
        if v == sink {
            (Ordered(T::infinity()), v)
        } else {
            (Ordered(dist_source[v].unwrap_or_else(T::infinity)), v)
        }
    };
    let forward = |e: EdgeId| {
        let (a, b) = net.edge(e);
        a != sink && on_path[a] && on_path[b] && rank(a) < rank(b)
    };
    let mut reach = vec![false; n];
    let mut stack = vec![source];
    reach[source] = true;
    while let Some(v) = stack.pop() {
        for &e in net.out_edges(v) {
            let h = net.edge(e).1;
            if forward(e) && !reach[h] {
                reach[h] = true;
                stack.push(h);
            }
        }
    }
    let mut retained: Vec<bool> = (0..net.edge_count())
        .map(|e| reach[net.edge(e).0] && forward(e))
        .collect();
    // drop branches that cannot reach the sink
    let to_sink = net.distances_to(w, sink, |e| retained[e]);
    for (e, keep) in retained.iter_mut().enumerate() {
        let (a, b) = net.edge(e);
        if to_sink[a].is_none() || to_sink[b].is_none() {
            *keep = false;
        }
    }
    let dag = FlowDag::from_retained(net, w, source, sink, retained);
    Ok(dag)
}

/// Checks every [`FlowDag`] postcondition; returns a reason on failure.
pub fn validate_dag<T: Scalar>(
    net: &Network<T>,
    weights: &EdgeWeights<T>,
    dag: &FlowDag<T>,
) -> Result<(), String> {
    let (s, t) = (dag.source, dag.sink);
    let n = net.vertex_count();
    let kept = |e: EdgeId| dag.retained[e];
    if !net.out_edges(s).iter().any(|&e| kept(e)) {
        return Err("source has no retained out-edge".into());
    }
    if net.out_edges(t).iter().any(|&e| kept(e)) {
        return Err("sink has a retained out-edge".into());
    }

    let mut indegree = vec![0usize; n];
    let mut touched = vec![false; n];
    for e in dag.retained_edges() {
        let (a, b) = net.edge(e);
        indegree[b] += 1;
        touched[a] = true;
        touched[b] = true;
    }
    let mut queue: VecDeque<VertexId> =
        (0..n).filter(|&v| touched[v] && indegree[v] == 0).collect();
    let mut seen = 0;
    let mut from_source = vec![false; n];
    from_source[s] = true;
    while let Some(v) = queue.pop_front() {
        seen += 1;
        for &e in net.out_edges(v) {
            if !kept(e) {
                continue;
            }
            let h = net.edge(e).1;
            from_source[h] |= from_source[v];
            indegree[h] -= 1;
            if indegree[h] == 0 {
                queue.push_back(h);
            }
        }
    }
    if seen != touched.iter().filter(|&&x| x).count() {
        return Err("retained subgraph has a cycle".into());
    }
    for v in (0..n).filter(|&v| touched[v]) {
        if !from_source[v] {
            return Err(format!("vertex {v} not reachable from source"));
        }
        if dag.dist_to_sink[v].is_none() {
            return Err(format!("vertex {v} cannot reach sink"));
        }
    }

    let full = net.distances_to(weights.as_slice(), t, |_| true);
    let inside = net.distances_to(weights.as_slice(), t, kept);
    match (full[s], inside[s]) {
        (Some(a), Some(b)) if (a - b).abs() <= T::of(1e-9) * (T::one() + a.abs()) => {}
        _ => return Err("no shortest path retained".into()),
    }
    if inside != dag.dist_to_sink {
        return Err("dist_to_sink inconsistent with retained subgraph".into());
    }
    Ok(())
}

/// Splitting ratios for one flow over its DAG.
pub fn dag_ratios<T: Scalar>(
    net: &Network<T>,
    weights: &EdgeWeights<T>,
    gamma: T,
    dag: &FlowDag<T>,
) -> Result<Vec<T>, RoutingError> {
    let w = weights.as_slice();
    let mut ratios = vec![T::zero(); net.edge_count()];
    let mut scores = Vec::new();
    let mut ids = Vec::new();
    for v in 0..net.vertex_count() {
        if v == dag.sink {
            continue;
        }
        scores.clear();
        ids.clear();
        for &e in net.out_edges(v) {
            if !dag.retained[e] {
                continue;
            }
            let head = net.edge(e).1;
            let d = dag.dist_to_sink[head].ok_or(RoutingError::NoPath(dag.source, dag.sink))?;
            scores.push(w[e] + d);
            ids.push(e);
        }
        if ids.is_empty() {
            continue;
        }
        for (&e, p) in ids.iter().zip(softmin(&scores, gamma)?) {
            ratios[e] = p;
        }
    }
    Ok(ratios)
}

/// Softmin routing with the default pruning strategy.
pub fn softmin_routing<T: Scalar>(
    net: &Network<T>,
    weights: &EdgeWeights<T>,
    gamma: T,
    demands: &DemandMatrix<T>,
) -> Result<Routing<T>, RoutingError> {
    softmin_routing_with(net, weights, gamma, demands, PruneStrategy::default()).map(|(r, _)| r)
}

/// Softmin routing with an explicit pruning strategy; every DAG is validated.
/// Also returns how many flows failed validation (and, for the frontier-meet
/// strategy, fell back to the distance-decreasing rule).
pub fn softmin_routing_with<T: Scalar>(
    net: &Network<T>,
    weights: &EdgeWeights<T>,
    gamma: T,
    demands: &DemandMatrix<T>,
    strategy: PruneStrategy,
) -> Result<(Routing<T>, usize), RoutingError> {
    route_flows(net, weights, gamma, demands, |s, t| {
        prune_graph_with(net, weights, s, t, strategy)
    })
}

fn route_flows<T: Scalar>(
    net: &Network<T>,
    weights: &EdgeWeights<T>,
    gamma: T,
    demands: &DemandMatrix<T>,
    prune: impl Fn(VertexId, VertexId) -> Result<PruneOutcome<T>, RoutingError>,
) -> Result<(Routing<T>, usize), RoutingError> {
    weights.check_len(net)?;
    if demands.size() != net.vertex_count() {
        return Err(GraphError::DemandSize {
            expected: net.vertex_count(),
            got: demands.size(),
        }
        .into());
    }
    if !(gamma > T::zero()) || !gamma.is_finite() {
        return Err(RoutingError::Gamma(gamma.as_f64()));
    }
    let mut routing = Routing::new(net.edge_count());
    let mut fallbacks = 0;
    for flow in demands.flows() {
        let outcome = prune(flow.source, flow.sink)?;
        fallbacks += usize::from(outcome.fell_back);
        let ratios = dag_ratios(net, weights, gamma, &outcome.dag)?;
        routing.insert(flow.source, flow.sink, ratios)?;
    }
    Ok((routing, fallbacks))
}
