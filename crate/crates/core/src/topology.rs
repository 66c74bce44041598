//! Topology Zoo GraphML ingestion and random topology perturbation.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphError, Network, VertexId};
use crate::scalar::Scalar;

/// The Abilene research network (11 PoPs, 14 OC-192 links) in Topology Zoo
/// GraphML form.
pub const ABILENE_GRAPHML: &str = include_str!("../data/Abilene.graphml");

const PERTURB_RETRIES: usize = 200;

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("GraphML format error: {0}")]
    Format(String),
    #[error("topology not connected")]
    NotConnected,
    #[error("default capacity must be positive, got {0}")]
    DefaultCapacity(f64),
    #[error("perturbation must leave at least 3 vertices ({vertices} - {removals} removed)")]
    TooSmall { vertices: usize, removals: usize },
    #[error("could not produce connected perturbation after {0} attempts")]
    PerturbExhausted(usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("node map: {0}")]
    Json(#[from] serde_json::Error),
}

/// Where and how to load a topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub name: String,
    pub source_path: PathBuf,
    pub default_capacity: f64,
    /// Turn every edge into a pair of opposite directed edges, even when the
    /// file declares a directed graph.
    pub undirected_expansion: bool,
    /// Divide every capacity by the largest one so capacities lie in (0, 1].
    pub normalise_capacity: bool,
}

impl TopologySpec {
    pub fn new(name: impl Into<String>, source_path: impl Into<PathBuf>) -> Self {
        Self {
            name: name.into(),
            source_path: source_path.into(),
            default_capacity: 1000.0,
            undirected_expansion: true,
            normalise_capacity: true,
        }
    }
}

/// A loaded network plus the original node labels by dense id.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology<T> {
    pub name: String,
    pub network: Network<T>,
    pub node_names: Vec<String>,
}

impl<T: Scalar> Topology<T> {
    /// Label to dense id map, as written to `<name>.nodemap.json`.
    pub fn node_map(&self) -> BTreeMap<String, VertexId> {
        self.node_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect()
    }

    pub fn write_node_map(&self, dir: &Path) -> Result<PathBuf, TopologyError> {
        let path = dir.join(format!("{}.nodemap.json", self.name));
        let text = serde_json::to_string_pretty(&self.node_map())?;
        std::fs::write(&path, text).map_err(|source| TopologyError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }
}

pub fn load_graphml<T: Scalar>(spec: &TopologySpec) -> Result<Topology<T>, TopologyError> {
    let text = std::fs::read_to_string(&spec.source_path).map_err(|source| TopologyError::Io {
        path: spec.source_path.clone(),
        source,
    })?;
    parse_graphml(&text, spec)
}

/// The bundled Abilene topology with normalised capacities.
pub fn abilene<T: Scalar>() -> Topology<T> {
    parse_graphml(
        ABILENE_GRAPHML,
        &TopologySpec::new("Abilene", "Abilene.graphml"),
    )
    .expect("bundled Abilene GraphML is valid")
}

fn unit_multiplier(units: &str) -> Option<f64> {
    match units.trim() {
        "" => Some(1.0),
        "K" | "k" => Some(1e3),
        "M" => Some(1e6),
        "G" => Some(1e9),
        "T" => Some(1e12),
        _ => None,
    }
}

pub fn parse_graphml<T: Scalar>(
    text: &str,
    spec: &TopologySpec,
) -> Result<Topology<T>, TopologyError> {
    if !(spec.default_capacity > 0.0) || !spec.default_capacity.is_finite() {
        return Err(TopologyError::DefaultCapacity(spec.default_capacity));
    }
    let doc = roxmltree::Document::parse(text).map_err(|e| TopologyError::Format(e.to_string()))?;
    let position = |node: roxmltree::Node| {
        let p = doc.text_pos_at(node.range().start);
        format!("line {}", p.row)
    };

    let root = doc.root_element();
    let mut keys: HashMap<String, String> = HashMap::new();
    for key in root.children().filter(|n| n.has_tag_name("key")) {
        if let (Some(id), Some(name)) = (key.attribute("id"), key.attribute("attr.name")) {
            keys.insert(id.to_string(), name.to_string());
        }
    }
    let graph = root
        .children()
        .find(|n| n.has_tag_name("graph"))
        .ok_or_else(|| TopologyError::Format("no <graph> element".into()))?;
    let directed_default = graph.attribute("edgedefault") == Some("directed");

    let data_of = |node: roxmltree::Node| -> HashMap<String, String> {
        node.children()
            .filter(|c| c.has_tag_name("data"))
            .filter_map(|c| {
                let key = c.attribute("key")?;
                let name = keys.get(key).cloned().unwrap_or_else(|| key.to_string());
                Some((name, c.text().unwrap_or("").trim().to_string()))
            })
            .collect()
    };

    let mut ids: HashMap<String, VertexId> = HashMap::new();
    let mut names: Vec<String> = Vec::new();
    for node in graph.children().filter(|n| n.has_tag_name("node")) {
        let id = node.attribute("id").ok_or_else(|| {
            TopologyError::Format(format!("node without id at {}", position(node)))
        })?;
        if ids.contains_key(id) {
            return Err(TopologyError::Format(format!(
                "duplicate node id {id:?} at {}",
                position(node)
            )));
        }
        let label = data_of(node).remove("label").filter(|l| !l.is_empty());
        ids.insert(id.to_string(), names.len());
        names.push(label.unwrap_or_else(|| id.to_string()));
    }
    // labels must be unique for the name map; fall back to the raw id
    let mut seen: HashMap<String, usize> = HashMap::new();
    for n in &names {
        *seen.entry(n.clone()).or_default() += 1;
    }
    let raw_ids: BTreeMap<VertexId, String> = ids.iter().map(|(k, &v)| (v, k.clone())).collect();
    for (i, n) in names.iter_mut().enumerate() {
        if seen[n.as_str()] > 1 {
            *n = format!("{n} [{}]", raw_ids[&i]);
        }
    }

    let mut capacity: BTreeMap<(VertexId, VertexId), f64> = BTreeMap::new();
    for edge in graph.children().filter(|n| n.has_tag_name("edge")) {
        let endpoint = |attr: &str| -> Result<VertexId, TopologyError> {
            let raw = edge.attribute(attr).ok_or_else(|| {
                TopologyError::Format(format!("edge without {attr} at {}", position(edge)))
            })?;
            ids.get(raw).copied().ok_or_else(|| {
                TopologyError::Format(format!(
                    "edge references unknown node {raw:?} at {}",
                    position(edge)
                ))
            })
        };
        let (a, b) = (endpoint("source")?, endpoint("target")?);
        if a == b {
            log::warn!("skipping self-loop on {} at {}", names[a], position(edge));
            continue;
        }
        let data = data_of(edge);
        let raw = data.get("LinkSpeedRaw").and_then(|s| s.parse::<f64>().ok());
        let speed = data.get("LinkSpeed").and_then(|s| {
            let mult = unit_multiplier(data.get("LinkSpeedUnits").map_or("", String::as_str))?;
            s.parse::<f64>().ok().map(|v| v * mult)
        });
        let cap = raw
            .or(speed)
            .filter(|c| *c > 0.0 && c.is_finite())
            .unwrap_or(spec.default_capacity);
        let directed = match edge.attribute("directed") {
            Some(d) => d == "true",
            None => directed_default,
        };
        *capacity.entry((a, b)).or_default() += cap;
        if spec.undirected_expansion || !directed {
            *capacity.entry((b, a)).or_default() += cap;
        }
    }

    let mut network = Network::new(
        names.len(),
        capacity.into_iter().map(|((a, b), c)| (a, b, T::of(c))),
    )?;
    if !network.is_strongly_connected() {
        return Err(TopologyError::NotConnected);
    }
    if spec.normalise_capacity {
        network = network.scale_capacities(network.max_capacity())?;
    }
    Ok(Topology {
        name: spec.name.clone(),
        network,
        node_names: names,
    })
}

/// Random structural edits applied by [`perturb_topology`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbOps {
    #[serde(default)]
    pub add_nodes: usize,
    #[serde(default)]
    pub remove_nodes: usize,
    #[serde(default)]
    pub add_edges: usize,
    #[serde(default)]
    pub remove_edges: usize,
    /// Capacity of added links; the network's largest capacity when absent.
    #[serde(default)]
    pub capacity: Option<f64>,
}

impl PerturbOps {
    pub fn is_identity(&self) -> bool {
        self.add_nodes + self.remove_nodes + self.add_edges + self.remove_edges == 0
    }
}

/// Applies random node/edge removals then additions; added links are
/// bidirectional. Retries with the same RNG stream until the result is
/// strongly connected.
pub fn perturb_topology<T: Scalar>(
    net: &Network<T>,
    ops: &PerturbOps,
    seed: u64,
) -> Result<Network<T>, TopologyError> {
    if !net.is_strongly_connected() {
        return Err(TopologyError::NotConnected);
    }
    if net.vertex_count() < ops.remove_nodes + 3 {
        return Err(TopologyError::TooSmall {
            vertices: net.vertex_count(),
            removals: ops.remove_nodes,
        });
    }
    if ops.is_identity() {
        return Ok(net.clone());
    }
    let new_cap = ops
        .capacity
        .map(T::of)
        .unwrap_or_else(|| net.max_capacity());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..PERTURB_RETRIES {
        if let Some(candidate) = try_perturb(net, ops, new_cap, &mut rng) {
            if candidate.is_strongly_connected() {
                return Ok(candidate);
            }
        }
    }
    Err(TopologyError::PerturbExhausted(PERTURB_RETRIES))
}

fn try_perturb<T: Scalar>(
    net: &Network<T>,
    ops: &PerturbOps,
    cap: T,
    rng: &mut ChaCha8Rng,
) -> Option<Network<T>> {
    let mut n = net.vertex_count();
    let mut edges: BTreeMap<(VertexId, VertexId), T> = net
        .edges()
        .iter()
        .enumerate()
        .map(|(e, &k)| (k, net.capacity(e)))
        .collect();

    for _ in 0..ops.remove_nodes {
        let victim = rng.gen_range(0..n);
        let relabel = |v: VertexId| if v > victim { v - 1 } else { v };
        edges = edges
            .into_iter()
            .filter(|&((a, b), _)| a != victim && b != victim)
            .map(|((a, b), c)| ((relabel(a), relabel(b)), c))
            .collect();
        n -= 1;
    }
    for _ in 0..ops.remove_edges {
        let links = undirected_links(&edges);
        let &(a, b) = links.choose(rng)?;
        edges.remove(&(a, b));
        edges.remove(&(b, a));
    }
    for _ in 0..ops.add_nodes {
        let v = n;
        n += 1;
        let picks: Vec<VertexId> = rand::seq::index::sample(rng, v, 2.min(v))
            .into_iter()
            .collect();
        for u in picks {
            edges.insert((v, u), cap);
            edges.insert((u, v), cap);
        }
    }
    for _ in 0..ops.add_edges {
        let absent: Vec<(VertexId, VertexId)> = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .filter(|&(a, b)| !edges.contains_key(&(a, b)) && !edges.contains_key(&(b, a)))
            .collect();
        let &(a, b) = absent.choose(rng)?;
        edges.insert((a, b), cap);
        edges.insert((b, a), cap);
    }
    Network::new(n, edges.into_iter().map(|((a, b), c)| (a, b, c))).ok()
}

fn undirected_links<T>(edges: &BTreeMap<(VertexId, VertexId), T>) -> Vec<(VertexId, VertexId)> {
    let mut links: Vec<(VertexId, VertexId)> =
        edges.keys().map(|&(a, b)| (a.min(b), a.max(b))).collect();
    links.dedup();
    links.sort_unstable();
    links.dedup();
    links
}
