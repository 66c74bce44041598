//! Policy architectures: flat MLP, single-shot GNN and iterative GNN.
//!
//! Every policy maps an [`Observation`] to an action mean and a value
//! estimate. Sampling, squashing and log-probabilities belong to the trainer.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demand::DemandMatrix;
use crate::graph::Network;
use crate::nn::{
    load_checkpoint, save_checkpoint, EncodeProcessDecode, GnNodes, GnnConfig, Matrix, Mlp,
    NnError, NodeId, ParamId, ParamStore, Tape, Widths, Wiring,
};
use crate::softmin::{EdgeWeights, RoutingError};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite action")]
    NonFiniteAction,
    #[error("iterative observation needs exactly one target edge, found {0}")]
    Target(usize),
    #[error("bad policy sidecar: {0}")]
    Sidecar(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyKind {
    #[serde(rename = "mlp")]
    Mlp,
    #[serde(rename = "gnn")]
    Gnn,
    #[serde(rename = "gnn-iter")]
    Iterative,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Mlp => "mlp",
            Self::Gnn => "gnn",
            Self::Iterative => "gnn-iter",
        }
    }

    pub fn is_iterative(self) -> bool {
        self == Self::Iterative
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "gnn" => Ok(Self::Gnn),
            "gnn-iter" => Ok(Self::Iterative),
            other => Err(format!(
                "unknown policy {other:?} (expected mlp, gnn or gnn-iter)"
            )),
        }
    }
}

/// Map from squashed actions in `[-1, 1]` to routing inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActionDecoding {
    pub w_min: f64,
    pub w_max: f64,
    /// Softmin temperature for single-shot policies.
    pub gamma: f64,
    /// Floor added to the softplus of the iterative γ output.
    pub gamma_min: f64,
}

impl Default for ActionDecoding {
    fn default() -> Self {
        Self {
            w_min: 0.01,
            w_max: 2.0,
            gamma: 2.0,
            gamma_min: 0.1,
        }
    }
}

impl ActionDecoding {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.w_min > 0.0 && self.w_max > self.w_min && self.w_max.is_finite()) {
            return Err(format!(
                "need 0 < w_min < w_max, got {} and {}",
                self.w_min, self.w_max
            ));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.gamma_min > 0.0 && self.gamma_min.is_finite()) {
            return Err(format!(
                "gamma_min must be positive, got {}",
                self.gamma_min
            ));
        }
        Ok(())
    }

    /// `w_min + (a+1)/2 (w_max - w_min)` with `a` clamped to `[-1, 1]`.
    pub fn weight(&self, a: f64) -> Result<f64, PolicyError> {
        if !a.is_finite() {
            return Err(PolicyError::NonFiniteAction);
        }
        let a = a.clamp(-1.0, 1.0);
        Ok(self.w_min + (a + 1.0) / 2.0 * (self.w_max - self.w_min))
    }

    /// `ln(1 + e^g) + gamma_min`.
    pub fn gamma_from_raw(&self, g: f64) -> Result<f64, PolicyError> {
        if !g.is_finite() {
            return Err(PolicyError::NonFiniteAction);
        }
        let softplus = if g > 30.0 { g } else { g.exp().ln_1p() };
        Ok(softplus + self.gamma_min)
    }
}

/// Decodes a single-shot action into edge weights.
pub fn decode_action_to_weights(
    action: &[f64],
    decoding: &ActionDecoding,
) -> Result<EdgeWeights<f64>, PolicyError> {
    let weights = action
        .iter()
        .map(|&a| decoding.weight(a))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EdgeWeights::new(weights)?)
}

/// Policy input for one decision.
#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    /// Flattened, per-step normalised history of `n · |V|²` values.
    Mlp(Vec<f64>),
    /// `|V| × 2n` vertex features.
    Gnn(Matrix<f64>),
    /// Vertex features plus `|E| × 3` edge tuples `(weight, set, target)`.
    Iterative {
        vertices: Matrix<f64>,
        edges: Matrix<f64>,
    },
}

fn check_history(history: &[DemandMatrix<f64>]) -> Result<usize, PolicyError> {
    let first = history
        .first()
        .ok_or_else(|| PolicyError::Shape("empty demand history".into()))?;
    let size = first.size();
    if let Some(m) = history.iter().find(|m| m.size() != size) {
        return Err(PolicyError::Shape(format!(
            "history mixes {size}x{size} and {0}x{0} matrices",
            m.size()
        )));
    }
    Ok(size)
}

/// Per-vertex `(out-sum, in-sum)` per history step, divided by the step's total.
pub fn build_observation_gnn(history: &[DemandMatrix<f64>]) -> Result<Matrix<f64>, PolicyError> {
    let size = check_history(history)?;
    let mut features = Matrix::zeros(size, 2 * history.len());
    for (s, dm) in history.iter().enumerate() {
        let total = dm.total();
        if total <= 0.0 {
            continue;
        }
        for v in 0..size {
            features.set(v, 2 * s, dm.out_sum(v) / total);
            features.set(v, 2 * s + 1, dm.in_sum(v) / total);
        }
    }
    Ok(features)
}

/// Row-major concatenation of the history, each matrix divided by its total.
pub fn build_observation_mlp(history: &[DemandMatrix<f64>]) -> Result<Vec<f64>, PolicyError> {
    check_history(history)?;
    let mut flat = Vec::new();
    for dm in history {
        let total = dm.total();
        flat.extend(
            dm.entries()
                .iter()
                .map(|&x| if total > 0.0 { x / total } else { 0.0 }),
        );
    }
    Ok(flat)
}

/// Edge tuples for the iterative policy. `values[e]` is `Some(a)` once set.
pub fn iterative_edge_tuples(
    values: &[Option<f64>],
    target: usize,
) -> Result<Matrix<f64>, PolicyError> {
    if target >= values.len() {
        return Err(PolicyError::Target(0));
    }
    Ok(Matrix::from_fn(values.len(), 3, |e, c| match c {
        0 => values[e].unwrap_or(0.0),
        1 => f64::from(u8::from(values[e].is_some())),
        _ => f64::from(u8::from(e == target)),
    }))
}

/// Architecture description saved next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    /// History length `n` the policy consumes.
    pub memory_length: usize,
    pub mlp_hidden: Vec<usize>,
    pub gnn: GnnConfig,
    /// Initial (or fixed) log standard deviation of the action noise.
    pub log_std_init: f64,
    pub learn_log_std: bool,
    /// `(|V|, |E|)` an MLP policy was built for.
    pub topology_size: Option<(usize, usize)>,
}

impl Default for PolicySpec {
    fn default() -> Self {
        Self {
            kind: PolicyKind::Gnn,
            memory_length: 5,
            mlp_hidden: vec![64, 64],
            gnn: GnnConfig::default(),
            log_std_init: -0.5,
            learn_log_std: false,
            topology_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)] // one per policy, never moved in bulk
enum Body {
    Mlp(Mlp),
    Graph(EncodeProcessDecode),
}

/// Locations of the action mean and value inside recorded tape nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heads {
    pub mean: NodeId,
    pub mean_offset: usize,
    pub mean_len: usize,
    pub value: NodeId,
    pub value_offset: usize,
}

impl Heads {
    pub fn mean(&self, tape: &Tape<'_, f64>) -> Vec<f64> {
        tape.value(self.mean).as_slice()[self.mean_offset..self.mean_offset + self.mean_len]
            .to_vec()
    }

    pub fn value(&self, tape: &Tape<'_, f64>) -> f64 {
        tape.value(self.value).as_slice()[self.value_offset]
    }

    /// Backward seeds for `dL/dmean` and `dL/dvalue`.
    pub fn seeds(
        &self,
        tape: &Tape<'_, f64>,
        d_mean: &[f64],
        d_value: f64,
    ) -> Vec<(NodeId, Matrix<f64>)> {
        let (r, c) = tape.shape(self.mean);
        let mut mean_seed = Matrix::zeros(r, c);
        mean_seed.as_mut_slice()[self.mean_offset..self.mean_offset + self.mean_len]
            .copy_from_slice(d_mean);
        if self.value == self.mean {
            mean_seed.as_mut_slice()[self.value_offset] += d_value;
            return vec![(self.mean, mean_seed)];
        }
        let (r, c) = tape.shape(self.value);
        let mut value_seed = Matrix::zeros(r, c);
        value_seed.as_mut_slice()[self.value_offset] = d_value;
        vec![(self.mean, mean_seed), (self.value, value_seed)]
    }
}

/// Deterministic policy output.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub mean: Vec<f64>,
    pub value: f64,
}

/// A policy network and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub spec: PolicySpec,
    pub params: ParamStore<f64>,
    body: Body,
    log_std: Option<ParamId>,
}

const EDGE_IN_GNN: usize = 1;
const EDGE_IN_ITER: usize = 3;

impl Policy {
    /// Builds a freshly initialised policy. `net` fixes the MLP's sizes and is
    /// otherwise only used for validation.
    pub fn new(mut spec: PolicySpec, net: &Network<f64>, seed: u64) -> Result<Self, PolicyError> {
        if spec.memory_length == 0 {
            return Err(PolicyError::Shape(
                "memory length must be at least 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let n = spec.memory_length;
        let body = match spec.kind {
            PolicyKind::Mlp => {
                let (v, e) = (net.vertex_count(), net.edge_count());
                spec.topology_size = Some((v, e));
                let mut widths = vec![n * v * v];
                widths.extend_from_slice(&spec.mlp_hidden);
                widths.push(e + 1);
                Body::Mlp(Mlp::new(&mut params, "mlp", &widths, false, &mut rng)?)
            }
            PolicyKind::Gnn | PolicyKind::Iterative => {
                spec.topology_size = None;
                let (input, output) = graph_widths(spec.kind, n);
                Body::Graph(EncodeProcessDecode::new(
                    &mut params,
                    "gnn",
                    input,
                    output,
                    &spec.gnn,
                    &mut rng,
                )?)
            }
        };
        let log_std = if spec.learn_log_std {
            let id = params.add("log_std", 1, 1)?;
            params.slice_mut(id)[0] = spec.log_std_init;
            Some(id)
        } else {
            None
        };
        Ok(Self {
            spec,
            params,
            body,
            log_std,
        })
    }

    pub fn kind(&self) -> PolicyKind {
        self.spec.kind
    }

    pub fn log_std(&self) -> f64 {
        match self.log_std {
            Some(id) => self.params.slice(id)[0],
            None => self.spec.log_std_init,
        }
    }

    /// Offset of the learned log-std inside the flat parameters.
    pub fn log_std_offset(&self) -> Option<usize> {
        self.log_std.map(|id| self.params.entry(id).offset)
    }

    /// Dimension of the action the trainer samples for `net`.
    pub fn action_dim(&self, net: &Network<f64>) -> usize {
        match self.spec.kind {
            PolicyKind::Iterative => 2,
            _ => net.edge_count(),
        }
    }

    /// Records the forward pass on `tape`, which must be built over `self.params`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<'_, f64>,
        obs: &Observation,
        net: &Network<f64>,
    ) -> Result<Heads, PolicyError> {
        match (&self.body, obs) {
            (Body::Mlp(mlp), Observation::Mlp(x)) => {
                let (v, e) = self.spec.topology_size.unwrap_or((0, 0));
                if net.vertex_count() != v || net.edge_count() != e || x.len() != mlp.input_width()
                {
                    return Err(PolicyError::Shape(format!(
                        "MLP policy was built for |V|={v}, |E|={e}; got |V|={}, |E|={} and {} inputs",
                        net.vertex_count(),
                        net.edge_count(),
                        x.len()
                    )));
                }
                let xn = tape.input(Matrix::row_vector(x.clone()));
                let out = mlp.forward(tape, xn)?;
                Ok(Heads {
                    mean: out,
                    mean_offset: 0,
                    mean_len: e,
                    value: out,
                    value_offset: e,
                })
            }
            (Body::Graph(model), Observation::Gnn(vertices))
                if self.spec.kind == PolicyKind::Gnn =>
            {
                let edges = Matrix::from_fn(net.edge_count(), EDGE_IN_GNN, |_, _| 1.0);
                let out = self.graph_forward(model, tape, vertices, edges, net)?;
                Ok(Heads {
                    mean: out.edges,
                    mean_offset: 0,
                    mean_len: net.edge_count(),
                    value: out.global,
                    value_offset: 0,
                })
            }
            (Body::Graph(model), Observation::Iterative { vertices, edges })
                if self.spec.kind.is_iterative() =>
            {
                let targets = (0..edges.rows())
                    .filter(|&r| edges.cols() == EDGE_IN_ITER && edges.get(r, 2) == 1.0);
                let count = targets.count();
                if count != 1 {
                    return Err(PolicyError::Target(count));
                }
                let out = self.graph_forward(model, tape, vertices, edges.clone(), net)?;
                Ok(Heads {
                    mean: out.global,
                    mean_offset: 0,
                    mean_len: 2,
                    value: out.global,
                    value_offset: 2,
                })
            }
            _ => Err(PolicyError::Shape(format!(
                "{} policy cannot read this observation variant",
                self.spec.kind.name()
            ))),
        }
    }

    fn graph_forward(
        &self,
        model: &EncodeProcessDecode,
        tape: &mut Tape<'_, f64>,
        vertices: &Matrix<f64>,
        edges: Matrix<f64>,
        net: &Network<f64>,
    ) -> Result<GnNodes, PolicyError> {
        if vertices.rows() != net.vertex_count() || edges.rows() != net.edge_count() {
            return Err(PolicyError::Shape(format!(
                "observation has {} vertices and {} edges, network {} and {}",
                vertices.rows(),
                edges.rows(),
                net.vertex_count(),
                net.edge_count()
            )));
        }
        let senders: Vec<usize> = net.edges().iter().map(|&(t, _)| t).collect();
        let receivers: Vec<usize> = net.edges().iter().map(|&(_, h)| h).collect();
        let nodes = GnNodes {
            global: tape.input(Matrix::row_vector(vec![1.0])),
            vertices: tape.input(vertices.clone()),
            edges: tape.input(edges),
        };
        let wiring = Wiring {
            vertex_count: net.vertex_count(),
            senders: &senders,
            receivers: &receivers,
        };
        Ok(model.forward(tape, nodes, wiring)?)
    }

    pub fn forward(
        &self,
        obs: &Observation,
        net: &Network<f64>,
    ) -> Result<PolicyOutput, PolicyError> {
        let mut tape = Tape::new(&self.params);
        let heads = self.forward_tape(&mut tape, obs, net)?;
        Ok(PolicyOutput {
            mean: heads.mean(&tape),
            value: heads.value(&tape),
        })
    }

    /// Writes `<name>.manifest.json`, `<name>.params.bin` and `<name>.policy.json`.
    pub fn save(&self, dir: &Path, name: &str) -> Result<(), PolicyError> {
        save_checkpoint(&self.params, dir, name)?;
        let json = serde_json::to_string_pretty(&self.spec)
            .map_err(|e| PolicyError::Sidecar(e.to_string()))?;
        let path = dir.join(format!("{name}.policy.json"));
        fs::write(&path, json + "\n")
            .map_err(|e| PolicyError::Sidecar(format!("{}: {e}", path.display())))
    }

    /// Loads a saved policy; the architecture is rebuilt from the sidecar and
    /// must match the checkpoint manifest exactly.
    pub fn load(dir: &Path, name: &str, net: &Network<f64>) -> Result<Self, PolicyError> {
        let path = dir.join(format!("{name}.policy.json"));
        let text = fs::read_to_string(&path)
            .map_err(|e| PolicyError::Sidecar(format!("{}: {e}", path.display())))?;
        let spec: PolicySpec =
            serde_json::from_str(&text).map_err(|e| PolicyError::Sidecar(e.to_string()))?;
        let params: ParamStore<f64> = load_checkpoint(dir, name)?;
        let build_net = match (spec.kind, spec.topology_size) {
            (PolicyKind::Mlp, Some((v, e))) if (net.vertex_count(), net.edge_count()) != (v, e) => {
                return Err(PolicyError::Shape(format!(
                    "MLP checkpoint is for |V|={v}, |E|={e}, network has |V|={}, |E|={}",
                    net.vertex_count(),
                    net.edge_count()
                )));
            }
            _ => net,
        };
        let mut policy = Self::new(spec, build_net, 0)?;
        if policy.params.manifest() != params.manifest() {
            return Err(PolicyError::Sidecar(
                "checkpoint manifest does not match the sidecar architecture".into(),
            ));
        }
        policy.params = params;
        Ok(policy)
    }
}

fn graph_widths(kind: PolicyKind, n: usize) -> (Widths, Widths) {
    match kind {
        PolicyKind::Iterative => (Widths::new(EDGE_IN_ITER, 2 * n, 1), Widths::new(0, 0, 3)),
        _ => (Widths::new(EDGE_IN_GNN, 2 * n, 1), Widths::new(1, 0, 1)),
    }
}
