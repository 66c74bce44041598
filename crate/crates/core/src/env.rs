//! Step-based routing environment.
//!
//! An episode walks one demand sequence. At scored timestep `t` the policy
//! sees matrices `t-n .. t` and its routing is scored on matrix `t`, which it
//! has not observed. Reward is `-u_agent / u_optimal`.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demand::{
    gen_cyclical_sequence, BimodalParams, DemandError, DemandMatrix, DemandSequence,
};
use crate::graph::{simulate_routing, GraphError, Network, Routing, VertexId};
use crate::lp::{solve_optimal_umax, LpError, LpStatus};
use crate::policy::{
    build_observation_gnn, build_observation_mlp, decode_action_to_weights, iterative_edge_tuples,
    ActionDecoding, Observation, PolicyError, PolicyKind,
};
use crate::softmin::{softmin_routing, EdgeWeights, RoutingError};

/// Tolerance on `u_agent >= u_optimal` before a step counts as a violation.
pub const ORACLE_BOUND_TOL: f64 = 1e-6;

static BOUND_VIOLATIONS: AtomicUsize = AtomicUsize::new(0);
static SCORED_STEPS: AtomicUsize = AtomicUsize::new(0);

/// Process-wide `(violations, scored steps)`: steps whose routing beat the LP
/// optimum by more than [`ORACLE_BOUND_TOL`], out of all scored steps.
pub fn oracle_bound_audit() -> (usize, usize) {
    (
        BOUND_VIOLATIONS.load(Ordering::Relaxed),
        SCORED_STEPS.load(Ordering::Relaxed),
    )
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("step called after the episode finished")]
    StepAfterDone,
    #[error("step called before reset")]
    NotReset,
    #[error("action has {got} values, expected {expected}")]
    ActionSize { expected: usize, got: usize },
    #[error("LP oracle for {scenario} matrix {index} ended {status:?}")]
    Oracle {
        scenario: String,
        index: usize,
        status: LpStatus,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Demand(#[from] DemandError),
}

/// Episode and data-generation settings shared by every scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// History length `n`.
    pub memory_length: usize,
    /// Cycle length `q` of the generated sequences.
    pub cycle_length: usize,
    /// Matrices per sequence, `L`.
    pub sequence_length: usize,
    pub bimodal: BimodalParams,
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub decoding: ActionDecoding,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            memory_length: 5,
            cycle_length: 10,
            sequence_length: 60,
            bimodal: BimodalParams::default(),
            train_sequences: 7,
            test_sequences: 3,
            decoding: ActionDecoding::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.memory_length == 0 {
            return Err(EnvError::Config("memory_length must be at least 1".into()));
        }
        if self.sequence_length <= self.memory_length {
            return Err(EnvError::Config(format!(
                "sequence_length ({}) must exceed memory_length ({})",
                self.sequence_length, self.memory_length
            )));
        }
        if self.cycle_length == 0 {
            return Err(EnvError::Config("cycle_length must be at least 1".into()));
        }
        self.bimodal.validate()?;
        self.decoding.validate().map_err(EnvError::Config)?;
        Ok(())
    }
}

/// Generates `train + test` cyclical sequences for a `v_count`-vertex graph,
/// train sequences first.
pub fn generate_sequences(
    v_count: usize,
    cfg: &EnvConfig,
    seed: u64,
) -> Result<Vec<DemandSequence<f64>>, EnvError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.train_sequences + cfg.test_sequences)
        .map(|_| {
            gen_cyclical_sequence(
                v_count,
                &cfg.bimodal,
                cfg.cycle_length,
                cfg.sequence_length,
                &mut rng,
            )
            .map_err(EnvError::from)
        })
        .collect()
}

/// Every flow on its minimum-hop path; ties go to the lower next-hop id.
pub fn shortest_path_routing(
    net: &Network<f64>,
    demands: &DemandMatrix<f64>,
) -> Result<Routing<f64>, RoutingError> {
    let unit = vec![1.0; net.edge_count()];
    let mut routing = Routing::new(net.edge_count());
    let mut dist_cache: HashMap<VertexId, Vec<Option<f64>>> = HashMap::new();
    for flow in demands.flows() {
        let (s, t) = (flow.source, flow.sink);
        let dist = dist_cache
            .entry(t)
            .or_insert_with(|| net.distances_to(&unit, t, |_| true));
        if dist[s].is_none() {
            return Err(RoutingError::NoPath(s, t));
        }
        let mut ratios = vec![0.0; net.edge_count()];
        let mut v = s;
        while v != t {
            let here = dist[v].expect("on a path to the sink");
            let e = net
                .out_edges(v)
                .iter()
                .copied()
                .find(|&e| dist[net.edge(e).1].is_some_and(|d| d == here - 1.0))
                .expect("a hop towards the sink exists");
            ratios[e] = 1.0;
            v = net.edge(e).1;
        }
        routing.insert(s, t, ratios)?;
    }
    Ok(routing)
}

/// One demand sequence with its per-matrix oracle and baseline values.
#[derive(Debug, Clone)]
pub struct SequenceData {
    pub id: usize,
    pub sequence: DemandSequence<f64>,
    /// LP optimum per matrix index.
    pub optimal: Vec<f64>,
    /// Shortest-path max utilisation per matrix index.
    pub shortest: Vec<f64>,
}

/// A topology with its train and test sequences.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub network: Network<f64>,
    pub train: Vec<SequenceData>,
    pub test: Vec<SequenceData>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Scenario {
    /// Generates sequences per `cfg` and solves the oracle for every distinct matrix.
    pub fn generate(
        name: &str,
        network: Network<f64>,
        cfg: &EnvConfig,
        seed: u64,
    ) -> Result<Self, EnvError> {
        let mut sequences = generate_sequences(network.vertex_count(), cfg, seed)?;
        let test = sequences.split_off(cfg.train_sequences);
        Self::from_sequences(name, network, sequences, test)
    }

    pub fn from_sequences(
        name: &str,
        network: Network<f64>,
        train: Vec<DemandSequence<f64>>,
        test: Vec<DemandSequence<f64>>,
    ) -> Result<Self, EnvError> {
        let mut cache: HashMap<Vec<u64>, (f64, f64)> = HashMap::new();
        let mut annotate = |id: usize,
                            sequence: DemandSequence<f64>|
         -> Result<SequenceData, EnvError> {
            if sequence.v_count() != network.vertex_count() {
                return Err(EnvError::Config(format!(
                    "sequence {id} is for {} vertices, {name} has {}",
                    sequence.v_count(),
                    network.vertex_count()
                )));
            }
            let mut optimal = Vec::with_capacity(sequence.len());
            let mut shortest = Vec::with_capacity(sequence.len());
            for (index, dm) in sequence.matrices.iter().enumerate() {
                let key: Vec<u64> = dm.entries().iter().map(|x| x.to_bits()).collect();
                let (opt, sp) = match cache.get(&key) {
                    Some(&v) => v,
                    None => {
                        let sol = solve_optimal_umax(&network, dm)?;
                        if sol.status != LpStatus::Optimal {
                            return Err(EnvError::Oracle {
                                scenario: name.to_string(),
                                index,
                                status: sol.status,
                            });
                        }
                        let sp =
                            simulate_routing(&network, dm, &shortest_path_routing(&network, dm)?)?
                                .u_max;
                        cache.insert(key, (sol.u_max_optimal, sp));
                        (sol.u_max_optimal, sp)
                    }
                };
                optimal.push(opt);
                shortest.push(sp);
            }
            Ok(SequenceData {
                id,
                sequence,
                optimal,
                shortest,
            })
        };
        let n_train = train.len();
        let train = train
            .into_iter()
            .enumerate()
            .map(|(i, s)| annotate(i, s))
            .collect::<Result<Vec<_>, _>>()?;
        let test = test
            .into_iter()
            .enumerate()
            .map(|(i, s)| annotate(n_train + i, s))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            name: name.to_string(),
            network,
            train,
            test,
        })
    }

    pub fn sequences(&self, split: Split) -> &[SequenceData] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

/// Diagnostics attached to every step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    /// Index of the matrix being (or just) scored.
    pub timestep: usize,
    pub u_max_agent: Option<f64>,
    pub u_max_optimal: Option<f64>,
    /// Edge set this step in iterative mode.
    pub iteration: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone)]
struct Episode {
    scenario: usize,
    split: Split,
    sequence: usize,
    t: usize,
    iteration: usize,
    values: Vec<Option<f64>>,
    done: bool,
}

/// Gym-style environment over one or more scenarios.
#[derive(Debug, Clone)]
pub struct Env {
    scenarios: Vec<Arc<Scenario>>,
    cfg: EnvConfig,
    kind: PolicyKind,
    episode: Option<Episode>,
}

impl Env {
    pub fn new(
        scenarios: Vec<Arc<Scenario>>,
        cfg: EnvConfig,
        kind: PolicyKind,
    ) -> Result<Self, EnvError> {
        cfg.validate()?;
        if scenarios.is_empty() {
            return Err(EnvError::Config("no scenarios".into()));
        }
        for s in &scenarios {
            if let Some(seq) = s
                .train
                .iter()
                .chain(&s.test)
                .find(|d| d.sequence.len() <= cfg.memory_length)
            {
                return Err(EnvError::Config(format!(
                    "{} sequence {} has {} matrices, memory length is {}",
                    s.name,
                    seq.id,
                    seq.sequence.len(),
                    cfg.memory_length
                )));
            }
        }
        Ok(Self {
            scenarios,
            cfg,
            kind,
            episode: None,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn scenarios(&self) -> &[Arc<Scenario>] {
        &self.scenarios
    }

    /// Network of the current episode.
    pub fn network(&self) -> &Network<f64> {
        let i = self.episode.as_ref().map_or(0, |e| e.scenario);
        &self.scenarios[i].network
    }

    /// Scenario, split and sequence index of the current episode.
    pub fn current(&self) -> Option<(usize, Split, usize)> {
        self.episode
            .as_ref()
            .map(|e| (e.scenario, e.split, e.sequence))
    }

    /// Starts a training episode on a scenario and sequence drawn from `seed`.
    pub fn reset(&mut self, seed: u64) -> Result<Observation, EnvError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scenario = rng.gen_range(0..self.scenarios.len());
        let count = self.scenarios[scenario].train.len();
        if count == 0 {
            return Err(EnvError::Config(format!(
                "{} has no training sequences",
                self.scenarios[scenario].name
            )));
        }
        let sequence = rng.gen_range(0..count);
        self.reset_to(scenario, Split::Train, sequence)
    }

    pub fn reset_to(
        &mut self,
        scenario: usize,
        split: Split,
        sequence: usize,
    ) -> Result<Observation, EnvError> {
        let scn = self
            .scenarios
            .get(scenario)
            .ok_or_else(|| EnvError::Config(format!("no scenario {scenario}")))?;
        if sequence >= scn.sequences(split).len() {
            return Err(EnvError::Config(format!(
                "{} has no {split:?} sequence {sequence}",
                scn.name
            )));
        }
        let mut episode = Episode {
            scenario,
            split,
            sequence,
            t: self.cfg.memory_length,
            iteration: 0,
            values: vec![None; scn.network.edge_count()],
            done: false,
        };
        skip_unscorable(&mut episode, &scn.sequences(split)[sequence]);
        self.episode = Some(episode);
        self.observation()
    }

    fn data(&self, e: &Episode) -> &SequenceData {
        &self.scenarios[e.scenario].sequences(e.split)[e.sequence]
    }

    /// Observation for the current state.
    pub fn observation(&self) -> Result<Observation, EnvError> {
        let e = self.episode.as_ref().ok_or(EnvError::NotReset)?;
        let data = self.data(e);
        let t = e.t.min(data.sequence.len());
        let history = &data.sequence.matrices[t - self.cfg.memory_length..t];
        Ok(match self.kind {
            PolicyKind::Mlp => Observation::Mlp(build_observation_mlp(history)?),
            PolicyKind::Gnn => Observation::Gnn(build_observation_gnn(history)?),
            PolicyKind::Iterative => Observation::Iterative {
                vertices: build_observation_gnn(history)?,
                edges: iterative_edge_tuples(&e.values, e.iteration.min(e.values.len() - 1))?,
            },
        })
    }

    /// Demand matrix the next routing will be scored on.
    pub fn scored_matrix(&self) -> Result<&DemandMatrix<f64>, EnvError> {
        let e = self.episode.as_ref().ok_or(EnvError::NotReset)?;
        if e.done {
            return Err(EnvError::StepAfterDone);
        }
        Ok(&self.data(e).sequence.matrices[e.t])
    }

    /// Number of step calls that score one timestep.
    pub fn steps_per_timestep(&self) -> usize {
        match self.kind {
            PolicyKind::Iterative => self.network().edge_count(),
            _ => 1,
        }
    }

    /// Applies a squashed action in `[-1, 1]`.
    pub fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        let e = self.episode.as_ref().ok_or(EnvError::NotReset)?;
        if e.done {
            return Err(EnvError::StepAfterDone);
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(PolicyError::NonFiniteAction.into());
        }
        let net = &self.scenarios[e.scenario].network;
        let decoding = self.cfg.decoding;
        match self.kind {
            PolicyKind::Iterative => {
                if action.len() != 2 {
                    return Err(EnvError::ActionSize {
                        expected: 2,
                        got: action.len(),
                    });
                }
                let edge_count = net.edge_count();
                let e = self.episode.as_mut().expect("checked above");
                let iteration = e.iteration;
                e.values[iteration] = Some(action[0].clamp(-1.0, 1.0));
                if iteration + 1 < edge_count {
                    e.iteration += 1;
                    let timestep = e.t;
                    return Ok(StepResult {
                        observation: self.observation()?,
                        reward: 0.0,
                        done: false,
                        info: StepInfo {
                            timestep,
                            u_max_agent: None,
                            u_max_optimal: None,
                            iteration: Some(iteration),
                        },
                    });
                }
                let raw: Vec<f64> = e.values.iter().map(|v| v.expect("all edges set")).collect();
                let weights = decode_action_to_weights(&raw, &decoding)?;
                let gamma = decoding.gamma_from_raw(action[1])?;
                let mut result = self.score_weights(&weights, gamma)?;
                result.info.iteration = Some(iteration);
                Ok(result)
            }
            _ => {
                if action.len() != net.edge_count() {
                    return Err(EnvError::ActionSize {
                        expected: net.edge_count(),
                        got: action.len(),
                    });
                }
                let weights = decode_action_to_weights(action, &decoding)?;
                self.score_weights(&weights, decoding.gamma)
            }
        }
    }

    fn score_weights(
        &mut self,
        weights: &EdgeWeights<f64>,
        gamma: f64,
    ) -> Result<StepResult, EnvError> {
        let dm = self.scored_matrix()?;
        let routing = softmin_routing(self.network(), weights, gamma, dm)?;
        self.step_with_routing(&routing)
    }

    /// Scores an externally built routing for the current timestep.
    pub fn step_with_routing(&mut self, routing: &Routing<f64>) -> Result<StepResult, EnvError> {
        let dm = self.scored_matrix()?;
        let net = self.network();
        routing.validate(net)?;
        let u_agent = simulate_routing(net, dm, routing)?.u_max;
        let e = self
            .episode
            .as_ref()
            .expect("scored_matrix checked the episode");
        let timestep = e.t;
        let u_opt = self.data(e).optimal[timestep];
        let reward = -u_agent / u_opt;
        SCORED_STEPS.fetch_add(1, Ordering::Relaxed);
        if u_agent < u_opt - ORACLE_BOUND_TOL {
            BOUND_VIOLATIONS.fetch_add(1, Ordering::Relaxed);
            log::warn!("routing beat the LP optimum: {u_agent} < {u_opt}");
        }
        let e = self.episode.as_mut().expect("present");
        let data = &self.scenarios[e.scenario].sequences(e.split)[e.sequence];
        e.t += 1;
        e.iteration = 0;
        e.values.iter_mut().for_each(|v| *v = None);
        skip_unscorable(e, data);
        let done = e.done;
        Ok(StepResult {
            observation: self.observation()?,
            reward,
            done,
            info: StepInfo {
                timestep,
                u_max_agent: Some(u_agent),
                u_max_optimal: Some(u_opt),
                iteration: None,
            },
        })
    }
}

/// Advances past matrices whose optimum is zero; marks the episode done at the end.
fn skip_unscorable(e: &mut Episode, data: &SequenceData) {
    while e.t < data.sequence.len() && data.optimal[e.t] <= 0.0 {
        e.t += 1;
    }
    e.done = e.t >= data.sequence.len();
}
