//! Command-line driver: demand generation, oracle solves, routing reports,
//! training, evaluation and result merging. Every command writes its resolved
//! config and the tool version next to its outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use telab::demand::DemandSequence;
use telab::env::{Env, EnvConfig, Scenario, Split};
use telab::graph::{simulate_routing, Network};
use telab::lp::{build_umax_lp, solve_optimal_umax, LpStatus};
use telab::nn::GnnConfig;
use telab::policy::{Policy, PolicyKind, PolicySpec};
use telab::softmin::{softmin_routing, EdgeWeights};
use telab::topology::{abilene, load_graphml, perturb_topology, PerturbOps, TopologySpec};
use telab::trainer::{evaluate, EvalReport, PpoConfig, Trainer, UpdateRecord};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const CONFIG_FILE: &str = "resolved_config.toml";
pub const VERSION_FILE: &str = "version.txt";
pub const POLICY_NAME: &str = "policy";

/// Failure classes mapped to process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0:#}")]
    Config(anyhow::Error),
    #[error("runtime error: {0:#}")]
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Runtime(_) => 3,
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        Self::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.into())
    }
}

fn config_err(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Config(e.into())
}

pub type CliResult<T> = Result<T, CliError>;

/// Topology source and optional structural perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologyConfig {
    /// `abilene` for the bundled graph, otherwise a GraphML path.
    pub source: String,
    pub default_capacity: f64,
    pub normalise_capacity: bool,
    pub perturb: Option<PerturbOps>,
    pub perturb_seed: u64,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self {
            source: "abilene".into(),
            default_capacity: 1000.0,
            normalise_capacity: true,
            perturb: None,
            perturb_seed: 0,
        }
    }
}

/// Policy architecture; the history length comes from `env.memory_length`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mlp_hidden: Vec<usize>,
    pub gnn: GnnConfig,
    pub log_std_init: f64,
    pub learn_log_std: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let spec = PolicySpec::default();
        Self {
            mlp_hidden: spec.mlp_hidden,
            gnn: spec.gnn,
            log_std_init: spec.log_std_init,
            learn_log_std: spec.learn_log_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds policy initialisation and training.
    pub seed: u64,
    /// Seeds demand generation.
    pub demand_seed: u64,
    pub policy: PolicyKind,
    pub out: PathBuf,
    /// Checkpoint every this many updates; the final policy is always saved.
    pub checkpoint_every: usize,
    pub topology: TopologyConfig,
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            demand_seed: 0,
            policy: PolicyKind::Gnn,
            out: PathBuf::from("out"),
            checkpoint_every: 10,
            topology: TopologyConfig::default(),
            env: EnvConfig::default(),
            ppo: PpoConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(config_err)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    /// Applies `key.path=value`; the value is read as a TOML literal, falling
    /// back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> CliResult<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| config_err(anyhow!("override {assignment:?} is not key=value")))?;
        let value = parse_literal(raw.trim());
        let mut root = toml::Value::try_from(&*self).map_err(config_err)?;
        let mut slot = &mut root;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = slot.as_table_mut().ok_or_else(|| {
                config_err(anyhow!(
                    "override key {key:?}: {part:?} is not inside a table"
                ))
            })?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            slot = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        *self = root
            .try_into()
            .map_err(|e| config_err(anyhow!("override {key:?}: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        self.env.validate().map_err(config_err)?;
        self.ppo.validate().map_err(config_err)?;
        if self.checkpoint_every == 0 {
            return Err(config_err(anyhow!("checkpoint_every must be positive")));
        }
        Ok(())
    }

    pub fn policy_spec(&self) -> PolicySpec {
        PolicySpec {
            kind: self.policy,
            memory_length: self.env.memory_length,
            mlp_hidden: self.model.mlp_hidden.clone(),
            gnn: self.model.gnn.clone(),
            log_std_init: self.model.log_std_init,
            learn_log_std: self.model.learn_log_std,
            topology_size: None,
        }
    }

    /// Loads and optionally perturbs the configured topology.
    pub fn network(&self) -> CliResult<(String, Network<f64>)> {
        let t = &self.topology;
        let (name, net) = if t.source.eq_ignore_ascii_case("abilene") {
            let topo = abilene::<f64>();
            (topo.name, topo.network)
        } else {
            let path = PathBuf::from(&t.source);
            let name = path
                .file_stem()
                .map_or_else(|| t.source.clone(), |s| s.to_string_lossy().into_owned());
            let spec = TopologySpec {
                default_capacity: t.default_capacity,
                normalise_capacity: t.normalise_capacity,
                ..TopologySpec::new(name.clone(), path)
            };
            (
                name,
                load_graphml::<f64>(&spec).map_err(config_err)?.network,
            )
        };
        match &t.perturb {
            Some(ops) if !ops.is_identity() => {
                let net = perturb_topology(&net, ops, t.perturb_seed)
                    .map_err(|e| CliError::Runtime(e.into()))?;
                Ok((format!("{name}~p{}", t.perturb_seed), net))
            }
            _ => Ok((name, net)),
        }
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<BTreeMap<String, toml::Value>>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut m| m.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[derive(Debug, Parser)]
#[command(name = "telab", version, about = "Traffic-engineering lab")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML run config; defaults apply when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `abilene` or a GraphML path.
    #[arg(long, global = true)]
    pub topology: Option<String>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// mlp, gnn or gnn-iter.
    #[arg(long, global = true)]
    pub policy: Option<String>,
    /// `key.path=value`, applied after the config file and other flags.
    #[arg(long = "override", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write train and test demand sequences plus an index.
    GenDemands,
    /// Solve the optimal max utilisation for every matrix of a sequence.
    Solve {
        /// Sequence JSON written by gen-demands.
        #[arg(long)]
        demands: PathBuf,
        /// Also write one CPLEX-LP file per matrix.
        #[arg(long)]
        lp_dump: bool,
    },
    /// Route a sequence with fixed edge weights and report link loads.
    Route {
        /// JSON array with one weight per directed edge.
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        demands: PathBuf,
        /// Softmin temperature; the config's decoding γ when absent.
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Train a policy and write metrics plus checkpoints.
    Train {
        /// gen-demands output directory to train on instead of regenerating.
        #[arg(long)]
        demands: Option<PathBuf>,
    },
    /// Evaluate a checkpoint deterministically on the test sequences.
    Eval {
        /// Directory holding the checkpoint files.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        demands: Option<PathBuf>,
        /// Evaluate on the training sequences instead.
        #[arg(long)]
        train_split: bool,
    },
    /// Merge evaluation CSVs into one row per (policy, topology).
    Compare {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

/// Resolves file config, then flags, then overrides.
pub fn resolve_config(common: &CommonArgs) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(config_err)?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(t) = &common.topology {
        cfg.topology.source = t.clone();
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(p) = &common.policy {
        cfg.policy = p.parse().map_err(|e: String| config_err(anyhow!(e)))?;
    }
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> CliResult<()> {
    let cfg = resolve_config(&cli.common)?;
    match cli.command {
        Command::GenDemands => cmd_gen_demands(&cfg).map(drop),
        Command::Solve { demands, lp_dump } => cmd_solve(&cfg, &demands, lp_dump).map(drop),
        Command::Route {
            weights,
            demands,
            gamma,
        } => cmd_route(&cfg, &weights, &demands, gamma).map(drop),
        Command::Train { demands } => cmd_train(&cfg, demands.as_deref()).map(drop),
        Command::Eval {
            checkpoint,
            demands,
            train_split,
        } => {
            let split = if train_split {
                Split::Train
            } else {
                Split::Test
            };
            cmd_eval(&cfg, &checkpoint, demands.as_deref(), split).map(drop)
        }
        Command::Compare { inputs } => cmd_compare(&cfg, &inputs).map(drop),
    }
}

/// Creates `dir` and writes the resolved config and version into it.
pub fn prepare_out_dir(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
    fs::write(dir.join(VERSION_FILE), format!("telab {VERSION}\n"))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandIndex {
    pub topology: String,
    pub vertex_count: usize,
    pub demand_seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

pub const INDEX_FILE: &str = "index.json";

/// Writes `seq_XX.json` per sequence and `index.json`; returns the index.
pub fn cmd_gen_demands(cfg: &RunConfig) -> CliResult<DemandIndex> {
    let (name, net) = cfg.network()?;
    let sequences = telab::env::generate_sequences(net.vertex_count(), &cfg.env, cfg.demand_seed)
        .map_err(|e| CliError::Runtime(e.into()))?;
    prepare_out_dir(cfg, &cfg.out)?;
    let mut files = Vec::new();
    for (i, seq) in sequences.iter().enumerate() {
        let file = format!("seq_{i:02}.json");
        let json = seq.to_json().map_err(|e| CliError::Runtime(e.into()))?;
        fs::write(cfg.out.join(&file), json + "\n")?;
        files.push(file);
    }
    let test = files.split_off(cfg.env.train_sequences);
    let index = DemandIndex {
        topology: name,
        vertex_count: net.vertex_count(),
        demand_seed: cfg.demand_seed,
        train: files,
        test,
    };
    let text = serde_json::to_string_pretty(&index).map_err(|e| CliError::Runtime(e.into()))?;
    fs::write(cfg.out.join(INDEX_FILE), text + "\n")?;
    Ok(index)
}

pub fn read_sequence(path: &Path) -> CliResult<DemandSequence<f64>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(config_err)?;
    DemandSequence::from_json(&text).map_err(|e| config_err(anyhow!("{}: {e}", path.display())))
}

/// Train and test sequences.
pub type SplitSequences = (Vec<DemandSequence<f64>>, Vec<DemandSequence<f64>>);

/// Loads train and test sequences listed in a gen-demands index.
pub fn read_demand_dir(dir: &Path) -> CliResult<SplitSequences> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(config_err)?;
    let index: DemandIndex = serde_json::from_str(&text).map_err(config_err)?;
    let load = |files: &[String]| {
        files
            .iter()
            .map(|f| read_sequence(&dir.join(f)))
            .collect::<CliResult<Vec<_>>>()
    };
    Ok((load(&index.train)?, load(&index.test)?))
}

fn check_size(net: &Network<f64>, seq: &DemandSequence<f64>) -> CliResult<()> {
    if seq.v_count() != net.vertex_count() {
        return Err(config_err(anyhow!(
            "demands are for {} vertices, topology has {}",
            seq.v_count(),
            net.vertex_count()
        )));
    }
    Ok(())
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> CliResult<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Runtime(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveRow {
    pub index: usize,
    pub u_max_optimal: f64,
}

/// Writes `solve.csv` and, with `lp_dump`, `lp/matrix_XXX.lp`.
pub fn cmd_solve(cfg: &RunConfig, demands: &Path, lp_dump: bool) -> CliResult<Vec<SolveRow>> {
    let (_, net) = cfg.network()?;
    let seq = read_sequence(demands)?;
    check_size(&net, &seq)?;
    prepare_out_dir(cfg, &cfg.out)?;
    let mut rows = Vec::new();
    for (index, dm) in seq.matrices.iter().enumerate() {
        let sol = solve_optimal_umax(&net, dm).map_err(|e| CliError::Runtime(e.into()))?;
        if sol.status != LpStatus::Optimal {
            return Err(CliError::Runtime(anyhow!(
                "matrix {index}: solver status {:?}",
                sol.status
            )));
        }
        if lp_dump {
            let dir = cfg.out.join("lp");
            fs::create_dir_all(&dir)?;
            let (lp, _) = build_umax_lp(&net, dm).map_err(|e| CliError::Runtime(e.into()))?;
            fs::write(dir.join(format!("matrix_{index:03}.lp")), lp.to_cplex_lp())?;
        }
        rows.push(SolveRow {
            index,
            u_max_optimal: sol.u_max_optimal,
        });
    }
    write_csv(&cfg.out.join("solve.csv"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteRow {
    pub index: usize,
    pub edge: usize,
    pub tail: usize,
    pub head: usize,
    pub utilisation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteSummaryRow {
    pub index: usize,
    pub u_max: f64,
    pub u_max_optimal: f64,
    pub ratio: f64,
}

/// Writes per-link `route.csv` and per-matrix `route_summary.csv`.
pub fn cmd_route(
    cfg: &RunConfig,
    weights: &Path,
    demands: &Path,
    gamma: Option<f64>,
) -> CliResult<Vec<RouteSummaryRow>> {
    let (_, net) = cfg.network()?;
    let text = fs::read_to_string(weights)
        .with_context(|| format!("reading {}", weights.display()))
        .map_err(config_err)?;
    let w: Vec<f64> = serde_json::from_str(&text).map_err(config_err)?;
    if w.len() != net.edge_count() {
        return Err(config_err(anyhow!(
            "{} weights for {} edges",
            w.len(),
            net.edge_count()
        )));
    }
    let w = EdgeWeights::new(w).map_err(config_err)?;
    let gamma = gamma.unwrap_or(cfg.env.decoding.gamma);
    let seq = read_sequence(demands)?;
    check_size(&net, &seq)?;
    prepare_out_dir(cfg, &cfg.out)?;
    let mut links = Vec::new();
    let mut summary = Vec::new();
    for (index, dm) in seq.matrices.iter().enumerate() {
        let routing =
            softmin_routing(&net, &w, gamma, dm).map_err(|e| CliError::Runtime(e.into()))?;
        let report =
            simulate_routing(&net, dm, &routing).map_err(|e| CliError::Runtime(e.into()))?;
        let opt = solve_optimal_umax(&net, dm).map_err(|e| CliError::Runtime(e.into()))?;
        for (edge, &u) in report.utilisation.iter().enumerate() {
            let (tail, head) = net.edge(edge);
            links.push(RouteRow {
                index,
                edge,
                tail,
                head,
                utilisation: u,
            });
        }
        let ratio = if opt.u_max_optimal > 0.0 {
            report.u_max / opt.u_max_optimal
        } else {
            f64::NAN
        };
        summary.push(RouteSummaryRow {
            index,
            u_max: report.u_max,
            u_max_optimal: opt.u_max_optimal,
            ratio,
        });
    }
    write_csv(&cfg.out.join("route.csv"), &links)?;
    write_csv(&cfg.out.join("route_summary.csv"), &summary)?;
    Ok(summary)
}

/// Builds the scenario from a gen-demands directory or by regenerating.
pub fn build_scenario(cfg: &RunConfig, demands: Option<&Path>) -> CliResult<Scenario> {
    let (name, net) = cfg.network()?;
    let scenario = match demands {
        Some(dir) => {
            let (train, test) = read_demand_dir(dir)?;
            for s in train.iter().chain(&test) {
                check_size(&net, s)?;
            }
            Scenario::from_sequences(&name, net, train, test)
        }
        None => Scenario::generate(&name, net, &cfg.env, cfg.demand_seed),
    };
    scenario.map_err(|e| CliError::Runtime(e.into()))
}

/// Trains and writes `metrics.csv`, `checkpoints/update_XXXXX/` and the
/// final policy under `policy/`.
pub fn cmd_train(cfg: &RunConfig, demands: Option<&Path>) -> CliResult<Vec<UpdateRecord>> {
    let scenario = build_scenario(cfg, demands)?;
    let policy = Policy::new(cfg.policy_spec(), &scenario.network, cfg.seed)
        .map_err(|e| CliError::Runtime(e.into()))?;
    let env =
        Env::new(vec![Arc::new(scenario)], cfg.env.clone(), cfg.policy).map_err(config_err)?;
    let ppo = PpoConfig {
        seed: cfg.seed,
        ..cfg.ppo.clone()
    };
    let mut trainer = Trainer::new(policy, env, ppo).map_err(config_err)?;
    prepare_out_dir(cfg, &cfg.out)?;
    let ckpt_root = cfg.out.join("checkpoints");
    let every = cfg.checkpoint_every;
    let records = trainer
        .train(|r, p| {
            log::info!(
                "update {} step {}: reward {:.4} ratio {:.4} kl {:.4}",
                r.update,
                r.step,
                r.mean_episode_reward,
                r.mean_ratio,
                r.approx_kl
            );
            if r.update % every == 0 {
                let dir = ckpt_root.join(format!("update_{:05}", r.update));
                fs::create_dir_all(&dir)
                    .map_err(|e| telab::policy::PolicyError::Sidecar(e.to_string()))?;
                p.save(&dir, POLICY_NAME)?;
            }
            Ok(())
        })
        .map_err(|e| CliError::Runtime(e.into()))?;
    let final_dir = cfg.out.join("policy");
    fs::create_dir_all(&final_dir)?;
    trainer
        .policy
        .save(&final_dir, POLICY_NAME)
        .map_err(|e| CliError::Runtime(e.into()))?;
    write_csv(&cfg.out.join("metrics.csv"), &records)?;
    Ok(records)
}

/// Columns of `eval.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCsvRow {
    pub policy: String,
    pub topology: String,
    pub sequence_id: usize,
    pub mean_ratio: f64,
    pub shortest_path_ratio: f64,
}

pub fn eval_rows(report: &EvalReport) -> Vec<EvalCsvRow> {
    report
        .rows
        .iter()
        .map(|r| EvalCsvRow {
            policy: r.policy.clone(),
            topology: r.topology.clone(),
            sequence_id: r.sequence,
            mean_ratio: r.mean_ratio,
            shortest_path_ratio: r.shortest_path_ratio,
        })
        .collect()
}

/// Evaluates the checkpoint in `checkpoint` and writes `eval.csv`.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    demands: Option<&Path>,
    split: Split,
) -> CliResult<EvalReport> {
    let scenario = build_scenario(cfg, demands)?;
    let policy = Policy::load(checkpoint, POLICY_NAME, &scenario.network).map_err(config_err)?;
    let mut env_cfg = cfg.env.clone();
    env_cfg.memory_length = policy.spec.memory_length;
    let mut env = Env::new(vec![Arc::new(scenario)], env_cfg, policy.kind()).map_err(config_err)?;
    let report = evaluate(&policy, &mut env, split).map_err(|e| CliError::Runtime(e.into()))?;
    prepare_out_dir(cfg, &cfg.out)?;
    write_csv(&cfg.out.join("eval.csv"), &eval_rows(&report))?;
    Ok(report)
}

/// One row per (policy, topology) of `compare.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub policy: String,
    pub topology: String,
    pub sequences: usize,
    pub mean_ratio: f64,
    pub shortest_path_ratio: f64,
}

const EVAL_COLUMNS: [&str; 5] = [
    "policy",
    "topology",
    "sequence_id",
    "mean_ratio",
    "shortest_path_ratio",
];

pub fn read_eval_csv(path: &Path) -> CliResult<Vec<EvalCsvRow>> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(config_err)?;
    let headers = reader.headers().map_err(config_err)?.clone();
    if let Some(missing) = EVAL_COLUMNS
        .iter()
        .find(|c| !headers.iter().any(|h| h == **c))
    {
        return Err(config_err(anyhow!(
            "{}: missing column {missing:?}",
            path.display()
        )));
    }
    reader
        .deserialize()
        .collect::<Result<Vec<EvalCsvRow>, _>>()
        .map_err(|e| config_err(anyhow!("{}: {e}", path.display())))
}

/// Merges evaluation CSVs into `compare.csv`, averaging over sequences.
pub fn cmd_compare(cfg: &RunConfig, inputs: &[PathBuf]) -> CliResult<Vec<CompareRow>> {
    let mut groups: BTreeMap<(String, String), Vec<EvalCsvRow>> = BTreeMap::new();
    for path in inputs {
        for row in read_eval_csv(path)? {
            groups
                .entry((row.policy.clone(), row.topology.clone()))
                .or_default()
                .push(row);
        }
    }
    let rows: Vec<CompareRow> = groups
        .into_iter()
        .map(|((policy, topology), rows)| {
            let n = rows.len() as f64;
            CompareRow {
                policy,
                topology,
                sequences: rows.len(),
                mean_ratio: rows.iter().map(|r| r.mean_ratio).sum::<f64>() / n,
                shortest_path_ratio: rows.iter().map(|r| r.shortest_path_ratio).sum::<f64>() / n,
            }
        })
        .collect();
    prepare_out_dir(cfg, &cfg.out)?;
    write_csv(&cfg.out.join("compare.csv"), &rows)?;
    Ok(rows)
}
