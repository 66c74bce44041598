//! Clipped-surrogate policy optimisation (PPO) and evaluation.
//!
//! Actions are sampled as `a = tanh(u)`, `u ~ N(mean, σ²)` per dimension.
//! The batch stores `u`, so log-probabilities of old actions are exact.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{shortest_path_routing, Env, EnvError, Split};
use crate::graph::Routing;
use crate::nn::{NnError, Tape};
use crate::policy::{Observation, Policy, PolicyError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss in update: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

const LOG_SQRT_2PI: f64 = 0.918_938_533_204_672_7;
const SQUASH_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    /// Environment steps to train for.
    pub steps_total: usize,
    pub rollout_length: usize,
    pub minibatch_size: usize,
    pub epochs: usize,
    pub clip: f64,
    pub gamma_discount: f64,
    pub gae_lambda: f64,
    pub learning_rate: f64,
    pub ent_coef: f64,
    pub vf_coef: f64,
    /// Global gradient-norm clip; off when unset.
    pub max_grad_norm: Option<f64>,
    /// Value-prediction clip range; off when unset.
    pub clip_value: Option<f64>,
    /// Linearly anneal the learning rate to zero.
    pub anneal_lr: bool,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            steps_total: 200_000,
            rollout_length: 2048,
            minibatch_size: 256,
            epochs: 4,
            clip: 0.2,
            gamma_discount: 0.99,
            gae_lambda: 0.95,
            learning_rate: 3e-4,
            ent_coef: 0.0,
            vf_coef: 0.5,
            max_grad_norm: None,
            clip_value: None,
            anneal_lr: false,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad(format!("clip must lie in (0, 1), got {}", self.clip));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.rollout_length == 0 || self.minibatch_size == 0 || self.epochs == 0 {
            return bad("rollout_length, minibatch_size and epochs must be positive".into());
        }
        for (name, v) in [
            ("gamma_discount", self.gamma_discount),
            ("gae_lambda", self.gae_lambda),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.ent_coef < 0.0 || self.vf_coef < 0.0 {
            return bad("loss coefficients must be non-negative".into());
        }
        if self.max_grad_norm.is_some_and(|g| g <= 0.0) || self.clip_value.is_some_and(|c| c <= 0.0)
        {
            return bad("max_grad_norm and clip_value must be positive when set".into());
        }
        Ok(())
    }
}

/// Log-density of `a = tanh(u)` for pre-squash sample `u`.
pub fn squashed_log_prob(u: &[f64], mean: &[f64], log_std: f64) -> f64 {
    let sigma = log_std.exp();
    u.iter()
        .zip(mean)
        .map(|(&u, &m)| {
            let z = (u - m) / sigma;
            let t = u.tanh();
            -0.5 * z * z - log_std - LOG_SQRT_2PI - (1.0 - t * t + SQUASH_EPS).ln()
        })
        .sum()
}

/// Entropy of the pre-squash Gaussian.
pub fn gaussian_entropy(dim: usize, log_std: f64) -> f64 {
    dim as f64 * (0.5 + LOG_SQRT_2PI + log_std)
}

/// On-policy samples with advantage estimates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryBatch {
    pub observations: Vec<Observation>,
    /// Scenario index per sample, selecting the network the policy reads.
    pub scenarios: Vec<usize>,
    /// Pre-squash samples `u`.
    pub raw_actions: Vec<Vec<f64>>,
    /// Squashed actions `tanh(u)` sent to the environment.
    pub actions: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Summed reward per episode touched by the rollout.
    pub episode_rewards: Vec<f64>,
    /// `u_agent / u_optimal` per scored timestep.
    pub ratios: Vec<f64>,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Generalised advantage estimates and returns. `bootstrap` values the state
/// after the last sample when the rollout was truncated mid-episode.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut advantages = vec![0.0; n];
    let mut last = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < n { values[t + 1] } else { bootstrap };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        last = delta + gamma * lambda * live * last;
        advantages[t] = last;
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    (advantages, returns)
}

/// Zero mean and unit variance; only centred when the spread is degenerate.
pub fn normalise_advantages(adv: &mut [f64]) {
    let n = adv.len();
    if n == 0 {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n as f64;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a -= mean;
        if n > 1 && std > 1e-8 {
            *a /= std;
        }
    }
    for a in adv.iter_mut() {
        if a.abs() < 1e-12 {
            *a = 0.0;
        }
    }
}

/// Collects `length` steps with fresh episodes seeded from `rng`.
pub fn collect_rollout<R: Rng>(
    env: &mut Env,
    policy: &Policy,
    length: usize,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<TrajectoryBatch, TrainError> {
    let mut batch = TrajectoryBatch::default();
    let log_std = policy.log_std();
    let sigma = log_std.exp();
    let mut obs = env.reset(rng.gen())?;
    let mut episode_reward = 0.0;
    let mut done = false;
    for _ in 0..length {
        let scenario = env.current().map_or(0, |c| c.0);
        let out = policy.forward(&obs, env.network())?;
        let u: Vec<f64> = out
            .mean
            .iter()
            .map(|&m| m + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let action: Vec<f64> = u.iter().map(|x| x.tanh()).collect();
        let step = env.step(&action)?;
        batch
            .log_probs
            .push(squashed_log_prob(&u, &out.mean, log_std));
        batch.values.push(out.value);
        batch.observations.push(obs);
        batch.scenarios.push(scenario);
        batch.raw_actions.push(u);
        batch.actions.push(action);
        batch.rewards.push(step.reward);
        batch.dones.push(step.done);
        if let (Some(a), Some(o)) = (step.info.u_max_agent, step.info.u_max_optimal) {
            batch.ratios.push(a / o);
        }
        episode_reward += step.reward;
        done = step.done;
        obs = if done {
            batch.episode_rewards.push(episode_reward);
            episode_reward = 0.0;
            env.reset(rng.gen())?
        } else {
            step.observation
        };
    }
    if !done {
        batch.episode_rewards.push(episode_reward);
    }
    let bootstrap = if done {
        0.0
    } else {
        policy.forward(&obs, env.network())?.value
    };
    let (advantages, returns) = compute_gae(
        &batch.rewards,
        &batch.values,
        &batch.dones,
        bootstrap,
        cfg.gamma_discount,
        cfg.gae_lambda,
    );
    batch.advantages = advantages;
    batch.returns = returns;
    Ok(batch)
}

/// Adaptive-moment optimiser minimising a loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Averages of one update's minibatch statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Loss and parameter gradient on the given samples.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub metrics: UpdateMetrics,
    pub grad: Vec<f64>,
}

/// Mean PPO loss over `indices` of `batch`, with its gradient.
///
/// Advantages are read as stored; normalise them beforehand.
pub fn ppo_loss_and_grad(
    policy: &Policy,
    env: &Env,
    batch: &TrajectoryBatch,
    indices: &[usize],
    cfg: &PpoConfig,
) -> Result<LossGrad, TrainError> {
    let log_std = policy.log_std();
    let sigma = log_std.exp();
    let scale = 1.0 / indices.len().max(1) as f64;
    let mut grad = vec![0.0; policy.params.len()];
    let mut d_log_std = 0.0;
    let mut m = UpdateMetrics::default();
    for &i in indices {
        let net = &env.scenarios()[batch.scenarios[i]].network;
        let mut tape = Tape::new(&policy.params);
        let heads = policy.forward_tape(&mut tape, &batch.observations[i], net)?;
        let mean = heads.mean(&tape);
        let value = heads.value(&tape);
        let u = &batch.raw_actions[i];
        let adv = batch.advantages[i];

        let logp = squashed_log_prob(u, &mean, log_std);
        let ratio = (logp - batch.log_probs[i]).exp();
        let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
        let unclipped_active = ratio * adv <= clipped * adv;
        let pg = -(ratio * adv).min(clipped * adv);
        let d_logp = if unclipped_active { -adv * ratio } else { 0.0 };

        let ret = batch.returns[i];
        let (v_loss, d_value) = match cfg.clip_value {
            Some(c) => {
                let old = batch.values[i];
                let vc = old + (value - old).clamp(-c, c);
                let (a, b) = ((value - ret).powi(2), (vc - ret).powi(2));
                if a >= b {
                    (0.5 * a, value - ret)
                } else {
                    let inside = (value - old).abs() < c;
                    (0.5 * b, if inside { vc - ret } else { 0.0 })
                }
            }
            None => (0.5 * (value - ret).powi(2), value - ret),
        };
        let entropy = gaussian_entropy(mean.len(), log_std);
        let loss = pg + cfg.vf_coef * v_loss - cfg.ent_coef * entropy;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite(format!(
                "sample {i}: ratio {ratio}, advantage {adv}, value {value}, return {ret}"
            )));
        }

        let d_mean: Vec<f64> = u
            .iter()
            .zip(&mean)
            .map(|(&u, &mu)| scale * d_logp * (u - mu) / (sigma * sigma))
            .collect();
        let seeds = heads.seeds(&tape, &d_mean, scale * cfg.vf_coef * d_value);
        let g = tape.backward(&seeds)?;
        for (a, b) in grad.iter_mut().zip(&g.params) {
            *a += b;
        }
        let z2: f64 = u
            .iter()
            .zip(&mean)
            .map(|(&u, &mu)| ((u - mu) / sigma).powi(2))
            .sum();
        d_log_std += scale * (d_logp * (z2 - mean.len() as f64) - cfg.ent_coef * mean.len() as f64);

        m.loss += scale * loss;
        m.policy_loss += scale * pg;
        m.value_loss += scale * v_loss;
        m.entropy += scale * entropy;
        m.clip_fraction += scale * f64::from(u8::from((ratio - 1.0).abs() > cfg.clip));
        m.approx_kl += scale * (batch.log_probs[i] - logp);
    }
    if let Some(offset) = policy.log_std_offset() {
        grad[offset] += d_log_std;
    }
    Ok(LossGrad { metrics: m, grad })
}

/// Runs `cfg.epochs` passes of shuffled minibatch updates.
pub fn ppo_update<R: Rng>(
    policy: &mut Policy,
    optimiser: &mut Adam,
    env: &Env,
    batch: &TrajectoryBatch,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateMetrics, TrainError> {
    let mut batch = batch.clone();
    normalise_advantages(&mut batch.advantages);
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut total = UpdateMetrics::default();
    let mut count = 0.0;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch_size) {
            let LossGrad { metrics, mut grad } =
                ppo_loss_and_grad(policy, env, &batch, chunk, cfg)?;
            if let Some(max) = cfg.max_grad_norm {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > max {
                    grad.iter_mut().for_each(|g| *g *= max / norm);
                }
            }
            optimiser.step(policy.params.values_mut(), &grad);
            total.loss += metrics.loss;
            total.policy_loss += metrics.policy_loss;
            total.value_loss += metrics.value_loss;
            total.entropy += metrics.entropy;
            total.clip_fraction += metrics.clip_fraction;
            total.approx_kl += metrics.approx_kl;
            count += 1.0;
        }
    }
    if count > 0.0 {
        for x in [
            &mut total.loss,
            &mut total.policy_loss,
            &mut total.value_loss,
            &mut total.entropy,
            &mut total.clip_fraction,
            &mut total.approx_kl,
        ] {
            *x /= count;
        }
    }
    Ok(total)
}

/// One row of the training metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub update: usize,
    pub step: usize,
    pub mean_episode_reward: f64,
    pub mean_ratio: f64,
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub learning_rate: f64,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Owns a policy, its optimiser and the training RNG.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub policy: Policy,
    pub env: Env,
    pub cfg: PpoConfig,
    optimiser: Adam,
    rng: ChaCha8Rng,
    step: usize,
    update: usize,
}

impl Trainer {
    pub fn new(policy: Policy, env: Env, cfg: PpoConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        if policy.kind() != env.kind() {
            return Err(TrainError::Config(format!(
                "{} policy with an environment built for {}",
                policy.kind().name(),
                env.kind().name()
            )));
        }
        if policy.spec.memory_length != env.config().memory_length {
            return Err(TrainError::Config(format!(
                "policy memory length {} differs from environment's {}",
                policy.spec.memory_length,
                env.config().memory_length
            )));
        }
        let optimiser = Adam::new(policy.params.len(), cfg.learning_rate);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            policy,
            env,
            cfg,
            optimiser,
            rng,
            step: 0,
            update: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// One rollout followed by one update.
    pub fn iterate(&mut self) -> Result<UpdateRecord, TrainError> {
        let length = self
            .cfg
            .rollout_length
            .min(self.cfg.steps_total - self.step)
            .max(1);
        if self.cfg.anneal_lr {
            let frac = 1.0 - self.step as f64 / self.cfg.steps_total.max(1) as f64;
            self.optimiser.learning_rate = self.cfg.learning_rate * frac;
        }
        let batch = collect_rollout(
            &mut self.env,
            &self.policy,
            length,
            &self.cfg,
            &mut self.rng,
        )?;
        let metrics = ppo_update(
            &mut self.policy,
            &mut self.optimiser,
            &self.env,
            &batch,
            &self.cfg,
            &mut self.rng,
        )?;
        self.step += length;
        self.update += 1;
        Ok(UpdateRecord {
            update: self.update,
            step: self.step,
            mean_episode_reward: mean(&batch.episode_rewards),
            mean_ratio: mean(&batch.ratios),
            loss: metrics.loss,
            policy_loss: metrics.policy_loss,
            value_loss: metrics.value_loss,
            entropy: metrics.entropy,
            clip_fraction: metrics.clip_fraction,
            approx_kl: metrics.approx_kl,
            learning_rate: self.optimiser.learning_rate,
        })
    }

    /// Trains until `steps_total`; `on_update` sees every record.
    pub fn train(
        &mut self,
        mut on_update: impl FnMut(&UpdateRecord, &Policy) -> Result<(), TrainError>,
    ) -> Result<Vec<UpdateRecord>, TrainError> {
        let mut records = Vec::new();
        while self.step < self.cfg.steps_total {
            let record = self.iterate()?;
            on_update(&record, &self.policy)?;
            records.push(record);
        }
        Ok(records)
    }
}

/// What an evaluated controller does at a decision point.
#[derive(Debug, Clone)]
pub enum Decision {
    Action(Vec<f64>),
    Routing(Routing<f64>),
}

/// Per-sequence evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub policy: String,
    pub topology: String,
    pub sequence: usize,
    pub mean_ratio: f64,
    pub shortest_path_ratio: f64,
    pub mean_reward: f64,
    pub timesteps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_reward: f64,
    pub mean_ratio: f64,
    pub shortest_path_ratio: f64,
}

/// Runs every sequence of `split` in every scenario once.
pub fn evaluate_with(
    env: &mut Env,
    split: Split,
    label: &str,
    mut decide: impl FnMut(&Env, &Observation) -> Result<Decision, TrainError>,
) -> Result<EvalReport, TrainError> {
    let mut rows = Vec::new();
    for s in 0..env.scenarios().len() {
        let scenario = env.scenarios()[s].clone();
        for (k, data) in scenario.sequences(split).iter().enumerate() {
            let mut obs = env.reset_to(s, split, k)?;
            let (mut ratios, mut sp, mut rewards) = (Vec::new(), Vec::new(), Vec::new());
            loop {
                let step = match decide(env, &obs)? {
                    Decision::Action(a) => env.step(&a)?,
                    Decision::Routing(r) => env.step_with_routing(&r)?,
                };
                if let (Some(a), Some(o)) = (step.info.u_max_agent, step.info.u_max_optimal) {
                    let t = step.info.timestep;
                    ratios.push(a / o);
                    sp.push(data.shortest[t] / data.optimal[t]);
                    rewards.push(step.reward);
                }
                if step.done {
                    break;
                }
                obs = step.observation;
            }
            rows.push(EvalRow {
                policy: label.to_string(),
                topology: scenario.name.clone(),
                sequence: data.id,
                mean_ratio: mean(&ratios),
                shortest_path_ratio: mean(&sp),
                mean_reward: mean(&rewards),
                timesteps: ratios.len(),
            });
        }
    }
    let col = |f: fn(&EvalRow) -> f64| mean(&rows.iter().map(f).collect::<Vec<_>>());
    Ok(EvalReport {
        mean_reward: col(|r| r.mean_reward),
        mean_ratio: col(|r| r.mean_ratio),
        shortest_path_ratio: col(|r| r.shortest_path_ratio),
        rows,
    })
}

/// Deterministic evaluation: actions are `tanh(mean)`.
pub fn evaluate(policy: &Policy, env: &mut Env, split: Split) -> Result<EvalReport, TrainError> {
    let label = policy.kind().name();
    evaluate_with(env, split, label, |env, obs| {
        let out = policy.forward(obs, env.network())?;
        Ok(Decision::Action(
            out.mean.iter().map(|m| m.tanh()).collect(),
        ))
    })
}

/// Shortest-path routing run through the same harness.
pub fn evaluate_shortest_path(env: &mut Env, split: Split) -> Result<EvalReport, TrainError> {
    evaluate_with(env, split, "shortest-path", |env, _| {
        let dm = env.scored_matrix()?;
        let routing = shortest_path_routing(env.network(), dm).map_err(EnvError::from)?;
        Ok(Decision::Routing(routing))
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::demand::{DemandMatrix, DemandSequence};
    use crate::env::{EnvConfig, Scenario};
    use crate::graph::Network;
    use crate::nn::GnnConfig;
    use crate::policy::{PolicyKind, PolicySpec};

    fn small_spec(kind: PolicyKind, n: usize) -> PolicySpec {
        PolicySpec {
            kind,
            memory_length: n,
            mlp_hidden: vec![8],
            gnn: GnnConfig {
                latent: 4,
                core_hidden: vec![4],
                steps: 2,
            },
            ..PolicySpec::default()
        }
    }

    fn triangle_env(kind: PolicyKind) -> Env {
        let net = Network::bidirectional(3, &[(0, 1), (1, 2), (0, 2)], 1000.0).unwrap();
        let cfg = EnvConfig {
            memory_length: 2,
            sequence_length: 6,
            cycle_length: 2,
            train_sequences: 2,
            test_sequences: 2,
            ..EnvConfig::default()
        };
        let scn = Scenario::generate("tri", net, &cfg, 4).unwrap();
        Env::new(vec![Arc::new(scn)], cfg, kind).unwrap()
    }

    fn two_path_env() -> Env {
        let net = Network::new(3, [(0, 2, 1.0), (0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        let seq = |d: f64| {
            let dm =
                DemandMatrix::from_fn(3, |i, j| if (i, j) == (0, 2) { d } else { 0.0 }).unwrap();
            DemandSequence::new(vec![dm; 4], 1).unwrap()
        };
        let scn =
            Scenario::from_sequences("two-path", net, vec![seq(1.0)], vec![seq(2.0), seq(0.5)])
                .unwrap();
        let cfg = EnvConfig {
            memory_length: 1,
            sequence_length: 4,
            ..EnvConfig::default()
        };
        Env::new(vec![Arc::new(scn)], cfg, PolicyKind::Gnn).unwrap()
    }

    fn policy(env: &Env, kind: PolicyKind, seed: u64) -> Policy {
        Policy::new(
            small_spec(kind, env.config().memory_length),
            env.network(),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn gae_matches_hand_computation() {
        let (adv, ret) = compute_gae(&[1.0, 1.0], &[0.5, 0.5], &[false, true], 9.0, 0.9, 0.8);
        assert!((adv[1] - 0.5).abs() < 1e-12);
        assert!((adv[0] - 1.31).abs() < 1e-12);
        assert!((ret[0] - 1.81).abs() < 1e-12);
        let (adv, _) = compute_gae(&[0.0], &[0.0], &[false], 2.0, 0.5, 1.0);
        assert_eq!(adv, vec![1.0]);
    }

    #[test]
    fn normalisation_guards_degenerate_batches() {
        let mut constant = vec![-1.3; 6];
        normalise_advantages(&mut constant);
        assert!(constant.iter().all(|&a| a == 0.0));
        let mut single = vec![4.0];
        normalise_advantages(&mut single);
        assert_eq!(single, vec![0.0]);
        let mut spread = vec![1.0, 2.0, 3.0, 6.0];
        normalise_advantages(&mut spread);
        let mean = spread.iter().sum::<f64>() / 4.0;
        let var = spread.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_prob_includes_squash_correction() {
        let lp = squashed_log_prob(&[0.0], &[0.0], 0.0);
        assert!((lp + LOG_SQRT_2PI + (1.0 + SQUASH_EPS).ln()).abs() < 1e-12);
        let far = squashed_log_prob(&[2.0], &[2.0], 0.0);
        assert!(far > lp);
    }

    #[test]
    fn vanishing_noise_gives_squashed_means() {
        let mut env = triangle_env(PolicyKind::Gnn);
        let mut spec = small_spec(PolicyKind::Gnn, 2);
        spec.log_std_init = -40.0;
        let p = Policy::new(spec, env.network(), 1).unwrap();
        let cfg = PpoConfig::default();
        let batch =
            collect_rollout(&mut env, &p, 10, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let net = env.network().clone();
        for (obs, action) in batch.observations.iter().zip(&batch.actions) {
            let mean = p.forward(obs, &net).unwrap().mean;
            for (a, m) in action.iter().zip(mean) {
                assert!((a - m.tanh()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rollouts_are_reproducible() {
        let cfg = PpoConfig::default();
        for kind in [PolicyKind::Mlp, PolicyKind::Gnn, PolicyKind::Iterative] {
            let mut env = triangle_env(kind);
            let p = policy(&env, kind, 2);
            let a =
                collect_rollout(&mut env, &p, 40, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            let b =
                collect_rollout(&mut env, &p, 40, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len(), 40);
        }
    }

    #[test]
    fn zero_advantages_leave_params_unchanged_without_value_or_entropy() {
        let mut env = triangle_env(PolicyKind::Gnn);
        let mut p = policy(&env, PolicyKind::Gnn, 3);
        let cfg = PpoConfig {
            vf_coef: 0.0,
            ent_coef: 0.0,
            minibatch_size: 8,
            ..PpoConfig::default()
        };
        let mut batch =
            collect_rollout(&mut env, &p, 16, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        batch.advantages.iter_mut().for_each(|a| *a = 0.0);
        let before = p.params.clone();
        let all: Vec<usize> = (0..batch.len()).collect();
        let lg = ppo_loss_and_grad(&p, &env, &batch, &all, &cfg).unwrap();
        assert!(lg.grad.iter().all(|&g| g == 0.0));
        let mut adam = Adam::new(p.params.len(), 1e-3);
        ppo_update(
            &mut p,
            &mut adam,
            &env,
            &batch,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        assert_eq!(p.params, before);
    }

    fn prepared_batch(env: &mut Env, p: &Policy, len: usize) -> TrajectoryBatch {
        let cfg = PpoConfig::default();
        let mut batch =
            collect_rollout(env, p, len, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        normalise_advantages(&mut batch.advantages);
        batch
    }

    #[test]
    fn small_step_decreases_the_loss() {
        let mut env = triangle_env(PolicyKind::Gnn);
        let mut p = policy(&env, PolicyKind::Gnn, 4);
        let batch = prepared_batch(&mut env, &p, 24);
        let cfg = PpoConfig::default();
        let all: Vec<usize> = (0..batch.len()).collect();
        let before = ppo_loss_and_grad(&p, &env, &batch, &all, &cfg).unwrap();
        let mut adam = Adam::new(p.params.len(), 1e-4);
        adam.step(p.params.values_mut(), &before.grad);
        let after = ppo_loss_and_grad(&p, &env, &batch, &all, &cfg).unwrap();
        assert!(after.metrics.loss < before.metrics.loss);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        for kind in [PolicyKind::Gnn, PolicyKind::Mlp, PolicyKind::Iterative] {
            let mut env = triangle_env(kind);
            let mut spec = small_spec(kind, 2);
            spec.learn_log_std = true;
            let mut p = Policy::new(spec, env.network(), 6).unwrap();
            let batch = prepared_batch(&mut env, &p, 3);
            // move off the ratio = 1 point without leaving the clip range
            for v in p.params.values_mut() {
                *v += 1e-3;
            }
            let cfg = PpoConfig {
                ent_coef: 0.01,
                ..PpoConfig::default()
            };
            let idx = [0, 1, 2];
            let analytic = ppo_loss_and_grad(&p, &env, &batch, &idx, &cfg)
                .unwrap()
                .grad;
            let base = p.params.values().to_vec();
            let h = 1e-5;
            let mut numeric = Vec::new();
            for i in 0..base.len() {
                let mut v = base.clone();
                v[i] += h;
                p.params.set_values(&v).unwrap();
                let plus = ppo_loss_and_grad(&p, &env, &batch, &idx, &cfg)
                    .unwrap()
                    .metrics
                    .loss;
                v[i] -= 2.0 * h;
                p.params.set_values(&v).unwrap();
                let minus = ppo_loss_and_grad(&p, &env, &batch, &idx, &cfg)
                    .unwrap()
                    .metrics
                    .loss;
                numeric.push((plus - minus) / (2.0 * h));
            }
            p.params.set_values(&base).unwrap();
            let diff: f64 = analytic
                .iter()
                .zip(&numeric)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let norm: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
            assert!(
                diff / norm < 1e-3,
                "{kind:?}: relative error {}",
                diff / norm
            );
        }
    }

    #[test]
    fn shortest_path_pseudo_policy_reproduces_baseline() {
        let mut env = triangle_env(PolicyKind::Gnn);
        let report = evaluate_shortest_path(&mut env, Split::Test).unwrap();
        for row in &report.rows {
            assert_eq!(row.mean_ratio, row.shortest_path_ratio);
        }
    }

    #[test]
    fn evaluated_ratios_respect_the_oracle() {
        for kind in [PolicyKind::Mlp, PolicyKind::Gnn, PolicyKind::Iterative] {
            let mut env = triangle_env(kind);
            let p = policy(&env, kind, 7);
            let report = evaluate(&p, &mut env, Split::Test).unwrap();
            assert_eq!(report.rows.len(), 2);
            for row in &report.rows {
                assert!(row.mean_ratio >= 1.0 - 1e-6);
                assert_eq!(row.timesteps, 4);
            }
        }
    }

    #[test]
    fn fresh_policy_on_two_paths_is_at_most_twice_optimal() {
        let mut env = two_path_env();
        for seed in 0..5 {
            let p = policy(&env, PolicyKind::Gnn, seed);
            let report = evaluate(&p, &mut env, Split::Test).unwrap();
            assert!(report.mean_ratio <= 2.0 + 1e-9);
            assert!(report.mean_ratio >= 1.0 - 1e-6);
        }
    }

    #[test]
    fn training_is_reproducible() {
        let run = || {
            let env = triangle_env(PolicyKind::Gnn);
            let p = policy(&env, PolicyKind::Gnn, 8);
            let cfg = PpoConfig {
                steps_total: 64,
                rollout_length: 32,
                minibatch_size: 16,
                epochs: 2,
                seed: 11,
                ..PpoConfig::default()
            };
            let mut t = Trainer::new(p, env, cfg).unwrap();
            let records = t.train(|_, _| Ok(())).unwrap();
            (records, t.policy.params.values().to_vec())
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a.len(), 2);
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }

    #[test]
    #[allow(clippy::field_reassign_with_default)]
    fn config_guards() {
        let mut cfg = PpoConfig::default();
        cfg.clip = 1.0;
        assert!(cfg.validate().is_err());
        cfg.clip = 0.2;
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
        let env = triangle_env(PolicyKind::Gnn);
        let p = policy(&env, PolicyKind::Mlp, 0);
        assert!(Trainer::new(p, env, PpoConfig::default()).is_err());
    }
}
