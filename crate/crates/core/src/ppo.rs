//! Clipped-surrogate PPO for the leader-follower team.
//!
//! Every agent is its own learner over a shared network: the batch holds
//! one transition per agent per step, and advantages are computed per agent
//! from that agent's own reward stream.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{belief_init, belief_step, hiding_reward, AdversaryBeliefState, AdversaryParams};
use crate::env::{observe, Action, Env, EnvConfig, WorldState};
use crate::error::{Error, Result};
use crate::numcore::{clip_grad_norm, collect_grads, Adam, Parameters, Tape, Tensor, Var};
use crate::policy::{choose, evaluate_states, forward_batch, ActMode, BoundPolicy, PolicyBatch, PolicyConfig, PolicyParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub gamma: f64,
    /// Weight of the identity-hiding reward.
    pub lambda_mu: f64,
    pub gae_lambda: f64,
    pub clip_ratio: f64,
    pub epochs_per_batch: usize,
    /// Transitions (agent-steps) per gradient step.
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub episodes_per_batch: usize,
    pub total_iterations: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda_mu: 1.0,
            gae_lambda: 0.95,
            clip_ratio: 0.2,
            epochs_per_batch: 4,
            minibatch_size: 2400,
            learning_rate: 3e-4,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            episodes_per_batch: 32,
            total_iterations: 500,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("ppo: {m}")));
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return bad("clip_ratio must lie in (0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if self.epochs_per_batch == 0 || self.minibatch_size == 0 || self.episodes_per_batch == 0 {
            return bad("epochs, minibatch size and episodes per batch must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.max_grad_norm > 0.0) {
            return bad("learning_rate and max_grad_norm must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Naive,
    Hiding,
}

/// Knobs of a rollout that are not part of the environment itself.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutOptions {
    pub n_agents: usize,
    pub mode: ActMode,
    pub lambda_mu: f64,
    /// Followers always no-op and are left out of training.
    pub passive_followers: bool,
}

impl RolloutOptions {
    pub fn for_env(env: &EnvConfig) -> Self {
        Self {
            n_agents: env.n_agents,
            mode: ActMode::Sample,
            lambda_mu: 1.0,
            passive_followers: false,
        }
    }
}

/// One episode; per-step vectors are indexed `[t][agent]`.
///
/// `states[t]` is the state the agents observed when choosing `actions[t]`;
/// observations are recomputed from it on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRollout {
    pub states: Vec<WorldState>,
    pub final_state: WorldState,
    pub actions: Vec<Vec<Action>>,
    pub log_probs: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub rewards: Vec<Vec<f64>>,
    pub hiding: Vec<Vec<f64>>,
    /// Adversary belief after each step, when an adversary was present.
    pub adversary_probs: Option<Vec<Vec<f64>>>,
    pub predictions: Option<Vec<usize>>,
    /// Agents whose transitions are trained on.
    pub active: Vec<bool>,
    pub advantages: Vec<Vec<f64>>,
    pub returns: Vec<Vec<f64>>,
}

impl EpisodeRollout {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn n(&self) -> usize {
        self.final_state.n()
    }

    pub fn leader(&self) -> usize {
        self.final_state.leader
    }

    /// `r + lambda_mu * mu` at step `t` for `agent`.
    pub fn total_reward(&self, t: usize, agent: usize, lambda_mu: f64) -> f64 {
        self.rewards[t][agent] + lambda_mu * self.hiding[t][agent]
    }

    /// Mean over agents of each agent's summed primary reward.
    pub fn mean_primary_return(&self) -> f64 {
        let total: f64 = self.rewards.iter().flatten().sum();
        total / self.n() as f64
    }

    pub fn mean_hiding_return(&self) -> f64 {
        let total: f64 = self.hiding.iter().flatten().sum();
        total / self.n() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBatch {
    pub episodes: Vec<EpisodeRollout>,
    pub lambda_mu: f64,
    pub advantages_ready: bool,
}

impl RolloutBatch {
    pub fn mean_primary_reward(&self) -> f64 {
        mean(self.episodes.iter().map(EpisodeRollout::mean_primary_return))
    }

    pub fn mean_hiding_reward(&self) -> f64 {
        mean(self.episodes.iter().map(EpisodeRollout::mean_hiding_return))
    }

    pub fn transitions(&self) -> usize {
        self.episodes
            .iter()
            .map(|e| e.len() * e.active.iter().filter(|&&a| a).count())
            .sum()
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Sampling rollouts with default options.
pub fn collect_rollouts(
    params: &PolicyParams,
    env_config: &EnvConfig,
    adversary: Option<&AdversaryParams>,
    count: usize,
    seed: u64,
) -> Result<RolloutBatch> {
    collect_rollouts_with(params, env_config, adversary, count, seed, &RolloutOptions::for_env(env_config))
}

struct Running {
    state: WorldState,
    rng: ChaCha8Rng,
    belief: Option<AdversaryBeliefState>,
    episode: EpisodeRollout,
}

/// Runs `count` episodes in lockstep with one batched policy forward per step.
/// Episode `k` draws its environment and action seeds from a stream keyed by
/// `seed`, so results do not depend on how episodes are scheduled.
pub fn collect_rollouts_with(
    params: &PolicyParams,
    env_config: &EnvConfig,
    adversary: Option<&AdversaryParams>,
    count: usize,
    seed: u64,
    options: &RolloutOptions,
) -> Result<RolloutBatch> {
    let env = Env::new(env_config.clone())?;
    let n = options.n_agents;
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut running = Vec::with_capacity(count);
    for _ in 0..count {
        let env_seed = seeds.next_u64();
        let act_seed = seeds.next_u64();
        let state = env.reset(env_seed, n)?;
        let leader = state.leader;
        let active = (0..n).map(|i| !options.passive_followers || i == leader).collect();
        running.push(Running {
            belief: adversary.map(|a| belief_init(a, n)).transpose()?,
            rng: ChaCha8Rng::seed_from_u64(act_seed),
            episode: EpisodeRollout {
                states: Vec::with_capacity(env_config.horizon),
                final_state: state.clone(),
                actions: Vec::new(),
                log_probs: Vec::new(),
                values: Vec::new(),
                rewards: Vec::new(),
                hiding: Vec::new(),
                adversary_probs: adversary.map(|_| Vec::new()),
                predictions: adversary.map(|_| Vec::new()),
                active,
                advantages: Vec::new(),
                returns: Vec::new(),
            },
            state,
        });
    }
    for _ in 0..env_config.horizon {
        let states: Vec<WorldState> = running.iter().map(|r| r.state.clone()).collect();
        let dists = evaluate_states(params, &states)?;
        for (run, dist) in running.iter_mut().zip(&dists) {
            let mut out = choose(dist, &mut run.rng, options.mode);
            if options.passive_followers {
                for (i, a) in out.actions.iter_mut().enumerate() {
                    if i != run.state.leader {
                        *a = Action::Noop;
                    }
                }
            }
            let (next, rewards) = env.step(&run.state, &out.actions)?;
            let hiding = match (adversary, run.belief.as_mut()) {
                (Some(adv), Some(belief)) => {
                    *belief = belief_step(adv, belief, &next.positions())?;
                    if let Some(p) = run.episode.adversary_probs.as_mut() {
                        p.push(belief.probs.clone());
                    }
                    if let Some(p) = run.episode.predictions.as_mut() {
                        p.push(belief.prediction);
                    }
                    hiding_reward(belief, next.leader)
                }
                _ => vec![0.0; n],
            };
            let ep = &mut run.episode;
            ep.states.push(std::mem::replace(&mut run.state, next));
            ep.actions.push(out.actions);
            ep.log_probs.push(out.log_probs);
            ep.values.push(out.values);
            ep.rewards.push(rewards.0);
            ep.hiding.push(hiding);
        }
    }
    let episodes = running
        .into_iter()
        .map(|mut r| {
            r.episode.final_state = r.state;
            r.episode
        })
        .collect();
    Ok(RolloutBatch {
        episodes,
        lambda_mu: options.lambda_mu,
        advantages_ready: false,
    })
}

/// Per-agent GAE; the episode end is terminal. Returns use raw advantages,
/// then advantages of active agents are normalized over the whole batch.
pub fn compute_advantages(batch: &mut RolloutBatch, config: &PpoConfig) {
    compute_advantages_raw(batch, config);
    let active: Vec<f64> = batch
        .episodes
        .iter()
        .flat_map(|e| {
            e.advantages
                .iter()
                .flat_map(move |row| row.iter().zip(&e.active).filter(|(_, &a)| a).map(|(v, _)| *v))
        })
        .collect();
    if active.is_empty() {
        return;
    }
    let m = active.iter().sum::<f64>() / active.len() as f64;
    let var = active.iter().map(|a| (a - m).powi(2)).sum::<f64>() / active.len() as f64;
    let sd = var.sqrt() + 1e-8;
    for e in &mut batch.episodes {
        for row in &mut e.advantages {
            for a in row.iter_mut() {
                *a = (*a - m) / sd;
            }
        }
    }
}

/// GAE without the final normalization.
pub fn compute_advantages_raw(batch: &mut RolloutBatch, config: &PpoConfig) {
    let lambda_mu = batch.lambda_mu;
    for e in &mut batch.episodes {
        let (t_len, n) = (e.len(), e.n());
        let mut adv = vec![vec![0.0; n]; t_len];
        for i in 0..n {
            let mut running = 0.0;
            for t in (0..t_len).rev() {
                let next_value = if t + 1 < t_len { e.values[t + 1][i] } else { 0.0 };
                let delta = e.total_reward(t, i, lambda_mu) + config.gamma * next_value - e.values[t][i];
                running = delta + config.gamma * config.gae_lambda * running;
                adv[t][i] = running;
            }
        }
        e.returns = adv
            .iter()
            .zip(&e.values)
            .map(|(a, v)| a.iter().zip(v).map(|(a, v)| a + v).collect())
            .collect();
        e.advantages = adv;
    }
    batch.advantages_ready = true;
}

/// `min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)`
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_ratio: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip_ratio, 1.0 + clip_ratio) * advantage)
}

/// One trainable transition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub episode: usize,
    pub t: usize,
    pub agent: usize,
}

pub fn active_samples(batch: &RolloutBatch) -> Vec<Sample> {
    let mut out = Vec::with_capacity(batch.transitions());
    for (k, e) in batch.episodes.iter().enumerate() {
        for t in 0..e.len() {
            for agent in (0..e.n()).filter(|&i| e.active[i]) {
                out.push(Sample { episode: k, t, agent });
            }
        }
    }
    out
}

/// Loss terms built on a tape for one minibatch.
pub struct PpoLoss {
    pub total: Var,
    pub policy: Var,
    pub value: Var,
    pub entropy: Var,
    /// `[M, 1]` probability ratios.
    pub ratio: Var,
}

pub fn ppo_loss(
    tape: &mut Tape,
    bound: &BoundPolicy,
    batch: &RolloutBatch,
    samples: &[Sample],
    config: &PpoConfig,
) -> Result<PpoLoss> {
    if samples.is_empty() {
        return Err(Error::arg("empty minibatch"));
    }
    let m = samples.len();
    let mut pb = PolicyBatch::new();
    let mut actions = Vec::with_capacity(m);
    let mut old = Vec::with_capacity(m);
    let mut adv = Vec::with_capacity(m);
    let mut ret = Vec::with_capacity(m);
    for s in samples {
        let e = &batch.episodes[s.episode];
        pb.push(&observe(&e.states[s.t], s.agent))?;
        actions.push(e.actions[s.t][s.agent].index());
        old.push(e.log_probs[s.t][s.agent]);
        adv.push(e.advantages[s.t][s.agent]);
        ret.push(e.returns[s.t][s.agent]);
    }
    let fwd = forward_batch(tape, bound, &pb)?;
    let logp = tape.pick_cols(fwd.log_probs, &actions)?;
    let old = tape.leaf(Tensor::matrix(m, 1, old));
    let adv = tape.leaf(Tensor::matrix(m, 1, adv));
    let diff = tape.sub(logp, old)?;
    let ratio = tape.exp(diff);
    let unclipped = tape.mul(ratio, adv)?;
    let clipped_ratio = tape.clamp(ratio, 1.0 - config.clip_ratio, 1.0 + config.clip_ratio);
    let clipped = tape.mul(clipped_ratio, adv)?;
    let surrogate = tape.minimum(unclipped, clipped)?;
    let surrogate = tape.mean(surrogate)?;
    let policy = tape.scale(surrogate, -1.0);

    // value error measured in value-head units
    let inv = 1.0 / bound.value_scale;
    let ret = tape.leaf(Tensor::matrix(m, 1, ret));
    let err = tape.sub(fwd.values, ret)?;
    let err = tape.scale(err, inv);
    let sq = tape.square(err);
    let value = tape.mean(sq)?;

    let probs = tape.exp(fwd.log_probs);
    let plogp = tape.mul(probs, fwd.log_probs)?;
    let neg_entropy_sum = tape.sum(plogp);
    let entropy = tape.scale(neg_entropy_sum, -1.0 / m as f64);

    let weighted_value = tape.scale(value, config.value_coef);
    let weighted_entropy = tape.scale(entropy, -config.entropy_coef);
    let total = tape.add(policy, weighted_value)?;
    let total = tape.add(total, weighted_entropy)?;
    Ok(PpoLoss {
        total,
        policy,
        value,
        entropy,
        ratio,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateDiagnostics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Mean of `(r - 1) - ln r` over the last epoch.
    pub kl: f64,
    pub grad_steps: usize,
}

/// Optimizer state carried across iterations.
pub struct PpoState {
    pub adam: Adam,
    pub rng: ChaCha8Rng,
}

impl PpoState {
    pub fn new(config: &PpoConfig, seed: u64) -> Self {
        Self {
            adam: Adam::new(config.learning_rate),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

pub fn ppo_update(
    params: &mut PolicyParams,
    batch: &RolloutBatch,
    config: &PpoConfig,
    state: &mut PpoState,
) -> Result<UpdateDiagnostics> {
    if !batch.advantages_ready {
        return Err(Error::arg("advantages must be computed before the update"));
    }
    let mut samples = active_samples(batch);
    if samples.is_empty() {
        return Err(Error::arg("batch has no trainable transitions"));
    }
    let mut diag = UpdateDiagnostics::default();
    for epoch in 0..config.epochs_per_batch {
        samples.shuffle(&mut state.rng);
        let last_epoch = epoch + 1 == config.epochs_per_batch;
        let (mut kl_sum, mut kl_count) = (0.0, 0usize);
        let (mut pl, mut vl, mut en, mut chunks) = (0.0, 0.0, 0.0, 0usize);
        for chunk in samples.chunks(config.minibatch_size) {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let loss = ppo_loss(&mut tape, &bound, batch, chunk, config)?;
            let total = tape.value(loss.total).item();
            if !total.is_finite() {
                return Err(Error::Evaluation(format!(
                    "non-finite PPO loss in epoch {epoch} after {} gradient steps",
                    diag.grad_steps
                )));
            }
            let grads = tape.backward(loss.total)?;
            let mut g = collect_grads(&grads, &bound.vars());
            clip_grad_norm(&mut g, config.max_grad_norm);
            state.adam.step(params.tensors_mut(), &g);
            diag.grad_steps += 1;
            pl += tape.value(loss.policy).item();
            vl += tape.value(loss.value).item();
            en += tape.value(loss.entropy).item();
            chunks += 1;
            if last_epoch {
                for &r in tape.value(loss.ratio).data() {
                    kl_sum += (r - 1.0) - r.ln();
                    kl_count += 1;
                }
            }
        }
        if last_epoch {
            let c = chunks as f64;
            diag.policy_loss = pl / c;
            diag.value_loss = vl / c;
            diag.entropy = en / c;
            diag.kl = kl_sum / kl_count.max(1) as f64;
        }
    }
    Ok(diag)
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub mean_primary_reward: f64,
    pub mean_hiding_reward: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub kl: f64,
}

pub fn write_training_log(path: &Path, log: &[IterationLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in log {
        w.serialize(row)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    crate::numcore::checkpoint::write_atomic(path, &bytes)
}

pub fn read_training_log(path: &Path) -> Result<Vec<IterationLog>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::integrity(path, e.to_string())))
        .collect()
}

/// Everything [`train`] needs besides the seed.
#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub objective: Objective,
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    pub policy: PolicyConfig,
    /// Start from these weights instead of a fresh initialization.
    pub warm_start: Option<PolicyParams>,
    pub adversary: Option<AdversaryParams>,
    pub passive_followers: bool,
}

impl TrainSetup {
    pub fn new(objective: Objective, env: EnvConfig, ppo: PpoConfig) -> Self {
        Self {
            objective,
            env,
            ppo,
            policy: PolicyConfig::default(),
            warm_start: None,
            adversary: None,
            passive_followers: false,
        }
    }
}

pub struct TrainOutcome {
    pub params: PolicyParams,
    pub log: Vec<IterationLog>,
}

/// Collect, estimate advantages, update; repeated `total_iterations` times.
pub fn train(setup: &TrainSetup, seed: u64) -> Result<TrainOutcome> {
    train_with_progress(setup, seed, |_| {})
}

pub fn train_with_progress(
    setup: &TrainSetup,
    seed: u64,
    mut progress: impl FnMut(&IterationLog),
) -> Result<TrainOutcome> {
    setup.env.validate()?;
    setup.ppo.validate()?;
    if setup.objective == Objective::Hiding && setup.adversary.is_none() {
        return Err(Error::Config("hiding objective needs an adversary".into()));
    }
    let adversary = match setup.objective {
        Objective::Hiding => setup.adversary.as_ref(),
        Objective::Naive => None,
    };
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut params = match &setup.warm_start {
        Some(p) => p.clone(),
        None => PolicyParams::init(&mut ChaCha8Rng::seed_from_u64(seeds.next_u64()), &setup.policy),
    };
    let mut state = PpoState::new(&setup.ppo, seeds.next_u64());
    let options = RolloutOptions {
        lambda_mu: setup.ppo.lambda_mu,
        passive_followers: setup.passive_followers,
        ..RolloutOptions::for_env(&setup.env)
    };
    let mut log = Vec::with_capacity(setup.ppo.total_iterations);
    for iteration in 0..setup.ppo.total_iterations {
        let mut batch = collect_rollouts_with(
            &params,
            &setup.env,
            adversary,
            setup.ppo.episodes_per_batch,
            seeds.next_u64(),
            &options,
        )?;
        compute_advantages(&mut batch, &setup.ppo);
        let diag = ppo_update(&mut params, &batch, &setup.ppo, &mut state).map_err(|e| match e {
            Error::Evaluation(msg) => Error::Evaluation(format!("iteration {iteration}: {msg}")),
            other => other,
        })?;
        let row = IterationLog {
            iteration,
            mean_primary_reward: batch.mean_primary_reward(),
            mean_hiding_reward: batch.mean_hiding_reward(),
            policy_loss: diag.policy_loss,
            value_loss: diag.value_loss,
            entropy: diag.entropy,
            kl: diag.kl,
        };
        log::info!(
            "iter {iteration}: primary {:.2} hiding {:.2} entropy {:.3} kl {:.4}",
            row.mean_primary_reward,
            row.mean_hiding_reward,
            row.entropy,
            row.kl
        );
        progress(&row);
        log.push(row);
    }
    Ok(TrainOutcome { params, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_env() -> EnvConfig {
        EnvConfig {
            horizon: 6,
            n_agents: 3,
            ..EnvConfig::default()
        }
    }

    fn params() -> PolicyParams {
        PolicyParams::init(&mut ChaCha8Rng::seed_from_u64(3), &PolicyConfig::default())
    }

    #[test]
    fn rollout_shapes_and_zero_hiding() {
        let b = collect_rollouts(&params(), &small_env(), None, 3, 1).unwrap();
        assert_eq!(b.episodes.len(), 3);
        for e in &b.episodes {
            assert_eq!(e.len(), 6);
            assert_eq!(e.states.len(), 6);
            assert!(e.actions.iter().all(|a| a.len() == 3));
            assert!(e.hiding.iter().flatten().all(|&m| m == 0.0));
            assert!(e.adversary_probs.is_none());
        }
    }

    #[test]
    fn rollouts_are_deterministic() {
        let a = collect_rollouts(&params(), &small_env(), None, 2, 9).unwrap();
        let b = collect_rollouts(&params(), &small_env(), None, 2, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn update_requires_advantages() {
        let b = collect_rollouts(&params(), &small_env(), None, 1, 1).unwrap();
        let cfg = PpoConfig::default();
        let mut st = PpoState::new(&cfg, 0);
        assert!(ppo_update(&mut params(), &b, &cfg, &mut st).is_err());
    }

    #[test]
    fn hiding_objective_needs_adversary() {
        let setup = TrainSetup::new(Objective::Hiding, small_env(), PpoConfig::default());
        assert!(matches!(train(&setup, 0), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = PpoConfig::default();
        c.clip_ratio = 1.0;
        assert!(c.validate().is_err());
        c.clip_ratio = 0.2;
        c.gamma = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn passive_followers_noop_and_inactive() {
        let opts = RolloutOptions {
            passive_followers: true,
            ..RolloutOptions::for_env(&small_env())
        };
        let b = collect_rollouts_with(&params(), &small_env(), None, 2, 4, &opts).unwrap();
        for e in &b.episodes {
            for (i, &a) in e.active.iter().enumerate() {
                assert_eq!(a, i == e.leader());
            }
            for row in &e.actions {
                for (i, a) in row.iter().enumerate() {
                    if i != e.leader() {
                        assert_eq!(*a, Action::Noop);
                    }
                }
            }
        }
        assert_eq!(b.transitions(), 2 * 6);
    }

    #[test]
    fn csv_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        let rows = vec![IterationLog {
            iteration: 0,
            mean_primary_reward: 1.5,
            mean_hiding_reward: -2.0,
            policy_loss: 0.1,
            value_loss: 0.2,
            entropy: 1.6,
            kl: 0.01,
        }];
        write_training_log(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "iteration,mean_primary_reward,mean_hiding_reward,policy_loss,value_loss,entropy,kl"
        );
        assert_eq!(read_training_log(&p).unwrap(), rows);
    }
}
