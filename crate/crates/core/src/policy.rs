//! Parameter-shared graph-attention policy and value networks.
//!
//! Every agent embeds each teammate from its own egocentric viewpoint with
//! `theta_a`, pools the other followers with scaled dot-product attention,
//! mixes self and pooled embeddings with `theta_b`, appends a partner
//! embedding (the leader for followers, the goal for the leader) and feeds
//! the result to its action and value heads. Followers never see the goal:
//! their rows are built from their own observation only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, NeighborView, Observation, WorldState};
use crate::error::{Error, Result};
use crate::numcore::{
    mlp_forward, Activation, BoundMlp, Checkpoint, Linear, MlpParams, Parameters, Tape, Tensor,
    Var,
};

/// Width of the per-agent feature vector fed to `theta_a`.
pub const AGENT_FEATURES: usize = 6;
/// Width of the goal feature vector fed to `theta_c`.
pub const GOAL_FEATURES: usize = 4;

pub const GROUP_NAMES: [&str; 7] = [
    "theta_a", "theta_b", "theta_c", "theta_d", "theta_e", "theta_f", "theta_g",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub embed_dim: usize,
    pub combine_dim: usize,
    pub head_hidden: usize,
    /// Multiplier on the initial weights of the action output layers.
    pub action_init_scale: f64,
    /// Fixed multiplier on value-head outputs so the head works in O(1) units.
    pub value_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            combine_dim: 32,
            head_hidden: 64,
            action_init_scale: 0.01,
            value_scale: 20.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    /// Agent-state embedder, shared by all agents.
    pub theta_a: MlpParams,
    /// Post-attention combiner, shared by all agents.
    pub theta_b: MlpParams,
    /// Goal embedder (leader only).
    pub theta_c: MlpParams,
    /// Follower action head.
    pub theta_d: MlpParams,
    /// Follower value head.
    pub theta_e: MlpParams,
    /// Leader action head.
    pub theta_f: MlpParams,
    /// Leader value head.
    pub theta_g: MlpParams,
}

fn head(rng: &mut impl Rng, input: usize, hidden: usize, out: usize, scale: f64) -> MlpParams {
    let mut mlp = MlpParams::init(rng, &[input, hidden, out], Activation::Tanh, Activation::Linear);
    if let Some(last) = mlp.layers.last_mut() {
        last.weight.data_mut().iter_mut().for_each(|w| *w *= scale);
    }
    mlp
}

impl PolicyParams {
    pub fn init(rng: &mut impl Rng, config: &PolicyConfig) -> Self {
        let d = config.embed_dim;
        let h_width = config.combine_dim + d;
        let tanh = Activation::Tanh;
        Self {
            theta_a: MlpParams::init(rng, &[AGENT_FEATURES, d], tanh, tanh),
            theta_b: MlpParams::init(rng, &[2 * d, config.combine_dim], tanh, tanh),
            theta_c: MlpParams::init(rng, &[GOAL_FEATURES, d], tanh, tanh),
            theta_d: head(rng, h_width, config.head_hidden, Action::COUNT, config.action_init_scale),
            theta_e: head(rng, h_width, config.head_hidden, 1, 1.0),
            theta_f: head(rng, h_width, config.head_hidden, Action::COUNT, config.action_init_scale),
            theta_g: head(rng, h_width, config.head_hidden, 1, 1.0),
            config: config.clone(),
        }
    }

    pub fn groups(&self) -> [(&'static str, &MlpParams); 7] {
        [
            ("theta_a", &self.theta_a),
            ("theta_b", &self.theta_b),
            ("theta_c", &self.theta_c),
            ("theta_d", &self.theta_d),
            ("theta_e", &self.theta_e),
            ("theta_f", &self.theta_f),
            ("theta_g", &self.theta_g),
        ]
    }

    fn groups_mut(&mut self) -> [&mut MlpParams; 7] {
        [
            &mut self.theta_a,
            &mut self.theta_b,
            &mut self.theta_c,
            &mut self.theta_d,
            &mut self.theta_e,
            &mut self.theta_f,
            &mut self.theta_g,
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundPolicy {
        BoundPolicy {
            value_scale: self.config.value_scale,
            theta_a: self.theta_a.bind(tape),
            theta_b: self.theta_b.bind(tape),
            theta_c: self.theta_c.bind(tape),
            theta_d: self.theta_d.bind(tape),
            theta_e: self.theta_e.bind(tape),
            theta_f: self.theta_f.bind(tape),
            theta_g: self.theta_g.bind(tape),
        }
    }

    pub fn to_checkpoint(&self, config_snapshot: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new("policy", config_snapshot);
        ck.config["policy"] = serde_json::to_value(&self.config).expect("config serializes");
        for (name, mlp) in self.groups() {
            ck.insert_group(name, named_tensors(mlp));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("policy")?;
        let config: PolicyConfig = serde_json::from_value(ck.config["policy"].clone())?;
        let mut params = Self::init(&mut ChaCha8Rng::seed_from_u64(0), &config);
        for (name, mlp) in GROUP_NAMES.iter().zip(params.groups_mut()) {
            let tensors = ck.group(name)?;
            let slots = mlp.tensors_mut();
            if tensors.len() != slots.len() {
                return Err(Error::dim(
                    format!("checkpoint group {name}"),
                    format!("{} tensors, expected {}", tensors.len(), slots.len()),
                ));
            }
            for (slot, t) in slots.into_iter().zip(tensors) {
                if slot.shape() != t.shape() {
                    return Err(Error::dim(
                        format!("checkpoint group {name}"),
                        format!("shape {:?}, expected {:?}", t.shape(), slot.shape()),
                    ));
                }
                *slot = t;
            }
        }
        Ok(params)
    }
}

pub(crate) fn named_tensors(mlp: &MlpParams) -> Vec<(String, &Tensor)> {
    mlp.layers
        .iter()
        .enumerate()
        .flat_map(|(i, l): (usize, &Linear)| {
            [
                (format!("layer{i}.weight"), &l.weight),
                (format!("layer{i}.bias"), &l.bias),
            ]
        })
        .collect()
}

impl Parameters for PolicyParams {
    fn tensors(&self) -> Vec<&Tensor> {
        self.groups()
            .into_iter()
            .flat_map(|(_, m)| m.tensors())
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.groups_mut()
            .into_iter()
            .flat_map(|m| m.tensors_mut())
            .collect()
    }
}

pub struct BoundPolicy {
    pub value_scale: f64,
    pub theta_a: BoundMlp,
    pub theta_b: BoundMlp,
    pub theta_c: BoundMlp,
    pub theta_d: BoundMlp,
    pub theta_e: BoundMlp,
    pub theta_f: BoundMlp,
    pub theta_g: BoundMlp,
}

impl BoundPolicy {
    /// Parameter vars in the order of [`PolicyParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        [
            &self.theta_a,
            &self.theta_b,
            &self.theta_c,
            &self.theta_d,
            &self.theta_e,
            &self.theta_f,
            &self.theta_g,
        ]
        .iter()
        .flat_map(|b| b.vars())
        .collect()
    }
}

pub fn agent_features(view: &NeighborView) -> [f64; AGENT_FEATURES] {
    [
        view.rel_position[0],
        view.rel_position[1],
        view.rel_velocity[0],
        view.rel_velocity[1],
        view.velocity[0],
        view.velocity[1],
    ]
}

/// Index plan for a batched forward pass over many viewers.
///
/// Each viewer contributes embedding rows built only from its own
/// observation. Rows `0..R` of the stacked embedding matrix come from
/// `theta_a`, rows `R..` from `theta_c` (one per leader viewer).
#[derive(Clone, Debug, Default)]
pub struct PolicyBatch {
    agent_rows: Vec<f64>,
    goal_rows: Vec<f64>,
    viewers: Vec<(usize, bool)>,
    self_slots: Vec<Slot>,
    partner_slots: Vec<Slot>,
    key_groups: Vec<Vec<usize>>,
    key_agents: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug)]
enum Slot {
    Agent(usize),
    Goal(usize),
}

impl PolicyBatch {
    pub fn new() -> Self {
        Self::default()
    }

    fn push_agent_row(&mut self, view: &NeighborView) -> usize {
        self.agent_rows.extend_from_slice(&agent_features(view));
        self.agent_rows.len() / AGENT_FEATURES - 1
    }

    /// Adds one viewer. Leaders must carry the goal; followers may not.
    pub fn push(&mut self, obs: &Observation) -> Result<()> {
        let is_leader = obs.agent == obs.leader;
        let n = obs.neighbors.len() + 1;
        let mut keys = Vec::with_capacity(n);
        let mut key_agents = Vec::with_capacity(n);
        if is_leader {
            let goal = obs
                .goal
                .as_ref()
                .ok_or_else(|| Error::arg("leader observation has no goal"))?;
            self.goal_rows.extend_from_slice(&[
                goal.rel_position[0],
                goal.rel_position[1],
                goal.rel_velocity[0],
                goal.rel_velocity[1],
            ]);
            let g = self.goal_rows.len() / GOAL_FEATURES - 1;
            for view in &obs.neighbors {
                keys.push(self.push_agent_row(view));
                key_agents.push(view.index);
            }
            self.self_slots.push(Slot::Goal(g));
            self.partner_slots.push(Slot::Goal(g));
        } else {
            if obs.goal.is_some() {
                return Err(Error::arg("follower observation carries the goal"));
            }
            let own = obs.view_of(obs.agent).expect("self view");
            let me = self.push_agent_row(&own);
            let leader_view = obs
                .neighbor(obs.leader)
                .ok_or_else(|| Error::arg("follower observation lacks the leader"))?;
            let leader_row = self.push_agent_row(leader_view);
            for view in obs.neighbors.iter().filter(|v| v.index != obs.leader) {
                keys.push(self.push_agent_row(view));
                key_agents.push(view.index);
            }
            self.self_slots.push(Slot::Agent(me));
            self.partner_slots.push(Slot::Agent(leader_row));
        }
        self.viewers.push((obs.agent, is_leader));
        self.key_groups.push(keys);
        self.key_agents.push(key_agents);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.viewers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.viewers.is_empty()
    }

    pub fn is_leader(&self, viewer: usize) -> bool {
        self.viewers[viewer].1
    }
}

/// Batched outputs, one row per viewer in push order.
pub struct PolicyForward {
    /// `[V, 5]` log-probabilities.
    pub log_probs: Var,
    /// `[V, 1]`
    pub values: Var,
    /// Attention weights of each viewer, paired with the attended agents.
    pub attention: Vec<(Vec<usize>, Vec<f64>)>,
}

pub fn forward_batch(tape: &mut Tape, bound: &BoundPolicy, batch: &PolicyBatch) -> Result<PolicyForward> {
    let d = tape.value(bound.theta_a.vars()[0]).cols();
    let n_agent_rows = batch.agent_rows.len() / AGENT_FEATURES;
    let n_goal_rows = batch.goal_rows.len() / GOAL_FEATURES;

    let xa = tape.leaf(Tensor::matrix(n_agent_rows, AGENT_FEATURES, batch.agent_rows.clone()));
    let emb = mlp_forward(tape, &bound.theta_a, xa)?;
    let stacked = if n_goal_rows > 0 {
        let xg = tape.leaf(Tensor::matrix(n_goal_rows, GOAL_FEATURES, batch.goal_rows.clone()));
        let goal_emb = mlp_forward(tape, &bound.theta_c, xg)?;
        tape.vstack(&[emb, goal_emb])?
    } else {
        emb
    };
    let slot_row = |s: &Slot| match *s {
        Slot::Agent(r) => r,
        Slot::Goal(g) => n_agent_rows + g,
    };
    let self_rows: Vec<usize> = batch.self_slots.iter().map(slot_row).collect();
    let partner_rows: Vec<usize> = batch.partner_slots.iter().map(slot_row).collect();

    let own = tape.gather_rows(stacked, &self_rows)?;
    let (pooled, weights) =
        tape.attention(own, emb, batch.key_groups.clone(), 1.0 / d as f64)?;
    let mixed_in = tape.concat_cols(&[own, pooled])?;
    let mixed = mlp_forward(tape, &bound.theta_b, mixed_in)?;
    let partner = tape.gather_rows(stacked, &partner_rows)?;
    let final_emb = tape.concat_cols(&[mixed, partner])?;

    let follower_idx: Vec<usize> = (0..batch.len()).filter(|&v| !batch.is_leader(v)).collect();
    let leader_idx: Vec<usize> = (0..batch.len()).filter(|&v| batch.is_leader(v)).collect();
    let mut logit_parts = Vec::new();
    let mut value_parts = Vec::new();
    for (rows, action_head, value_head) in [
        (&follower_idx, &bound.theta_d, &bound.theta_e),
        (&leader_idx, &bound.theta_f, &bound.theta_g),
    ] {
        if rows.is_empty() {
            continue;
        }
        let h = tape.gather_rows(final_emb, rows)?;
        logit_parts.push(mlp_forward(tape, action_head, h)?);
        value_parts.push(mlp_forward(tape, value_head, h)?);
    }
    // restore push order
    let mut order = vec![0; batch.len()];
    for (pos, &v) in follower_idx.iter().chain(&leader_idx).enumerate() {
        order[v] = pos;
    }
    let logits = tape.vstack(&logit_parts)?;
    let logits = tape.gather_rows(logits, &order)?;
    let values = tape.vstack(&value_parts)?;
    let values = tape.gather_rows(values, &order)?;
    let values = tape.scale(values, bound.value_scale);
    let log_probs = tape.log_softmax_rows(logits)?;

    let attention = batch
        .key_agents
        .iter()
        .cloned()
        .zip(weights.iter().cloned())
        .collect();
    Ok(PolicyForward {
        log_probs,
        values,
        attention,
    })
}

/// Action distribution and value of one agent.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentOutput {
    pub probs: Vec<f64>,
    pub value: f64,
    /// Attended agents and their weights.
    pub attention: (Vec<usize>, Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointActionDistribution {
    pub agents: Vec<AgentOutput>,
}

impl JointActionDistribution {
    pub fn n(&self) -> usize {
        self.agents.len()
    }
}

fn single(params: &PolicyParams, obs: &Observation) -> Result<AgentOutput> {
    let mut batch = PolicyBatch::new();
    batch.push(obs)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = forward_batch(&mut tape, &bound, &batch)?;
    let probs = tape.value(out.log_probs).data().iter().map(|l| l.exp()).collect();
    Ok(AgentOutput {
        probs,
        value: tape.value(out.values).item(),
        attention: out.attention.into_iter().next().expect("one viewer"),
    })
}

/// Embeddings of every agent from `obs.agent`'s viewpoint, in agent order.
/// For the leader the self slot holds the goal embedding.
pub fn embed_agents(params: &PolicyParams, obs: &Observation) -> Result<Vec<Vec<f64>>> {
    let n = obs.neighbors.len() + 1;
    let mut rows = Vec::with_capacity(n * AGENT_FEATURES);
    for j in 0..n {
        let view = obs
            .view_of(j)
            .ok_or_else(|| Error::arg(format!("agent {j} missing from observation")))?;
        rows.extend_from_slice(&agent_features(&view));
    }
    let mut embedded = params
        .theta_a
        .forward_values(&Tensor::matrix(n, AGENT_FEATURES, rows))?;
    if let Some(goal) = &obs.goal {
        let g = Tensor::matrix(
            1,
            GOAL_FEATURES,
            vec![
                goal.rel_position[0],
                goal.rel_position[1],
                goal.rel_velocity[0],
                goal.rel_velocity[1],
            ],
        );
        let h_goal = params.theta_c.forward_values(&g)?;
        let d = h_goal.cols();
        embedded.data_mut()[obs.agent * d..(obs.agent + 1) * d].copy_from_slice(h_goal.data());
    }
    Ok((0..n).map(|j| embedded.row(j).to_vec()).collect())
}

/// Dot-product attention of one embedding over a set of others.
/// Returns the pooled vector and the weights; an empty set pools to zero.
pub fn attention_pool(own: &[f64], others: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = own.len();
    if let Some(bad) = others.iter().find(|o| o.len() != d) {
        return Err(Error::dim("attention_pool", format!("width {} vs {d}", bad.len())));
    }
    let mut tape = Tape::new();
    let q = tape.leaf(Tensor::matrix(1, d, own.to_vec()));
    let keys = tape.leaf(Tensor::matrix(
        others.len(),
        d,
        others.iter().flatten().copied().collect(),
    ));
    let (pooled, weights) = tape.attention(q, keys, vec![(0..others.len()).collect()], 1.0 / d as f64)?;
    Ok((tape.value(pooled).data().to_vec(), weights[0].clone()))
}

/// Follower `follower`'s distribution and value. Reads only that follower's
/// own observation.
pub fn follower_forward(
    params: &PolicyParams,
    observations: &[Observation],
    follower: usize,
) -> Result<AgentOutput> {
    let obs = observations
        .get(follower)
        .ok_or_else(|| Error::arg(format!("no observation for agent {follower}")))?;
    if obs.leader == follower {
        return Err(Error::arg(format!("agent {follower} is the leader")));
    }
    single(params, obs)
}

pub fn leader_forward(params: &PolicyParams, observations: &[Observation]) -> Result<AgentOutput> {
    let leader = observations
        .first()
        .map(|o| o.leader)
        .ok_or_else(|| Error::arg("no observations"))?;
    let obs = &observations[leader];
    if obs.goal.is_none() {
        return Err(Error::arg("leader observation is missing the goal"));
    }
    single(params, obs)
}

pub fn joint_distribution(params: &PolicyParams, state: &WorldState) -> Result<JointActionDistribution> {
    let dists = evaluate_states(params, std::slice::from_ref(state))?;
    Ok(dists.into_iter().next().expect("one state"))
}

/// One batched forward over every agent of every state.
pub fn evaluate_states(params: &PolicyParams, states: &[WorldState]) -> Result<Vec<JointActionDistribution>> {
    let mut batch = PolicyBatch::new();
    for s in states {
        for i in 0..s.n() {
            batch.push(&crate::env::observe(s, i))?;
        }
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = forward_batch(&mut tape, &bound, &batch)?;
    let logp = tape.value(out.log_probs);
    let values = tape.value(out.values);
    let mut attention = out.attention.into_iter();
    let mut row = 0;
    Ok(states
        .iter()
        .map(|s| {
            let agents = (0..s.n())
                .map(|_| {
                    let o = AgentOutput {
                        probs: logp.row(row).iter().map(|l| l.exp()).collect(),
                        value: values.data()[row],
                        attention: attention.next().expect("viewer"),
                    };
                    row += 1;
                    o
                })
                .collect();
            JointActionDistribution { agents }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActMode {
    Sample,
    Greedy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActOutput {
    pub actions: Vec<Action>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
}

/// Lowest index among the maxima.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

pub fn choose(dist: &JointActionDistribution, rng: &mut impl Rng, mode: ActMode) -> ActOutput {
    let mut out = ActOutput {
        actions: Vec::with_capacity(dist.n()),
        log_probs: Vec::with_capacity(dist.n()),
        values: Vec::with_capacity(dist.n()),
    };
    for agent in &dist.agents {
        let a = match mode {
            ActMode::Greedy => argmax(&agent.probs),
            ActMode::Sample => sample_categorical(&agent.probs, rng),
        };
        out.actions.push(Action::ALL[a]);
        out.log_probs.push(agent.probs[a].ln());
        out.values.push(agent.value);
    }
    out
}

/// Picks every agent's action independently from its own distribution.
pub fn act(params: &PolicyParams, state: &WorldState, rng: &mut impl Rng, mode: ActMode) -> Result<ActOutput> {
    let dist = joint_distribution(params, state)?;
    Ok(choose(&dist, rng, mode))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Env, EnvConfig};

    fn setup(n: usize, seed: u64) -> (PolicyParams, WorldState) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = PolicyParams::init(&mut rng, &PolicyConfig::default());
        let env = Env::new(EnvConfig::default()).unwrap();
        let mut s = env.reset(seed, n).unwrap();
        for a in s.agents.iter_mut() {
            a.velocity = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
        }
        (params, s)
    }

    #[test]
    fn follower_forward_rejects_leader() {
        let (p, s) = setup(4, 1);
        let obs: Vec<_> = (0..4).map(|i| crate::env::observe(&s, i)).collect();
        assert!(follower_forward(&p, &obs, s.leader).is_err());
    }

    #[test]
    fn leader_forward_requires_goal() {
        let (p, s) = setup(4, 2);
        let mut obs: Vec<_> = (0..4).map(|i| crate::env::observe(&s, i)).collect();
        obs[s.leader].goal = None;
        assert!(leader_forward(&p, &obs).is_err());
    }

    #[test]
    fn two_agent_team_runs() {
        let (p, s) = setup(2, 3);
        let dist = joint_distribution(&p, &s).unwrap();
        let follower = 1 - s.leader;
        assert!(dist.agents[follower].attention.1.is_empty());
        assert_eq!(dist.agents[s.leader].attention.1, vec![1.0]);
    }

    #[test]
    fn batched_matches_single_agent_paths() {
        let (p, s) = setup(5, 4);
        let obs: Vec<_> = (0..5).map(|i| crate::env::observe(&s, i)).collect();
        let dist = joint_distribution(&p, &s).unwrap();
        for i in 0..5 {
            let single = if i == s.leader {
                leader_forward(&p, &obs).unwrap()
            } else {
                follower_forward(&p, &obs, i).unwrap()
            };
            for (a, b) in single.probs.iter().zip(&dist.agents[i].probs) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let (p, _) = setup(3, 5);
        let ck = p.to_checkpoint(serde_json::json!({}));
        assert_eq!(ck.groups.keys().cloned().collect::<Vec<_>>(), GROUP_NAMES.to_vec());
        let back = PolicyParams::from_checkpoint(&ck).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }
}
