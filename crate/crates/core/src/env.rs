//! Planar leader-follower goal-reaching world.
//!
//! Agents are double integrators driven by one of five discrete
//! accelerations. Only the leader observes the goal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scale of the per-step progress reward.
pub const REWARD_SCALE: f64 = 100.0;

pub type Vec2 = [f64; 2];

fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn norm(v: Vec2) -> f64 {
    v[0].hypot(v[1])
}

pub fn distance(a: Vec2, b: Vec2) -> f64 {
    norm(sub(a, b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub n_agents: usize,
    pub horizon: usize,
    pub dt: f64,
    pub damping: f64,
    pub accel_mag: f64,
    pub v_max: f64,
    pub spawn_half_width: f64,
    pub goal_r_min: f64,
    pub goal_r_max: f64,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            n_agents: 6,
            horizon: 50,
            dt: 0.1,
            damping: 0.25,
            accel_mag: 2.0,
            v_max: 1.0,
            spawn_half_width: 0.5,
            goal_r_min: 0.8,
            goal_r_max: 1.6,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("env: {msg}")));
        if self.n_agents < 2 {
            return bad("n_agents must be at least 2");
        }
        if self.horizon == 0 {
            return bad("horizon must be positive");
        }
        if !(self.dt > 0.0) || !(0.0..1.0).contains(&self.damping) {
            return bad("need dt > 0 and damping in [0, 1)");
        }
        if !(self.accel_mag > 0.0) || !(self.v_max > 0.0) || !(self.spawn_half_width >= 0.0) {
            return bad("accel_mag, v_max must be positive and spawn_half_width non-negative");
        }
        if !(0.0 <= self.goal_r_min && self.goal_r_min <= self.goal_r_max) {
            return bad("need 0 <= goal_r_min <= goal_r_max");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub position: Vec2,
    pub velocity: Vec2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub agents: Vec<AgentState>,
    pub goal: Vec2,
    pub leader: usize,
    pub t: usize,
}

impl WorldState {
    pub fn n(&self) -> usize {
        self.agents.len()
    }

    pub fn positions(&self) -> Vec<Vec2> {
        self.agents.iter().map(|a| a.position).collect()
    }

    pub fn leader_distance(&self) -> f64 {
        distance(self.goal, self.agents[self.leader].position)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    AccelPosX,
    AccelNegX,
    AccelPosY,
    AccelNegY,
    Noop,
}

impl Action {
    pub const COUNT: usize = 5;
    pub const ALL: [Action; Action::COUNT] = [
        Action::AccelPosX,
        Action::AccelNegX,
        Action::AccelPosY,
        Action::AccelNegY,
        Action::Noop,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::arg(format!("action index {i} out of range")))
    }

    /// Unit acceleration direction.
    pub fn direction(self) -> Vec2 {
        match self {
            Action::AccelPosX => [1.0, 0.0],
            Action::AccelNegX => [-1.0, 0.0],
            Action::AccelPosY => [0.0, 1.0],
            Action::AccelNegY => [0.0, -1.0],
            Action::Noop => [0.0, 0.0],
        }
    }
}

/// Primary progress reward of each agent for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRewards(pub Vec<f64>);

/// Another agent as seen from the observer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NeighborView {
    pub index: usize,
    pub rel_position: Vec2,
    pub rel_velocity: Vec2,
    pub velocity: Vec2,
}

/// The goal as seen from the leader.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GoalView {
    pub rel_position: Vec2,
    /// Goal velocity relative to the leader, i.e. the leader's negated velocity.
    pub rel_velocity: Vec2,
}

/// Egocentric observation of one agent.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Observation {
    pub agent: usize,
    pub leader: usize,
    pub own_velocity: Vec2,
    /// All other agents in index order.
    pub neighbors: Vec<NeighborView>,
    /// Present only in the leader's observation.
    pub goal: Option<GoalView>,
}

impl Observation {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("observation serializes")
    }

    pub fn neighbor(&self, index: usize) -> Option<&NeighborView> {
        self.neighbors.iter().find(|v| v.index == index)
    }

    /// View of agent `index`; the observer sees itself at the origin.
    pub fn view_of(&self, index: usize) -> Option<NeighborView> {
        if index == self.agent {
            return Some(NeighborView {
                index,
                rel_position: [0.0, 0.0],
                rel_velocity: [0.0, 0.0],
                velocity: self.own_velocity,
            });
        }
        self.neighbor(index).cloned()
    }
}

#[derive(Clone, Debug)]
pub struct Env {
    pub config: EnvConfig,
}

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    /// Fresh episode fully determined by `seed`.
    pub fn reset(&self, seed: u64, n: usize) -> Result<WorldState> {
        if n < 2 {
            return Err(Error::arg(format!("need at least 2 agents, got {n}")));
        }
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hw = c.spawn_half_width;
        let agents = (0..n)
            .map(|_| AgentState {
                position: [rng.random_range(-hw..=hw), rng.random_range(-hw..=hw)],
                velocity: [0.0, 0.0],
            })
            .collect();
        let radius = rng.random_range(c.goal_r_min..=c.goal_r_max);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let goal = [radius * angle.cos(), radius * angle.sin()];
        let leader = rng.random_range(0..n);
        Ok(WorldState {
            agents,
            goal,
            leader,
            t: 0,
        })
    }

    pub fn step(&self, state: &WorldState, actions: &[Action]) -> Result<(WorldState, StepRewards)> {
        if actions.len() != state.n() {
            return Err(Error::arg(format!(
                "{} actions for {} agents",
                actions.len(),
                state.n()
            )));
        }
        let c = &self.config;
        let mut next = state.clone();
        let mut rewards = Vec::with_capacity(state.n());
        for (agent, action) in next.agents.iter_mut().zip(actions) {
            let before = distance(state.goal, agent.position);
            let dir = action.direction();
            for k in 0..2 {
                let v = (1.0 - c.damping) * agent.velocity[k] + c.accel_mag * dir[k] * c.dt;
                agent.velocity[k] = v.clamp(-c.v_max, c.v_max);
                agent.position[k] += agent.velocity[k] * c.dt;
            }
            let after = distance(state.goal, agent.position);
            rewards.push(REWARD_SCALE * (before - after));
        }
        next.t += 1;
        Ok((next, StepRewards(rewards)))
    }

    pub fn observe(&self, state: &WorldState, agent: usize) -> Observation {
        observe(state, agent)
    }

    pub fn episode_done(&self, state: &WorldState) -> bool {
        episode_done(state, self.config.horizon)
    }
}

pub fn observe(state: &WorldState, agent: usize) -> Observation {
    let me = state.agents[agent];
    let neighbors = state
        .agents
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != agent)
        .map(|(j, other)| NeighborView {
            index: j,
            rel_position: sub(other.position, me.position),
            rel_velocity: sub(other.velocity, me.velocity),
            velocity: other.velocity,
        })
        .collect();
    let goal = (agent == state.leader).then(|| GoalView {
        rel_position: sub(state.goal, me.position),
        rel_velocity: [-me.velocity[0], -me.velocity[1]],
    });
    Observation {
        agent,
        leader: state.leader,
        own_velocity: me.velocity,
        neighbors,
        goal,
    }
}

pub fn episode_done(state: &WorldState, horizon: usize) -> bool {
    state.t >= horizon
}
