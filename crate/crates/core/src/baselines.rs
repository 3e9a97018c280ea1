//! Scripted proportional-derivative leader-follower controller.

use serde::{Deserialize, Serialize};

use crate::env::{Action, Vec2, WorldState};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdGains {
    pub kp: f64,
    pub kd: f64,
    /// Commands with a smaller norm map to no-op.
    pub deadband: f64,
}

impl Default for PdGains {
    fn default() -> Self {
        Self {
            kp: 2.0,
            kd: 1.0,
            deadband: 0.05,
        }
    }
}

impl PdGains {
    pub fn validate(&self) -> Result<()> {
        if !(self.kp > 0.0) || !(self.kd >= 0.0) || !(self.deadband >= 0.0) {
            return Err(Error::Config("pd gains need kp > 0, kd >= 0, deadband >= 0".into()));
        }
        Ok(())
    }
}

/// Dominant-axis quantization of a continuous command; x wins ties.
pub fn quantize(command: Vec2, deadband: f64) -> Action {
    let [x, y] = command;
    if x.hypot(y) < deadband {
        Action::Noop
    } else if x.abs() >= y.abs() {
        if x > 0.0 {
            Action::AccelPosX
        } else {
            Action::AccelNegX
        }
    } else if y > 0.0 {
        Action::AccelPosY
    } else {
        Action::AccelNegY
    }
}

fn pd(target: Vec2, position: Vec2, velocity: Vec2, gains: &PdGains) -> Vec2 {
    [
        gains.kp * (target[0] - position[0]) - gains.kd * velocity[0],
        gains.kp * (target[1] - position[1]) - gains.kd * velocity[1],
    ]
}

/// Leader tracks the goal; followers track the leader with zero offset.
pub fn scripted_pd_act(state: &WorldState, gains: &PdGains) -> Vec<Action> {
    let leader = state.agents[state.leader];
    state
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let target = if i == state.leader { state.goal } else { leader.position };
            quantize(pd(target, a.position, a.velocity, gains), gains.deadband)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{AgentState, Env, EnvConfig};

    fn world(leader_pos: Vec2, goal: Vec2) -> WorldState {
        WorldState {
            agents: vec![
                AgentState {
                    position: leader_pos,
                    velocity: [0.0, 0.0],
                },
                AgentState {
                    position: [0.3, -0.2],
                    velocity: [0.0, 0.0],
                },
            ],
            goal,
            leader: 0,
            t: 0,
        }
    }

    #[test]
    fn leader_at_goal_idles() {
        let s = world([1.0, 1.0], [1.0, 1.0]);
        assert_eq!(scripted_pd_act(&s, &PdGains::default())[0], Action::Noop);
    }

    #[test]
    fn leader_left_of_goal_pushes_right() {
        let s = world([-1.0, 0.0], [1.0, 0.0]);
        assert_eq!(scripted_pd_act(&s, &PdGains::default())[0], Action::AccelPosX);
    }

    #[test]
    fn quantize_ties_and_deadband() {
        assert_eq!(quantize([0.5, 0.5], 0.05), Action::AccelPosX);
        assert_eq!(quantize([0.0, -0.5], 0.05), Action::AccelNegY);
        assert_eq!(quantize([0.01, 0.02], 0.05), Action::Noop);
    }

    #[test]
    fn gains_validate() {
        assert!(PdGains { kp: 0.0, ..PdGains::default() }.validate().is_err());
        assert!(PdGains::default().validate().is_ok());
    }

    #[test]
    fn leader_reaches_goal() {
        let env = Env::new(EnvConfig::default()).unwrap();
        let gains = PdGains::default();
        for seed in 0..20 {
            let mut s = env.reset(seed, 6).unwrap();
            while !env.episode_done(&s) {
                let a = scripted_pd_act(&s, &gains);
                s = env.step(&s, &a).unwrap().0;
            }
            assert!(s.leader_distance() < 0.1, "seed {seed}: {}", s.leader_distance());
        }
    }
}
