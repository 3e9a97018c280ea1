use covert_leader::env::*;
use covert_leader::numcore::{MlpParams, Parameters, Tensor};
use covert_leader::policy::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn params(seed: u64) -> PolicyParams {
    PolicyParams::init(&mut ChaCha8Rng::seed_from_u64(seed), &PolicyConfig::default())
}

/// A state with random positions and velocities.
fn random_state(rng: &mut ChaCha8Rng, n: usize) -> WorldState {
    let agents = (0..n)
        .map(|_| AgentState {
            position: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            velocity: [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)],
        })
        .collect();
    WorldState {
        agents,
        goal: [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
        leader: rng.random_range(0..n),
        t: 0,
    }
}

fn row(mlp: &MlpParams, x: &[f64]) -> Vec<f64> {
    mlp.forward_values(&Tensor::matrix(1, x.len(), x.to_vec())).unwrap().into_data()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn oracle_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn oracle_pool(own: &[f64], keys: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = own.len();
    if keys.is_empty() {
        return (vec![0.0; d], vec![]);
    }
    let w = oracle_softmax(&keys.iter().map(|k| dot(own, k) / d as f64).collect::<Vec<_>>());
    let mut pooled = vec![0.0; d];
    for (k, wk) in keys.iter().zip(&w) {
        for (p, v) in pooled.iter_mut().zip(k) {
            *p += wk * v;
        }
    }
    (pooled, w)
}

/// Independent re-derivation of one agent's output from its observation.
fn oracle_agent(p: &PolicyParams, obs: &Observation) -> (Vec<f64>, f64, Vec<f64>) {
    let feats = |v: &NeighborView| agent_features(v).to_vec();
    let (own, partner, keys, action, value) = if obs.agent == obs.leader {
        let g = obs.goal.as_ref().unwrap();
        let ge = row(&p.theta_c, &[g.rel_position[0], g.rel_position[1], g.rel_velocity[0], g.rel_velocity[1]]);
        let keys: Vec<Vec<f64>> = obs.neighbors.iter().map(|v| row(&p.theta_a, &feats(v))).collect();
        (ge.clone(), ge, keys, &p.theta_f, &p.theta_g)
    } else {
        let own = row(&p.theta_a, &feats(&obs.view_of(obs.agent).unwrap()));
        let lead = row(&p.theta_a, &feats(obs.neighbor(obs.leader).unwrap()));
        let keys: Vec<Vec<f64>> = obs
            .neighbors
            .iter()
            .filter(|v| v.index != obs.leader)
            .map(|v| row(&p.theta_a, &feats(v)))
            .collect();
        (own, lead, keys, &p.theta_d, &p.theta_e)
    };
    let (pooled, w) = oracle_pool(&own, &keys);
    let mixed = row(&p.theta_b, &[own, pooled].concat());
    let h = [mixed, partner].concat();
    let probs = oracle_softmax(&row(action, &h));
    let value = row(value, &h)[0] * p.config.value_scale;
    (probs, value, w)
}

#[test]
fn embeddings_match_per_agent_oracle() {
    let p = params(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let s = random_state(&mut rng, 5);
        for i in 0..5 {
            let obs = observe(&s, i);
            let emb = embed_agents(&p, &obs).unwrap();
            for (j, e) in emb.iter().enumerate() {
                let want = if j == s.leader && i == s.leader {
                    let g = obs.goal.as_ref().unwrap();
                    row(&p.theta_c, &[g.rel_position[0], g.rel_position[1], g.rel_velocity[0], g.rel_velocity[1]])
                } else {
                    row(&p.theta_a, &agent_features(&obs.view_of(j).unwrap()))
                };
                for (a, b) in e.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn attention_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in 0..6 {
        let own: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let keys: Vec<Vec<f64>> = (0..k).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let (pooled, w) = attention_pool(&own, &keys).unwrap();
        let (want_p, want_w) = oracle_pool(&own, &keys);
        for (a, b) in pooled.iter().zip(&want_p) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in w.iter().zip(&want_w) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn full_forward_matches_oracle() {
    let p = params(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in [2, 3, 6, 9] {
        let s = random_state(&mut rng, n);
        let joint = joint_distribution(&p, &s).unwrap();
        for i in 0..n {
            let (probs, value, w) = oracle_agent(&p, &observe(&s, i));
            let got = &joint.agents[i];
            for (a, b) in got.probs.iter().zip(&probs) {
                assert!((a - b).abs() < 1e-12, "n={n} agent {i}");
            }
            assert!((got.value - value).abs() < 1e-10);
            assert_eq!(got.attention.1.len(), w.len());
            for (a, b) in got.attention.1.iter().zip(&w) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn identical_followers_share_attention() {
    let p = params(6);
    let same = AgentState {
        position: [0.2, 0.2],
        velocity: [0.1, 0.0],
    };
    let s = WorldState {
        agents: vec![
            AgentState {
                position: [-0.5, 0.1],
                velocity: [0.0, 0.3],
            },
            same,
            same,
            same,
        ],
        goal: [1.0, 1.0],
        leader: 0,
        t: 0,
    };
    let out = follower_forward(&p, &(0..4).map(|i| observe(&s, i)).collect::<Vec<_>>(), 1).unwrap();
    assert_eq!(out.attention.0, vec![2, 3]);
    assert_eq!(out.attention.1, vec![0.5, 0.5]);
}

#[test]
fn followers_ignore_goal_bitwise() {
    let p = params(7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let s = random_state(&mut rng, 6);
        let mut moved = s.clone();
        moved.goal = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let a = joint_distribution(&p, &s).unwrap();
        let b = joint_distribution(&p, &moved).unwrap();
        for i in (0..6).filter(|&i| i != s.leader) {
            assert_eq!(a.agents[i], b.agents[i]);
        }
        assert_ne!(a.agents[s.leader].probs, b.agents[s.leader].probs);
    }
}

#[test]
fn parameter_count_is_size_independent() {
    let p = params(9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let count = p.param_count();
    for n in [2, 6, 12, 20] {
        let d = joint_distribution(&p, &random_state(&mut rng, n)).unwrap();
        assert_eq!(d.n(), n);
        assert_eq!(p.param_count(), count);
    }
}

#[test]
fn sampling_frequencies_within_three_sigma() {
    let probs = [0.1, 0.25, 0.05, 0.4, 0.2];
    let draws = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut counts = [0usize; 5];
    for _ in 0..draws {
        counts[sample_categorical(&probs, &mut rng)] += 1;
    }
    for (k, &p) in probs.iter().enumerate() {
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        assert!((counts[k] as f64 - mean).abs() <= 3.0 * sd, "action {k}: {} vs {mean}", counts[k]);
    }
}

#[test]
fn greedy_picks_argmax_per_agent() {
    let p = params(12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let s = random_state(&mut rng, 5);
    let joint = joint_distribution(&p, &s).unwrap();
    let out = act(&p, &s, &mut rng, ActMode::Greedy).unwrap();
    for (i, a) in out.actions.iter().enumerate() {
        assert_eq!(a.index(), argmax(&joint.agents[i].probs));
        assert!((out.log_probs[i] - joint.agents[i].probs[a.index()].ln()).abs() < 1e-15);
    }
}
