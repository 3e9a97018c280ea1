"""Smoke test for the Python extension.

Build and run:

    cargo build --release -p covert-leader-py --features extension-module
    cp target/release/libcovert_leader_py.so python/covert_leader.so
    python3 python/smoke_test.py
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import covert_leader as cl  # noqa: E402


def check_env_and_policy():
    cfg = cl.Config("env.n_agents = 4\nenv.horizon = 12\n")
    env = cl.Env(cfg)
    state = env.reset(seed=3)
    assert len(state.positions) == 4 and 0 <= state.leader < 4
    policy = cl.Policy.init(0)
    total = 0.0
    steps = 0
    while not env.done(state):
        state, rewards = env.step(state, policy.act(state, seed=steps))
        total += sum(rewards)
        steps += 1
    assert steps == 12 and math.isfinite(total)
    try:
        env.step(state, [0, 0])
    except ValueError:
        pass
    else:
        raise AssertionError("wrong action count must raise ValueError")


def check_adversary():
    adv = cl.Adversary.init(0)
    assert adv.param_count == 966, adv.param_count
    frames = [[(0.1 * t + i, 0.0) for i in range(5)] for t in range(6)]
    probs = adv.predict(frames)
    assert len(probs) == 6 and all(abs(sum(p) - 1.0) < 1e-9 for p in probs)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "adv.json")
        adv.save(path)
        assert cl.Adversary.load(path).predict(frames) == probs


def check_pipeline_and_eval():
    cfg = cl.Config()
    for k, v in [("env.n_agents", "3"), ("env.horizon", "10"), ("ppo.total_iterations", "2"),
                 ("ppo.episodes_per_batch", "4"), ("pipeline.dataset_episodes", "8"),
                 ("pipeline.stage3_iterations", "2"), ("adversary.epochs", "2")]:
        cfg.set(k, v)
    assert "env.horizon = 10" in cfg.to_kv()
    with tempfile.TemporaryDirectory() as d:
        manifest = json.loads(cl.run_pipeline(d, cfg, 7))
        assert manifest["stage3"] is not None
        policy = cl.Policy.load(os.path.join(d, manifest["stage3"]["checkpoint"]))
        adv = cl.Adversary.load(os.path.join(d, manifest["stage2_adversary"]["checkpoint"]))
        report = json.loads(cl.evaluate(cfg, policy, adv, episodes=5, seed=1))
        assert 0.0 <= report["normalized_primary_reward"] <= 1.0
        assert len(report["accuracy_curve"]) == 10
        pd = json.loads(cl.evaluate(cfg, episodes=5, seed=1))
        assert pd["algorithm"] == "scripted-pd"


if __name__ == "__main__":
    check_env_and_policy()
    check_adversary()
    check_pipeline_and_eval()
    print("python smoke test passed")
