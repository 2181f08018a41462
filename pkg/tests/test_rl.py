import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from dpn.config import ConfigError, RenderConfig, RlConfig
from dpn.envs import EnvState, random_state
from dpn.metric import GoalMetric
from dpn.rl import (SAC, ReplayBuffer, evaluate_policy, goal_state, metric_reward_fn,
                    oracle_reward_fn, policy_observation, sac_train, scripted_controller, symexp,
                    symlog)


def test_replay_roundtrip(rng):
    buf = ReplayBuffer(4, 2, 2)
    with pytest.raises(ValueError):
        buf.sample(1, rng)
    buf.push([0.1, 0.2], [0.3, -0.4], -1.5, [0.5, 0.6], True)
    batch = buf.sample(3, rng)
    for i in range(3):
        assert batch["obs"][i].tolist() == [0.1, 0.2]
        assert batch["act"][i].tolist() == [0.3, -0.4]
        assert batch["rew"][i] == -1.5 and batch["done"][i] == 1.0
        assert batch["next_obs"][i].tolist() == [0.5, 0.6]


def test_replay_wraps_at_capacity(rng):
    buf = ReplayBuffer(3, 1, 1)
    for i in range(5):
        buf.push([i], [0], i, [i], False)
    assert len(buf) == 3
    assert sorted(buf.rew.tolist()) == [2.0, 3.0, 4.0]


def _batch(rng, n=8):
    return {"obs": rng.uniform(-1, 1, (n, 2)), "act": rng.uniform(-1, 1, (n, 2)),
            "rew": rng.normal(size=n), "next_obs": rng.uniform(-1, 1, (n, 2)),
            "done": np.zeros(n)}


def test_polyak_extremes(rng):
    copy = SAC(2, 2, RlConfig(polyak=0.0, hidden=8), rng)
    copy.update(_batch(rng), rng)
    for a, b in zip(copy.q1.parameters(), copy.q1_target.parameters()):
        np.testing.assert_array_equal(a.data, b.data)
    frozen = SAC(2, 2, RlConfig(polyak=1.0, hidden=8), rng)
    before = [p.data.copy() for p in frozen.q2_target.parameters()]
    frozen.update(_batch(rng), rng)
    for b, p in zip(before, frozen.q2_target.parameters()):
        np.testing.assert_array_equal(b, p.data)


def test_polyak_blend(rng):
    agent = SAC(2, 2, RlConfig(polyak=0.9, hidden=8), rng)
    target = [p.data.copy() for p in agent.q1_target.parameters()]
    agent.update(_batch(rng), rng)
    for t, p, tp in zip(target, agent.q1.parameters(), agent.q1_target.parameters()):
        np.testing.assert_allclose(tp.data, 0.9 * t + 0.1 * p.data, atol=1e-15)


def test_actions_bounded(rng):
    agent = SAC(2, 2, RlConfig(hidden=8), rng)
    for _ in range(20):
        o = rng.uniform(-1, 1, 2)
        assert np.all(np.abs(agent.act(o, rng)) <= 1.0)
        assert np.all(np.abs(agent.act(o, deterministic=True)) <= 1.0)


def test_log_prob_matches_numeric_density(rng):
    # density of the squashed action, integrated numerically over a 1-d slice
    agent = SAC(2, 1, RlConfig(hidden=8), rng)
    obs = np.zeros((1, 2))
    noise = np.linspace(-8, 8, 20001)[:, None]
    a, logp = agent.actor.sample(np.repeat(obs, len(noise), axis=0), noise)
    order = np.argsort(a.data[:, 0])
    total = integrate.trapezoid(np.exp(logp.data[order]), a.data[order, 0])
    assert total == pytest.approx(1.0, abs=1e-3)


@pytest.mark.parametrize("space", ["symlog", "linear"])
def test_bandit_q_converges(rng, space):
    """One-step episodes: Q must converge to the reward itself."""
    agent = SAC(2, 2, RlConfig(hidden=32, lr=1e-3, critic_space=space), rng)
    buf = ReplayBuffer(10, 2, 2)
    obs = np.array([0.2, -0.3])
    arms = {(0.5, 0.5): 1.0, (-0.5, -0.5): -0.5}
    for act, r in arms.items():
        buf.push(obs, act, r, obs, True)
    for _ in range(5000):
        agent.update(buf.sample(32, rng), rng)
    for act, r in arms.items():
        q1, q2 = agent.q_values(obs, act)
        assert abs(q1[0] - r) < 1e-2 and abs(q2[0] - r) < 1e-2


@given(st.floats(-1e12, 1e12, allow_nan=False))
def test_symlog_inverts(x):
    y = symexp(symlog(x))
    assert y == pytest.approx(x, rel=1e-12, abs=1e-12)
    assert np.sign(symlog(x)) == np.sign(x)


def test_symlog_compresses_exp_rewards():
    # -exp(L) over L in [0, 12] spans five decades but under 13 symlog units
    q = -np.exp(np.linspace(0.0, 12.0, 50))
    assert np.all(np.diff(symlog(q)) < 0)
    assert symlog(q[0]) - symlog(q[-1]) < 13


def test_critic_space_is_validated():
    with pytest.raises(ConfigError):
        RlConfig(critic_space="log").validate()


def test_policy_observation():
    r = EnvState("reacher", np.array([0.0, np.pi / 2]))
    np.testing.assert_allclose(policy_observation(r), [1.0, 0.0, 0.0, 1.0], atol=1e-15)


def test_oracle_reward_at_goal(rng):
    goal = goal_state("pointmass", 3)
    assert oracle_reward_fn(goal)(goal) == -1.0
    assert goal_state("pointmass", 3).agent.tolist() == goal.agent.tolist()


def test_metric_reward_uses_rendered_images(rng):
    cfg = RenderConfig(height=8, width=8, blob_radius=1.0)
    goal = random_state("pointmass", rng)
    reward = metric_reward_fn(GoalMetric("pixel"), goal, cfg)
    assert reward(goal) == -1.0
    assert reward(random_state("pointmass", rng)) < -1.0


@pytest.mark.parametrize("kind", ["pointmass", "reacher"])
def test_scripted_controller_reaches_goal(kind):
    goal = goal_state(kind, 0)
    dists = evaluate_policy(scripted_controller(goal), kind, goal, 20, 5, horizon=40)
    assert len(dists) == 20 and min(dists) >= 0.0
    assert np.median(dists) < 0.05


def test_scripted_controller_pointmass_default_horizon():
    for seed in range(5):
        goal = goal_state("pointmass", seed)
        assert np.median(evaluate_policy(scripted_controller(goal), "pointmass", goal, 10,
                                         seed)) < 0.05


def test_sac_is_deterministic():
    cfg = RlConfig(episodes=4, horizon=5, warmup_steps=8, hidden=8, batch_size=4)
    goal = goal_state("pointmass", 1)
    runs = [sac_train("pointmass", goal, oracle_reward_fn(goal), cfg)[1] for _ in range(2)]
    assert [(r.ret, r.final_distance) for r in runs[0]] == [(r.ret, r.final_distance)
                                                            for r in runs[1]]
    assert len(runs[0]) == 4
