"""Compact soft actor-critic driven by image-metric rewards, plus the
evaluation harness and a scripted controller used to validate it."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RenderConfig, RlConfig
from .envs import (POINTMASS, POINTMASS_STEP, REACHER, REACHER_STEP, EnvState,
                   move_distractor, random_state, reacher_end_effector, render, step,
                   true_distance)
from .metric import GoalMetric, huber_np
from .networks import MLP, Module
from .training import Adam

log = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


class RLDiverged(RuntimeError):
    pass


def symlog(x):
    return np.sign(x) * np.log1p(np.abs(x))


def symexp(x):
    return np.sign(x) * np.expm1(np.abs(x))


def policy_observation(s: EnvState) -> np.ndarray:
    """Low-dimensional policy input: position, or (cos, sin) of both joints."""
    if s.kind == POINTMASS:
        return s.agent.astype(np.float64).copy()
    return np.concatenate([np.cos(s.agent), np.sin(s.agent)])


def observation_dim(kind: str) -> int:
    return 2 if kind == POINTMASS else 4


class ReplayBuffer:
    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.act = np.zeros((capacity, act_dim))
        self.rew = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.ptr = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def push(self, obs, act, rew, next_obs, done) -> None:
        i = self.ptr
        self.obs[i], self.act[i], self.rew[i] = obs, act, rew
        self.next_obs[i], self.done[i] = next_obs, float(done)
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        idx = rng.integers(self.size, size=batch_size)
        return {"obs": self.obs[idx], "act": self.act[idx], "rew": self.rew[idx],
                "next_obs": self.next_obs[idx], "done": self.done[idx]}


class Actor(Module):
    """Tanh-squashed diagonal Gaussian policy."""

    def __init__(self, obs_dim: int, act_dim: int, hidden: int, rng: np.random.Generator):
        self.act_dim = act_dim
        self.net = MLP([obs_dim, hidden, hidden, 2 * act_dim], rng, activation="relu")

    def _heads(self, obs: Tensor) -> tuple[Tensor, Tensor]:
        out = self.net(obs)
        mean = out[:, :self.act_dim]
        raw = ad.tanh(out[:, self.act_dim:])
        log_std = LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (raw + 1.0)
        return mean, log_std

    def sample(self, obs, noise) -> tuple[Tensor, Tensor]:
        """Reparameterized action and its log-density under the squashed Gaussian."""
        mean, log_std = self._heads(ad.as_tensor(obs))
        noise = ad.as_tensor(noise)
        u = mean + ad.exp(log_std) * noise
        action = ad.tanh(u)
        gauss = (-0.5 * ad.square(noise) - log_std - HALF_LOG_2PI).sum(axis=-1)
        # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
        squash = (2.0 * (math.log(2.0) - u - ad.softplus(-2.0 * u))).sum(axis=-1)
        return action, gauss - squash

    def mean_action(self, obs) -> np.ndarray:
        with ad.no_grad():
            mean, _ = self._heads(ad.as_tensor(np.atleast_2d(obs)))
        return np.tanh(mean.data)


class Critic(Module):
    def __init__(self, obs_dim: int, act_dim: int, hidden: int, rng: np.random.Generator):
        self.net = MLP([obs_dim + act_dim, hidden, hidden, 1], rng, activation="relu")

    def __call__(self, obs, act) -> Tensor:
        q = self.net(ad.concat([ad.as_tensor(obs), ad.as_tensor(act)], axis=-1))
        return q.reshape(q.shape[0])


class SAC:
    """Twin critics with polyak-averaged targets and a fixed entropy coefficient.

    Target update: ``target <- polyak * target + (1 - polyak) * online``.

    With ``cfg.critic_space == "symlog"`` the critics regress
    ``symlog(Q)`` against ``symlog`` of a Bellman target computed in reward
    units, and the actor ascends the symlog value. Rewards of the form
    ``-exp(L)`` span several decades; on a linear scale the far-from-goal
    states dominate the critic fit and swamp the differences near the goal.
    """

    def __init__(self, obs_dim: int, act_dim: int, cfg: RlConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.act_dim = act_dim
        self.actor = Actor(obs_dim, act_dim, cfg.hidden, rng)
        self.q1 = Critic(obs_dim, act_dim, cfg.hidden, rng)
        self.q2 = Critic(obs_dim, act_dim, cfg.hidden, rng)
        self.q1_target = Critic(obs_dim, act_dim, cfg.hidden, rng)
        self.q2_target = Critic(obs_dim, act_dim, cfg.hidden, rng)
        self.q1_target.load_arrays(self.q1.state_arrays())
        self.q2_target.load_arrays(self.q2.state_arrays())
        self.critic_params = self.q1.parameters() + self.q2.parameters()
        self.actor_params = self.actor.parameters()
        self.critic_opt = Adam(self.critic_params, lr=cfg.lr)
        self.actor_opt = Adam(self.actor_params, lr=cfg.lr)
        self.updates = 0

    def act(self, obs, rng: np.random.Generator | None = None, deterministic: bool = False):
        if deterministic:
            return self.actor.mean_action(obs)[0]
        noise = rng.standard_normal((1, self.act_dim))
        with ad.no_grad():
            a, _ = self.actor.sample(np.atleast_2d(obs), noise)
        return a.data[0]

    def update(self, batch: dict[str, np.ndarray], rng: np.random.Generator) -> dict[str, float]:
        cfg = self.cfg
        n = len(batch["rew"])
        obs, act, next_obs = (Tensor(batch[k]) for k in ("obs", "act", "next_obs"))
        with ad.no_grad():
            a2, logp2 = self.actor.sample(next_obs, rng.standard_normal((n, self.act_dim)))
            q_next = np.minimum(self._decode(self.q1_target(next_obs, a2).data),
                                self._decode(self.q2_target(next_obs, a2).data))
            target = (cfg.reward_scale * batch["rew"]
                      + cfg.discount * (1.0 - batch["done"]) * (q_next - cfg.entropy_coef * logp2.data))
        y = Tensor(self._encode(target))
        critic_loss = ad.square(self.q1(obs, act) - y).mean() + ad.square(self.q2(obs, act) - y).mean()
        self.critic_opt.step(ad.grad(critic_loss, self.critic_params, create_graph=False))

        a_new, logp = self.actor.sample(obs, rng.standard_normal((n, self.act_dim)))
        q_new = _minimum(self.q1(obs, a_new), self.q2(obs, a_new))
        actor_loss = (cfg.entropy_coef * logp - q_new).mean()
        self.actor_opt.step(ad.grad(actor_loss, self.actor_params, create_graph=False))

        self.soft_update()
        self.updates += 1
        stats = {"critic": critic_loss.item(), "actor": actor_loss.item()}
        if not all(math.isfinite(v) for v in stats.values()):
            raise RLDiverged(f"non-finite loss after {self.updates} updates: {stats}")
        return stats

    def _encode(self, q: np.ndarray) -> np.ndarray:
        return symlog(q) if self.cfg.critic_space == "symlog" else q

    def _decode(self, q: np.ndarray) -> np.ndarray:
        return symexp(q) if self.cfg.critic_space == "symlog" else q

    def q_values(self, obs, act) -> tuple[np.ndarray, np.ndarray]:
        """Both online critics in reward units."""
        obs, act = Tensor(np.atleast_2d(obs)), Tensor(np.atleast_2d(act))
        with ad.no_grad():
            return self._decode(self.q1(obs, act).data), self._decode(self.q2(obs, act).data)

    def soft_update(self) -> None:
        rho = self.cfg.polyak
        for online, target in ((self.q1, self.q1_target), (self.q2, self.q2_target)):
            for p, tp in zip(online.parameters(), target.parameters()):
                tp.data = rho * tp.data + (1.0 - rho) * p.data

    def policy(self) -> Callable[[EnvState], np.ndarray]:
        return lambda s: self.act(policy_observation(s), deterministic=True)


def _minimum(a: Tensor, b: Tensor) -> Tensor:
    mask = Tensor((a.data <= b.data).astype(np.float64))
    return a * mask + b * (1.0 - mask)


# ---------------------------------------------------------------------------
# rewards
# ---------------------------------------------------------------------------

RewardFn = Callable[[EnvState], float]


def metric_reward_fn(metric: GoalMetric, goal: EnvState, render_cfg: RenderConfig) -> RewardFn:
    """Reward computed only from the rendered observation and goal image."""
    goal_embedding = metric.embed(render(goal, render_cfg))

    def reward(s: EnvState) -> float:
        e = metric.embed(render(s, render_cfg))
        return metric.reward_from_loss(float(metric.loss_from_embeddings(e, goal_embedding)))

    return reward


def oracle_reward_fn(goal: EnvState, delta: float = 0.85) -> RewardFn:
    """-exp(L_delta) on the true agent coordinates (diagnostic only)."""
    def target(s):
        return s.agent if s.kind == POINTMASS else reacher_end_effector(s)

    goal_point = target(goal)

    def reward(s: EnvState) -> float:
        return -math.exp(float(huber_np(target(s) - goal_point, delta).sum()))

    return reward


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------

@dataclass
class EpisodeRecord:
    episode: int
    ret: float
    final_distance: float


def sac_train(env_kind: str, goal: EnvState, reward_fn: RewardFn, cfg: RlConfig,
              distractor: bool = False, callback=None) -> tuple[SAC, list[EpisodeRecord]]:
    """Train SAC on a fixed goal; deterministic given ``cfg.seed``.

    The policy sees the true low-dimensional state; the reward comes only
    from ``reward_fn``.
    """
    rng = np.random.default_rng(cfg.seed)
    agent = SAC(observation_dim(env_kind), 2, cfg, rng)
    buffer = ReplayBuffer(cfg.replay_capacity, observation_dim(env_kind), 2)
    curve = []
    total_steps = 0
    for ep in range(cfg.episodes):
        s = random_state(env_kind, rng, distractor)
        ret = 0.0
        for t in range(cfg.horizon):
            o = policy_observation(s)
            if total_steps < cfg.warmup_steps:
                a = rng.uniform(-1.0, 1.0, size=2)
            else:
                a = agent.act(o, rng)
            s2 = move_distractor(step(s, a), rng)
            r = reward_fn(s2)
            done = t == cfg.horizon - 1
            # time-limit ends are not terminal for bootstrapping
            buffer.push(o, a, r, policy_observation(s2), False)
            ret += r
            s = s2
            total_steps += 1
            if total_steps >= cfg.warmup_steps:
                for _ in range(cfg.updates_per_step):
                    agent.update(buffer.sample(cfg.batch_size, rng), rng)
            if done:
                break
        rec = EpisodeRecord(ep, ret, true_distance(s, goal))
        curve.append(rec)
        if callback is not None:
            callback(rec)
    return agent, curve


def evaluate_policy(policy: Callable[[EnvState], np.ndarray], env_kind: str, goal: EnvState,
                    episodes: int, seed: int, horizon: int = 20,
                    distractor: bool = False) -> list[float]:
    """Final-timestep true distance of ``episodes`` deterministic rollouts."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(episodes):
        s = random_state(env_kind, rng, distractor)
        for _ in range(horizon):
            s = move_distractor(step(s, policy(s)), rng)
        out.append(true_distance(s, goal))
    return out


def scripted_controller(goal: EnvState) -> Callable[[EnvState], np.ndarray]:
    """Proportional controller on the true state (point mass) or end effector (reacher)."""
    if goal.kind == POINTMASS:
        return lambda s: np.clip((goal.agent - s.agent) / POINTMASS_STEP, -1.0, 1.0)
    if goal.kind != REACHER:
        raise ValueError(f"unknown environment kind {goal.kind!r}")
    target = reacher_end_effector(goal)

    def control(s: EnvState) -> np.ndarray:
        t1, t2 = s.agent
        l1, l2 = 0.5, 0.4
        jac = np.array([[-l1 * np.sin(t1) - l2 * np.sin(t1 + t2), -l2 * np.sin(t1 + t2)],
                        [l1 * np.cos(t1) + l2 * np.cos(t1 + t2), l2 * np.cos(t1 + t2)]])
        err = target - reacher_end_effector(s)
        dtheta = jac.T @ np.linalg.solve(jac @ jac.T + 1e-2 * np.eye(2), err)
        return np.clip(dtheta / REACHER_STEP, -1.0, 1.0)

    return control


def goal_state(env_kind: str, goal_seed: int, distractor: bool = False) -> EnvState:
    return random_state(env_kind, np.random.default_rng([goal_seed, 7919]), distractor)
