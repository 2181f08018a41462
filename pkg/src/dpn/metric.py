"""Goal metrics on images, the exponential reward built on them, and the
evaluation protocol (rank correlation with true distance, distance traces)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .config import RenderConfig
from .envs import EnvState, random_state, render, true_distance
from .networks import VAE, DpnModel, InverseModel, UpnModel

log = logging.getLogger(__name__)

METRIC_KINDS = ("dpn", "inverse", "vae", "pixel")
LOSS_CLAMP = 700.0
REWARD_SENTINEL = -1e304


def huber_np(x: np.ndarray, delta: float) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax <= delta, 0.5 * x * x, delta * ax - 0.5 * delta * delta)


class GoalMetric:
    """L_delta(o, g) = sum_i huber(f(o)_i - f(g)_i, delta) for an embedding f.

    ``kind="pixel"`` uses the raw pixels as the embedding; the learned kinds
    use the encoder of ``model`` (VAE: the posterior mean).
    """

    def __init__(self, kind: str, model=None, delta: float = 0.85):
        if kind not in METRIC_KINDS + ("upn",):
            raise ValueError(f"unknown metric kind {kind!r}")
        if delta <= 0:
            raise ValueError("delta must be positive")
        if kind != "pixel" and model is None:
            raise ValueError(f"metric kind {kind!r} needs a trained model")
        expected = {"dpn": DpnModel, "upn": UpnModel, "inverse": InverseModel, "vae": VAE}
        if kind != "pixel" and not isinstance(model, expected[kind]):
            raise TypeError(f"metric kind {kind!r} needs a {expected[kind].__name__}, "
                            f"got {type(model).__name__}")
        self.kind = kind
        self.model = model
        self.delta = delta
        self.clamp_count = 0

    @property
    def obs_shape(self):
        return None if self.model is None else self.model.obs_shape

    def embed(self, obs) -> np.ndarray:
        """Embeddings of one observation [C,H,W] or a batch [N,C,H,W]."""
        obs = np.asarray(obs, dtype=np.float64)
        if self.obs_shape is not None and obs.shape[-3:] != tuple(self.obs_shape):
            raise ad.ShapeError(f"metric expects observations of shape {self.obs_shape}, "
                                f"got {obs.shape}")
        if self.kind == "pixel":
            return obs.reshape(obs.shape[:-3] + (-1,)) if obs.ndim >= 3 else obs
        single = obs.ndim == 3
        x = ad.Tensor(obs[None] if single else obs)
        with ad.no_grad():
            e = (self.model.embed(x) if self.kind == "vae" else self.model.encoder(x)).data
        return e[0] if single else e

    def loss_from_embeddings(self, e, e_goal) -> np.ndarray:
        return huber_np(np.asarray(e) - np.asarray(e_goal), self.delta).sum(axis=-1)

    def loss(self, obs, goal) -> float | np.ndarray:
        obs, goal = np.asarray(obs, dtype=np.float64), np.asarray(goal, dtype=np.float64)
        if obs.shape[-3:] != goal.shape[-3:]:
            raise ad.ShapeError(f"observation {obs.shape} and goal {goal.shape} differ")
        out = self.loss_from_embeddings(self.embed(obs), self.embed(goal))
        return float(out) if np.ndim(out) == 0 else out

    def reward(self, obs, goal) -> float:
        return self.reward_from_loss(self.loss(obs, goal))

    def reward_from_loss(self, loss: float) -> float:
        """-exp(loss); losses beyond 700 give a sentinel and bump ``clamp_count``."""
        if loss > LOSS_CLAMP:
            self.clamp_count += 1
            log.warning("reward clamp triggered (loss %.1f); %d so far", loss, self.clamp_count)
            return REWARD_SENTINEL
        return -math.exp(loss)


def metric_loss(o, o_goal, metric: GoalMetric) -> float:
    return metric.loss(o, o_goal)


def dpn_reward(o, o_goal, metric: GoalMetric) -> float:
    return metric.reward(o, o_goal)


# ---------------------------------------------------------------------------
# evaluation protocol
# ---------------------------------------------------------------------------

def spearman(a, b) -> tuple[float, bool]:
    """Spearman rank correlation (average ranks for ties).

    Returns ``(0.0, True)`` when either input has all-equal ranks.
    """
    ra, rb = rankdata(a), rankdata(b)
    da, db = ra - ra.mean(), rb - rb.mean()
    denom = math.sqrt(float(da @ da) * float(db @ db))
    if denom == 0.0:
        return 0.0, True
    return float(da @ db) / denom, False


@dataclass
class CorrelationResult:
    rho: float
    degenerate: bool
    metric_values: np.ndarray
    true_distances: np.ndarray
    kind: str = ""

    def rows(self) -> list[tuple[int, float, float]]:
        return [(i, float(m), float(d))
                for i, (m, d) in enumerate(zip(self.metric_values, self.true_distances))]


def sample_state_pairs(env_kind: str, n_pairs: int, seed: int, distractor: bool = False):
    rng = np.random.default_rng(seed)
    return [(random_state(env_kind, rng, distractor), random_state(env_kind, rng, distractor))
            for _ in range(n_pairs)]


def metric_correlation(metric: GoalMetric, env_kind: str, n_pairs: int, seed: int,
                       render_cfg: RenderConfig, pairs=None) -> CorrelationResult:
    """Spearman correlation between the metric on renderings and true distance."""
    if n_pairs < 10:
        raise ValueError("n_pairs must be >= 10")
    pairs = pairs if pairs is not None else sample_state_pairs(
        env_kind, n_pairs, seed, render_cfg.distractor)
    first = np.stack([render(a, render_cfg) for a, _ in pairs])
    second = np.stack([render(b, render_cfg) for _, b in pairs])
    values = metric.loss_from_embeddings(metric.embed(first), metric.embed(second))
    dists = np.array([true_distance(a, b) for a, b in pairs])
    rho, degenerate = spearman(values, dists)
    return CorrelationResult(rho, degenerate, values, dists, metric.kind)


@dataclass
class Trace:
    values: np.ndarray
    normalized: bool = True
    raw: np.ndarray = field(default_factory=lambda: np.zeros(0))


def latent_distance_trace(observations, metric: GoalMetric, o_goal) -> Trace:
    """Metric loss per timestep divided by its value at t = 0.

    If the initial loss is below 1e-9 the raw trace is returned with
    ``normalized=False``.
    """
    obs = np.asarray(observations, dtype=np.float64)
    raw = np.atleast_1d(metric.loss(obs, o_goal))
    if raw[0] < 1e-9:
        return Trace(raw.copy(), False, raw)
    return Trace(raw / raw[0], True, raw)


def straight_line_states(start: EnvState, goal: EnvState, steps: int) -> list[EnvState]:
    """Point-mass states evenly spaced on the segment from ``start`` to ``goal``."""
    out = []
    for t in np.linspace(0.0, 1.0, steps + 1):
        out.append(EnvState(start.kind, (1 - t) * start.agent + t * goal.agent, start.distractor))
    return out
