"""Variational training of the planner model, Adam, segment sampling and
training loops for the VAE, inverse-model and deterministic-planner baselines."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainConfig
from .envs import Dataset
from .losses import LOG_2PI, gaussian_nll, kl_standard_normal, mse  # noqa: F401
from .networks import (VAE, DpnModel, InverseModel, Module, UpnModel, inverse_forward,
                       sample_latents, vae_forward)
from .planner import dpn_forward, gdp_plan, upn_forward_deterministic

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """A loss became non-finite; ``snapshot`` holds the state at failure."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class Segment:
    """(o_t, a_{t:t+T}, o_{t+T+1}); arrays may carry a leading batch axis."""

    obs_start: np.ndarray
    actions: np.ndarray
    obs_goal: np.ndarray
    episode: int = -1
    start: int = -1

    @property
    def batched(self) -> bool:
        return self.actions.ndim == 3

    @property
    def batch_size(self) -> int:
        return self.actions.shape[0] if self.batched else 1


def _eligible(dataset: Dataset, horizon: int) -> np.ndarray:
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    lengths = np.array([ep.length for ep in dataset.episodes])
    ok = np.flatnonzero(lengths >= horizon + 1)
    if ok.size == 0:
        raise ValueError(f"no episode has at least {horizon + 2} observations")
    return ok


def sample_segment(dataset: Dataset, horizon: int, rng: np.random.Generator,
                   _eligible_idx: np.ndarray | None = None) -> Segment:
    """Uniform over long-enough episodes, then uniform over valid start indices."""
    eligible = _eligible(dataset, horizon) if _eligible_idx is None else _eligible_idx
    e = int(eligible[rng.integers(len(eligible))])
    ep = dataset.episodes[e]
    t = int(rng.integers(ep.length - horizon))
    return Segment(ep.observations[t], ep.actions[t:t + horizon + 1],
                   ep.observations[t + horizon + 1], e, t)


def sample_batch(dataset: Dataset, horizon: int, batch_size: int,
                 rng: np.random.Generator) -> Segment:
    eligible = _eligible(dataset, horizon)
    segs = [sample_segment(dataset, horizon, rng, eligible) for _ in range(batch_size)]
    return Segment(np.stack([s.obs_start for s in segs]).astype(np.float64),
                   np.stack([s.actions for s in segs]).astype(np.float64),
                   np.stack([s.obs_goal for s in segs]).astype(np.float64))


def _batch_view(seg: Segment) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if seg.batched:
        return (np.asarray(seg.obs_start, np.float64), np.asarray(seg.actions, np.float64),
                np.asarray(seg.obs_goal, np.float64))
    return (np.asarray(seg.obs_start, np.float64)[None], np.asarray(seg.actions, np.float64)[None],
            np.asarray(seg.obs_goal, np.float64)[None])


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def dpn_loss(seg: Segment, model: DpnModel, cfg: TrainConfig, noise) -> tuple[Tensor, dict]:
    """Single-sample estimate of NLL + beta * KL, averaged over the batch.

    ``noise`` holds standard-normal draws shaped like the latent actions
    ([T+1, z] or [B, T+1, z]).
    """
    o_start, actions, o_goal = _batch_view(seg)
    noise = np.asarray(ad.as_tensor(noise).data)
    if noise.ndim == 2:
        noise = noise[None]
    B = actions.shape[0]
    post = model.inference(Tensor(actions))
    z = sample_latents(post, Tensor(noise))
    # both frames through the encoder in one pass
    latents = model.encoder(Tensor(np.concatenate([o_start, o_goal])))
    x, xg = latents[:B], latents[B:]
    trace = gdp_plan(x, xg, z, model.dynamics, model.alphas, cfg.delta_plan)
    predicted = model.decoder(trace.final)
    nll = gaussian_nll(actions, predicted)
    kl = kl_standard_normal(post.means, post.stds)
    loss = (nll + cfg.beta * kl) * (1.0 / B)
    return loss, {"nll": nll.item() / B, "kl": kl.item() / B, "plan_losses": trace.losses}


def dpn_forward_segment(seg: Segment, model: DpnModel, init_z, delta_plan: float = 1.0):
    """Convenience wrapper over :func:`dpn_forward` for a segment."""
    o_start, _, o_goal = _batch_view(seg)
    if not seg.batched:
        o_start, o_goal = o_start[0], o_goal[0]
    return dpn_forward(Tensor(o_start), Tensor(o_goal), init_z, model, delta_plan)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction; updates parameter arrays in place."""

    def __init__(self, params: list[Tensor], lr: float = 0.0005, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: list[Tensor | np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError(f"got {len(grads)} gradients for {len(self.params)} parameters")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g.data if isinstance(g, Tensor) else np.asarray(g)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------

def _snapshot(model: Module, it: int, parts: dict) -> dict:
    return {
        "iteration": it,
        "losses": {k: v for k, v in parts.items() if k != "plan_losses"},
        "param_norms": {k: float(np.linalg.norm(v.data)) for k, v in model.named_parameters().items()},
        "nonfinite_params": [k for k, v in model.named_parameters().items()
                             if not np.all(np.isfinite(v.data))],
    }


def _optimize(model: Module, cfg: TrainConfig, rng: np.random.Generator, loss_fn,
              callback=None) -> list[dict]:
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    history = []
    for it in range(cfg.iterations):
        loss, parts = loss_fn(rng)
        value = loss.item()
        if not math.isfinite(value):
            snap = _snapshot(model, it, parts)
            raise TrainingDiverged(f"non-finite loss {value} at iteration {it}", snap)
        grads = ad.grad(loss, params, create_graph=False)
        if not all(np.all(np.isfinite(g.data)) for g in grads):
            raise TrainingDiverged(f"non-finite gradient at iteration {it}",
                                   _snapshot(model, it, parts))
        opt.step(grads)
        row = {"iteration": it, "total": value}
        row.update({k: v for k, v in parts.items() if k != "plan_losses"})
        history.append(row)
        if callback is not None:
            callback(it, row)
        if it % 500 == 0:
            log.debug("iteration %d loss %.5f", it, value)
    return history


def train(dataset: Dataset, cfg: TrainConfig, callback=None) -> tuple[DpnModel, list[dict]]:
    """Fit the planner model with Adam on NLL + beta * KL; deterministic given ``cfg.seed``."""
    _check_horizon(dataset, cfg)
    rng = np.random.default_rng(cfg.seed)
    model = DpnModel(dataset.obs_shape, dataset.action_dim, cfg.arch, cfg.n_p,
                     cfg.alpha_init, rng)

    def step(rng):
        seg = sample_batch(dataset, cfg.horizon, cfg.batch_size, rng)
        noise = rng.standard_normal((cfg.batch_size, cfg.horizon + 1, model.z_dim))
        return dpn_loss(seg, model, cfg, noise)

    return model, _optimize(model, cfg, rng, step, callback)


def _check_horizon(dataset: Dataset, cfg: TrainConfig) -> None:
    _eligible(dataset, cfg.horizon)


# -- baselines --------------------------------------------------------------

def vae_loss(obs, vae: VAE, noise) -> tuple[Tensor, dict]:
    """Batch-mean squared reconstruction error (unit variance) plus KL."""
    obs = ad.as_tensor(obs)
    B = obs.shape[0] if obs.ndim == 4 else 1
    _, recon, kl = vae_forward(obs, vae, noise)
    rec = 0.5 * ad.square(recon - obs).sum()
    return (rec + kl) * (1.0 / B), {"recon": rec.item() / B, "kl": kl.item() / B}


def inverse_loss(o_t, o_next, actions, model: InverseModel,
                 forward_weight: float = 1.0) -> tuple[Tensor, dict]:
    """Action MSE plus ``forward_weight`` times the forward-consistency MSE."""
    e_t, e_next, pred, next_hat = inverse_forward(o_t, o_next, model, actions)
    act = mse(pred, actions)
    fwd = mse(next_hat, e_next)
    total = act + forward_weight * fwd if forward_weight else act
    return total, {"action": act.item(), "forward": fwd.item()}


def upn_loss(seg: Segment, model: UpnModel, cfg: TrainConfig, init_actions) -> tuple[Tensor, dict]:
    """MSE between the planned and the executed action sequence."""
    o_start, actions, o_goal = _batch_view(seg)
    init = np.asarray(ad.as_tensor(init_actions).data)
    if init.ndim == 2:
        init = init[None]
    planned = upn_forward_deterministic(Tensor(o_start), Tensor(o_goal), model, Tensor(init),
                                        cfg.delta_plan)
    loss = mse(planned, actions)
    return loss, {"imitation": loss.item()}


def _one_step_pairs(dataset: Dataset, batch_size: int, rng: np.random.Generator):
    seg = sample_batch(dataset, 0, batch_size, rng)
    return seg.obs_start, seg.actions[:, 0], seg.obs_goal


BASELINE_KINDS = ("vae", "inverse", "upn")


def train_baseline(kind: str, dataset: Dataset, cfg: TrainConfig, callback=None):
    """Train one of the comparison models; returns (model, loss history)."""
    rng = np.random.default_rng(cfg.seed)
    if kind == "vae":
        model = VAE(dataset.obs_shape, cfg.arch, rng)

        def step(rng):
            seg = sample_batch(dataset, 0, cfg.batch_size, rng)
            noise = rng.standard_normal((cfg.batch_size, model.latent_dim))
            return vae_loss(Tensor(seg.obs_start), model, Tensor(noise))
    elif kind == "inverse":
        model = InverseModel(dataset.obs_shape, dataset.action_dim, cfg.arch, rng)

        def step(rng):
            o_t, a, o_next = _one_step_pairs(dataset, cfg.batch_size, rng)
            return inverse_loss(Tensor(o_t), Tensor(o_next), Tensor(a), model, cfg.forward_weight)
    elif kind == "upn":
        _check_horizon(dataset, cfg)
        model = UpnModel(dataset.obs_shape, dataset.action_dim, cfg.arch, cfg.n_p,
                         cfg.alpha_init, rng)

        def step(rng):
            seg = sample_batch(dataset, cfg.horizon, cfg.batch_size, rng)
            init = rng.uniform(-1.0, 1.0, (cfg.batch_size, cfg.horizon + 1, dataset.action_dim))
            return upn_loss(seg, model, cfg, init)
    else:
        raise ValueError(f"unknown baseline kind {kind!r}; expected one of {BASELINE_KINDS}")
    return model, _optimize(model, cfg, rng, step, callback)


def history_csv(history: list[dict]) -> str:
    """Loss history as CSV (iteration, total, then model-specific parts)."""
    if not history:
        return "iteration,total\n"
    columns = list(history[0])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in history:
        writer.writerow([row[c] if isinstance(row[c], int) else repr(float(row[c]))
                         for c in columns])
    return buf.getvalue()
