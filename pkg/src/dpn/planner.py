"""Gradient descent planner over latent actions, and the DPN / UPN forward passes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .networks import Dynamics, DpnModel, UpnModel


@dataclass
class LatentPlan:
    """Inner-loop trace. ``plans[0]`` is the initialization, ``plans[-1]`` the result.

    ``losses[i]`` is the planning loss of ``plans[i]`` (n_p + 1 entries).
    """

    plans: list[Tensor] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    @property
    def final(self) -> Tensor:
        return self.plans[-1]


def rollout(x_start, z_prime, dyn: Dynamics) -> Tensor:
    """Terminal latent after feeding every step of ``z_prime`` through ``dyn``.

    ``z_prime`` is [T+1, z] or [B, T+1, z]; ``x_start`` is [x] or [B, x].
    """
    z = ad.as_tensor(z_prime)
    if z.ndim not in (2, 3):
        raise ShapeError(f"plan must be [T+1, z] or [B, T+1, z], got {z.shape}")
    x = ad.as_tensor(x_start)
    if (z.ndim == 3) != (x.ndim == 2):
        raise ShapeError(f"batched plan {z.shape} needs batched start state, got {x.shape}")
    for t in range(z.shape[-2]):
        x = dyn(x, z[:, t] if z.ndim == 3 else z[t])
    return x


def plan_loss(x_start, z_prime, x_goal, dyn: Dynamics, delta_plan: float = 1.0) -> Tensor:
    """Huber distance between the rolled-out terminal latent and the goal latent.

    Batched inputs give the sum of the per-example losses.
    """
    x_end = rollout(x_start, z_prime, dyn)
    x_goal = ad.as_tensor(x_goal)
    if x_goal.shape != x_end.shape:
        raise ShapeError(f"goal latent {x_goal.shape} != predicted latent {x_end.shape}")
    return ad.huber(x_end - x_goal, delta_plan).sum()


def gdp_plan(x_start, x_goal, init_z, dyn: Dynamics, step_sizes,
             delta_plan: float = 1.0) -> LatentPlan:
    """Run one gradient step per entry of ``step_sizes`` on the planning loss.

    When gradients are being recorded, the returned plans are differentiable
    with respect to the start/goal latents, the dynamics weights, the step
    sizes and ``init_z``: each inner gradient is itself a graph node.
    """
    outer = ad.is_grad_enabled()
    alphas = ad.as_tensor(step_sizes)
    if alphas.ndim != 1:
        raise ShapeError(f"step sizes must be a vector, got shape {alphas.shape}")
    z = ad.as_tensor(init_z)
    trace = LatentPlan(plans=[z])
    for i in range(alphas.shape[0]):
        with ad.enable_grad(True):
            zi = z if z.requires_grad else Tensor(z.data, requires_grad=True)
            loss = plan_loss(x_start, zi, x_goal, dyn, delta_plan)
            g, = ad.grad(loss, [zi], create_graph=outer)
        trace.losses.append(loss.item())
        z = zi - alphas[i] * g
        if not outer:
            z = z.detach()
        trace.plans.append(z)
    with ad.no_grad():
        trace.losses.append(plan_loss(x_start, z, x_goal, dyn, delta_plan).item())
    return trace


def dpn_forward(o_start, o_goal, init_z, model: DpnModel,
                delta_plan: float = 1.0) -> tuple[Tensor, LatentPlan]:
    """Encode both frames, plan from ``init_z`` and decode the final plan.

    ``init_z`` is a posterior sample during training and a prior (standard
    normal) sample at deployment.
    """
    x = model.encoder(o_start)
    xg = model.encoder(o_goal)
    trace = gdp_plan(x, xg, init_z, model.dynamics, model.alphas, delta_plan)
    return model.decoder(trace.final), trace


def upn_forward_deterministic(o_start, o_goal, model: UpnModel, init_actions,
                              delta_plan: float = 1.0) -> Tensor:
    """Plan directly in action space starting from U(-1, 1) draws ``init_actions``."""
    x = model.encoder(o_start)
    xg = model.encoder(o_goal)
    return gdp_plan(x, xg, init_actions, model.dynamics, model.alphas, delta_plan).final


def prior_sample(rng: np.random.Generator, horizon: int, z_dim: int) -> Tensor:
    return Tensor(rng.standard_normal((horizon + 1, z_dim)))
