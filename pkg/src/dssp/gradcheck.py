"""End-to-end gradient verification of the policy's combined loss.

Builds a synthetic two-window batch over a short random trajectory,
freezes all stochastic draws, and compares reverse-mode gradients of the
combined objective against central finite differences per scalar
parameter.  Parameter values are randomized into finite-difference-
friendly ranges first (see numcore.randomize_for_gradcheck); the exact
mode touches every coordinate, while the sampled mode spot-checks a fixed
number of coordinates per tensor so wide models stay inside a time budget.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import diffusion, model, training
from .config import TrainConfig
from .envs import Trajectory, descriptor_for
from .numcore import (GradCheckReport, ParamStore, compare_gradients_fd, dense_grads,
                      finite_diff_grad, forward_backward, randomize_for_gradcheck,
                      spot_check_gradients)


def tiny_config(variant: str = "full") -> TrainConfig:
    """Smallest architecture that still contains every layer class."""
    return TrainConfig(env="tapcount", H=4, H_a=3, N=2, L=10, inference_steps=5,
                       d_model=8, d_state=4, denoiser_layers=2, encoder_layers=2,
                       batch_size=2, total_steps=1, warmup_steps=0, variant=variant)


def synthetic_trajectory(cfg: TrainConfig, length: int = 9, seed: int = 0) -> Trajectory:
    desc = descriptor_for(cfg.env)
    rng = np.random.Generator(np.random.PCG64(seed))
    return Trajectory(
        observations=rng.uniform(-1.0, 1.0, size=(length + 1, desc.obs_dim)),
        actions=rng.uniform(-1.0, 1.0, size=(length, desc.action_dim)),
        success=True, env_name=cfg.env, seed=seed)


def build_loss_fn(cfg: TrainConfig, params: ParamStore, batch_size: int = 2,
                  seed: int = 0):
    """Deterministic closure computing the combined loss from live params.

    The dynamics target is stop-gradiented in training, i.e. treated as a
    constant held at its current value.  Finite differences measure the
    true total derivative of whatever function they are given, so to check
    the gradient this actually defines, the target values are frozen here
    at the evaluation point; the blocking behavior of stop-gradient itself
    is covered by its own bitwise tests.
    """
    from . import encoders

    desc = descriptor_for(cfg.env)
    m = model.bind_model(params, cfg, desc)
    traj = synthetic_trajectory(cfg, seed=seed)
    sched = diffusion.build_schedule(L=cfg.L, inference_steps=cfg.inference_steps)
    rng = np.random.Generator(np.random.PCG64(seed + 1))
    starts = rng.integers(0, training.valid_starts(traj.length, cfg), size=batch_size)
    taus = rng.integers(1, sched.L + 1, size=batch_size)
    eps = rng.standard_normal((batch_size, cfg.H, desc.action_dim))

    frozen_target = None
    if m.has_history:
        with ad.no_grad():
            probe = training.build_window_batch(m, traj, starts)
        frozen_target = np.array(probe.dyn_target.data)

    def loss_fn(p: ParamStore):
        batch = training.build_window_batch(m, traj, starts)
        loss = diffusion.diffusion_loss(m.den, batch.x0, batch.cond_tokens, sched,
                                        None, taus=taus, eps=eps)
        if m.dyn is not None and cfg.lambda_ > 0:
            l_dyn = encoders.dynamics_loss(m.dyn, batch.dyn_context,
                                           ad.constant(batch.dyn_action),
                                           ad.constant(frozen_target))
            loss = ad.add(loss, ad.mul(float(cfg.lambda_), l_dyn))
        return loss

    return loss_fn


def model_gradcheck(cfg: TrainConfig, rel_tol: float = 1e-4, h: float = 1e-5,
                    mode: str = "exact", coords_per_param: int = 8,
                    seed: int = 0) -> GradCheckReport:
    """Check the combined loss over every parameter of the given config."""
    desc = descriptor_for(cfg.env)
    specs = model.param_specs(cfg, desc)
    params = model.init_model(cfg, desc)
    randomize_for_gradcheck(params, specs, seed)
    loss_fn = build_loss_fn(cfg, params, batch_size=2, seed=seed)
    if mode == "spot":
        return spot_check_gradients(loss_fn, params, rel_tol=rel_tol, h=h,
                                    coords_per_param=coords_per_param, seed=seed)
    value, analytic = forward_backward(loss_fn, params)
    numeric = finite_diff_grad(loss_fn, params, h=h)
    return compare_gradients_fd(dense_grads(params, analytic), numeric, value, rel_tol, h)
