"""Trajectory-wise batch construction, the combined objective, and the
optimization loop.

Each optimization step loads exactly one demonstration, encodes its full
observation sequence once, and samples B window start indices from it.
Every window's condition is assembled only from tokens at or before its
start index; the clean action chunk and the next-state dynamics target
are training labels and may look ahead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import diffusion, encoders, model
from .autodiff import Tensor
from .config import TrainConfig
from .envs import Trajectory, descriptor_for
from .model import PolicyModel
from .numcore import DsspError, GradMap, ParamStore


@dataclass
class WindowBatch:
    """B training windows drawn from a single trajectory."""

    cond_tokens: Tensor            # [B, n_prefix, d_model], graph-connected
    x0: np.ndarray                 # [B, H, d_action] clean chunks
    starts: np.ndarray             # [B] window start indices
    traj_length: int               # number of actions T in the source trajectory
    dyn_context: Tensor | None     # [B, d_model]
    dyn_action: np.ndarray | None  # [B, d_action]
    dyn_target: Tensor | None      # [B, d_model], stop-gradiented in the loss


def valid_starts(traj_length: int, cfg: TrainConfig) -> int:
    """Number of valid window starts: t in [0, T - H_a]."""
    return traj_length - cfg.H_a + 1


def build_window_batch(m: PolicyModel, traj: Trajectory,
                       starts: np.ndarray) -> WindowBatch:
    """Assemble training windows for fixed start indices (no randomness)."""
    T = traj.length
    dtype = m.dtype
    obs = ad.constant(np.ascontiguousarray(traj.observations, dtype=dtype))
    z_all = encoders.encode_observations(m.obs, obs)          # [T+1, d]
    aux = None
    if m.has_history:
        _, aux = encoders.encode_history_full(m.hist, z_all)  # [T+1, d]

    cond = model.condition_from_sequence(m, z_all, aux, starts)

    idx = model.chunk_target_indices(starts, m.cfg.H, m.cfg.N, T)
    x0 = traj.actions[idx].astype(dtype)

    dyn_context = dyn_action = dyn_target = None
    if m.has_history:
        dyn_context = ad.take(aux, starts)
        dyn_action = traj.actions[starts].astype(dtype)
        dyn_target = ad.take(z_all, starts + 1)  # t+1 <= T always holds
    return WindowBatch(cond_tokens=cond, x0=x0, starts=starts, traj_length=T,
                       dyn_context=dyn_context, dyn_action=dyn_action,
                       dyn_target=dyn_target)


def sample_window_batch(dataset: list[Trajectory], m: PolicyModel, B: int,
                        rng: np.random.Generator) -> WindowBatch:
    """Draw one trajectory uniformly, then B window starts from it."""
    if not dataset:
        raise DsspError("empty dataset")
    order = rng.permutation(len(dataset))
    traj = None
    for k in order:
        if valid_starts(dataset[k].length, m.cfg) >= 1:
            traj = dataset[k]
            break
    if traj is None:
        raise DsspError(f"no trajectory long enough for H_a={m.cfg.H_a}")
    starts = rng.integers(0, valid_starts(traj.length, m.cfg), size=B)
    return build_window_batch(m, traj, starts)


def total_loss(batch: WindowBatch, m: PolicyModel, sched: diffusion.DiffusionSchedule,
               lambda_: float, rng: np.random.Generator | None,
               taus: np.ndarray | None = None, eps: np.ndarray | None = None):
    """Combined objective: denoising loss plus weighted dynamics loss.

    Returns (loss Tensor, l_diff float, l_dyn float).  With a zero weight
    the dynamics term is still evaluated for logging, but outside the
    graph, so its parameters receive no gradient.
    """
    l_diff = diffusion.diffusion_loss(m.den, batch.x0, batch.cond_tokens, sched, rng,
                                      taus=taus, eps=eps)
    l_dyn_value = 0.0
    loss = l_diff
    if m.dyn is not None and batch.dyn_context is not None:
        if lambda_ > 0:
            l_dyn = encoders.dynamics_loss(m.dyn, batch.dyn_context,
                                           ad.constant(batch.dyn_action), batch.dyn_target)
            loss = ad.add(l_diff, ad.mul(float(lambda_), l_dyn))
            l_dyn_value = float(l_dyn.data)
        else:
            with ad.no_grad():
                l_dyn = encoders.dynamics_loss(m.dyn, ad.constant(batch.dyn_context.data),
                                               ad.constant(batch.dyn_action),
                                               ad.constant(batch.dyn_target.data))
            l_dyn_value = float(l_dyn.data)
    return loss, float(l_diff.data), l_dyn_value


def lr_at_step(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to the base rate, then cosine decay to zero."""
    if step < 0 or step > cfg.total_steps:
        raise DsspError(f"step {step} outside [0, {cfg.total_steps}]")
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    span = max(cfg.total_steps - cfg.warmup_steps, 1)
    progress = (step - cfg.warmup_steps) / span
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled-weight-decay Adam with bias correction."""

    def __init__(self, params: ParamStore, beta1: float = 0.95, beta2: float = 0.999,
                 weight_decay: float = 1e-6, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2 = beta1, beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, grads: GradMap, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= lr * update
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data


@dataclass
class LogRow:
    step: int
    l_diff: float
    l_dyn: float
    lr: float


@dataclass
class TrainResult:
    params: ParamStore
    logs: list
    cfg: TrainConfig


def train(cfg: TrainConfig, demos: list | None = None, eval_hook=None,
          eval_every: int = 0, log_every: int = 50,
          dtype=np.float64) -> TrainResult:
    """Optimize the policy on expert demonstrations, deterministically.

    The checkpoint and log table are fully determined by (cfg, demos).
    Aborts with a component breakdown if the loss diverges or goes
    non-finite.
    """
    if demos is None:
        from . import persist
        demos = persist.load_dataset(cfg.demos).trajectories
    if not demos:
        raise DsspError("no demonstrations to train on")
    desc = descriptor_for(cfg.env)
    store = model.init_model(cfg, desc)
    if dtype != np.float64:
        store = store.astype(dtype)
    m = model.bind_model(store, cfg, desc)
    sched = diffusion.build_schedule(L=cfg.L, inference_steps=cfg.inference_steps)
    opt = AdamW(store, cfg.beta1, cfg.beta2, cfg.weight_decay)
    data_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 0xDA7A])))
    noise_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 0x0153])))
    lam = cfg.lambda_ if cfg.variant != "no_dyn" else 0.0

    logs: list[LogRow] = []
    for step in range(cfg.total_steps):
        batch = sample_window_batch(demos, m, cfg.batch_size, data_rng)
        loss, l_diff, l_dyn = total_loss(batch, m, sched, lam, noise_rng)
        value = float(loss.data)
        if not np.isfinite(value) or value > 1e6:
            raise DsspError(
                f"training diverged at step {step}: total={value:.3e} "
                f"(l_diff={l_diff:.3e}, l_dyn={l_dyn:.3e})")
        store.zero_grads()
        loss.backward()
        grads = {n: t.grad for n, t in store.items() if t.grad is not None}
        opt.step(grads, lr_at_step(cfg, step))
        if step % log_every == 0 or step == cfg.total_steps - 1:
            logs.append(LogRow(step, l_diff, l_dyn, lr_at_step(cfg, step)))
        if eval_hook is not None and eval_every and (step + 1) % eval_every == 0:
            eval_hook(step, store)
    final = store if dtype == np.float64 else store.astype(np.float64)
    return TrainResult(params=final, logs=logs, cfg=cfg)
