"""Action-chunk denoising with hierarchical prefix conditioning.

The denoiser reads the sequence [context token, recent state tokens,
noisy action tokens] left to right with a causal backbone, so condition
information flows into the action positions but never back.  The
diffusion step enters only through adaptive layer-norm scale/shift/gate
applied at action positions; prefix positions use plain normalization and
therefore keep bitwise-identical activations across all steps, which lets
a control loop build the condition once and reuse it for every denoising
iteration.

The model predicts the clean chunk directly.  Sampling walks a strictly
decreasing subset of steps with deterministic updates driven by the clean
prediction, finishing with the prediction itself at the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attention as attn
from . import autodiff as ad
from . import ssm
from .autodiff import Tensor
from .numcore import DsspError, ParamSpec, ParamStore

TIME_FEATURES = 64  # sinusoidal feature width for the step embedding


@dataclass
class DiffusionSchedule:
    """Noise schedule over steps 1..L plus the inference-time subset.

    alpha_bar has length L+1 with alpha_bar[0] = 1 at the clean boundary
    and is strictly decreasing.
    """

    L: int
    betas: np.ndarray
    alpha_bar: np.ndarray
    inference_steps: int
    inference_timestep_subset: np.ndarray

    def __post_init__(self):
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise DsspError("betas must lie strictly inside (0, 1)")
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise DsspError("alpha_bar must be strictly decreasing")


def build_schedule(L: int = 100, beta_start: float = 1e-4, beta_end: float = 2e-2,
                   inference_steps: int = 10) -> DiffusionSchedule:
    if L < 1 or inference_steps < 1 or inference_steps > L:
        raise DsspError(f"need L >= inference_steps >= 1, got L={L}, inference={inference_steps}")
    if not (0 < beta_start <= beta_end < 1):
        raise DsspError("beta range must satisfy 0 < start <= end < 1")
    betas = np.linspace(beta_start, beta_end, L)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    subset = np.unique(np.round(np.linspace(L, 1, inference_steps)).astype(int))[::-1]
    return DiffusionSchedule(L=L, betas=betas, alpha_bar=alpha_bar,
                             inference_steps=inference_steps,
                             inference_timestep_subset=subset)


def forward_noise(x0: np.ndarray, tau: int, eps: np.ndarray,
                  sched: DiffusionSchedule) -> np.ndarray:
    """Corrupt a clean chunk to step tau: sqrt(ab)*x0 + sqrt(1-ab)*eps."""
    if not 1 <= tau <= sched.L:
        raise DsspError(f"diffusion step {tau} outside [1, {sched.L}]")
    if eps.shape != x0.shape:
        raise DsspError("noise shape must match the chunk shape")
    ab = sched.alpha_bar[tau]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


# -- condition sequence -----------------------------------------------------------

@dataclass
class ConditionSequence:
    """Prefix [context, recent state tokens], oldest recent token first."""

    tokens: np.ndarray  # [N+1, d_model]
    n_recent: int


def build_condition(context: np.ndarray, recent: list, n_recent: int) -> ConditionSequence:
    """Assemble the prefix from the context token and the last N state tokens.

    ``recent`` holds the available tokens oldest-first; when fewer than N
    exist (episode start) the earliest is repeated on the left.
    """
    if len(recent) == 0:
        raise DsspError("need at least one recent state token")
    if len(recent) > n_recent:
        raise DsspError(f"got {len(recent)} recent tokens, expected at most {n_recent}")
    pad = [recent[0]] * (n_recent - len(recent))
    rows = [np.asarray(context)] + [np.asarray(r) for r in pad + list(recent)]
    return ConditionSequence(tokens=np.stack(rows, axis=0), n_recent=n_recent)


# -- denoiser ---------------------------------------------------------------------

@dataclass
class DenoiserParams:
    prefix_w: Tensor
    prefix_b: Tensor
    act_w: Tensor
    act_b: Tensor
    blocks: list            # MambaBlockParams or AttentionBlockParams
    ada: list               # per block: (t1_w, t1_b, t2_w, t2_b) or None
    norm_g: Tensor
    norm_b: Tensor
    head_w: Tensor
    head_b: Tensor
    d_model: int
    backbone: str           # "ssm" | "attention"
    time_mode: str          # "adaln" | "additive"
    time_w: tuple | None = None  # additive mode: (t1_w, t1_b, t2_w, t2_b)


def denoiser_specs(prefix: str, d_model: int, d_inner: int, d_state: int, d_action: int,
                   layers: int, backbone: str = "ssm",
                   time_mode: str = "adaln") -> list[ParamSpec]:
    specs = [
        ParamSpec(f"{prefix}.prefix_w", (d_model, d_model)),
        ParamSpec(f"{prefix}.prefix_b", (d_model,), "zeros"),
        ParamSpec(f"{prefix}.act_w", (d_model, d_action)),
        ParamSpec(f"{prefix}.act_b", (d_model,), "zeros"),
    ]
    for i in range(layers):
        if backbone == "ssm":
            specs.extend(ssm.mamba_block_specs(f"{prefix}.block{i}", d_model, d_inner, d_state))
        elif backbone == "attention":
            d_ff = attn.matched_ff_width(d_model, d_inner, d_state)
            specs.extend(attn.attention_block_specs(f"{prefix}.block{i}", d_model, d_ff))
        else:
            raise DsspError(f"unknown denoiser backbone: {backbone}")
        if time_mode == "adaln":
            specs.extend([
                ParamSpec(f"{prefix}.ada{i}.t1_w", (d_model, TIME_FEATURES)),
                ParamSpec(f"{prefix}.ada{i}.t1_b", (d_model,), "zeros"),
                # zero-init modulation: blocks start as identity at action
                # positions, which keeps early training stable
                ParamSpec(f"{prefix}.ada{i}.t2_w", (3 * d_model, d_model), "zeros"),
                ParamSpec(f"{prefix}.ada{i}.t2_b", (3 * d_model,), "zeros"),
            ])
    if time_mode == "additive":
        specs.extend([
            ParamSpec(f"{prefix}.time.t1_w", (d_model, TIME_FEATURES)),
            ParamSpec(f"{prefix}.time.t1_b", (d_model,), "zeros"),
            ParamSpec(f"{prefix}.time.t2_w", (d_model, d_model)),
            ParamSpec(f"{prefix}.time.t2_b", (d_model,), "zeros"),
        ])
    elif time_mode != "adaln":
        raise DsspError(f"unknown time mode: {time_mode}")
    specs.extend([
        ParamSpec(f"{prefix}.norm_g", (d_model,), "ones"),
        ParamSpec(f"{prefix}.norm_b", (d_model,), "zeros"),
        ParamSpec(f"{prefix}.head_w", (d_action, d_model)),
        ParamSpec(f"{prefix}.head_b", (d_action,), "zeros"),
    ])
    return specs


def bind_denoiser(store: ParamStore, prefix: str, d_model: int, d_inner: int, d_state: int,
                  layers: int, backbone: str = "ssm", time_mode: str = "adaln") -> DenoiserParams:
    blocks = []
    ada = []
    for i in range(layers):
        if backbone == "ssm":
            blocks.append(ssm.bind_mamba_block(store, f"{prefix}.block{i}", d_model, d_inner, d_state))
        else:
            blocks.append(attn.bind_attention_block(store, f"{prefix}.block{i}", d_model))
        if time_mode == "adaln":
            ada.append((store[f"{prefix}.ada{i}.t1_w"], store[f"{prefix}.ada{i}.t1_b"],
                        store[f"{prefix}.ada{i}.t2_w"], store[f"{prefix}.ada{i}.t2_b"]))
        else:
            ada.append(None)
    time_w = None
    if time_mode == "additive":
        time_w = (store[f"{prefix}.time.t1_w"], store[f"{prefix}.time.t1_b"],
                  store[f"{prefix}.time.t2_w"], store[f"{prefix}.time.t2_b"])
    return DenoiserParams(
        prefix_w=store[f"{prefix}.prefix_w"], prefix_b=store[f"{prefix}.prefix_b"],
        act_w=store[f"{prefix}.act_w"], act_b=store[f"{prefix}.act_b"],
        blocks=blocks, ada=ada,
        norm_g=store[f"{prefix}.norm_g"], norm_b=store[f"{prefix}.norm_b"],
        head_w=store[f"{prefix}.head_w"], head_b=store[f"{prefix}.head_b"],
        d_model=d_model, backbone=backbone, time_mode=time_mode, time_w=time_w,
    )


def timestep_features(tau, dtype=np.float64) -> np.ndarray:
    """Sinusoidal features of the diffusion step, [..., TIME_FEATURES]."""
    tau = np.asarray(tau, dtype=np.float64)
    half = TIME_FEATURES // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / (half - 1))
    angles = tau[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1).astype(dtype)


def _block_core(block, x_norm: Tensor):
    if isinstance(block, ssm.MambaBlockParams):
        core, _ = ssm.mamba_core(block, x_norm)
        return core
    return attn.causal_self_attention(block, x_norm)


def _block_ff(block, h: Tensor) -> Tensor:
    """Extra feed-forward residual for the attention backbone (position-wise)."""
    if isinstance(block, ssm.MambaBlockParams):
        return h
    ff_in = ad.layer_norm(h, block.ln2_g, block.ln2_b)
    ff = ad.linear(ad.silu(ad.linear(ff_in, block.ff1_w, block.ff1_b)), block.ff2_w, block.ff2_b)
    return ad.add(h, ff)


def denoise(p: DenoiserParams, x_tau: Tensor, tau, cond_tokens: Tensor,
            collect_prefix: list | None = None) -> Tensor:
    """Predict the clean chunk from its noisy version, the step, and the prefix.

    x_tau: [B, H, d_action] (or unbatched [H, d_action])
    cond_tokens: [B, P, d_model] matching leading shape
    tau: int or [B] array of steps
    collect_prefix: optional sink; receives the prefix-position activations
        after every block (used to verify step-decoupling).
    """
    unbatched = x_tau.ndim == 2
    if unbatched:
        x_tau = ad.reshape(x_tau, (1,) + x_tau.shape)
        cond_tokens = ad.reshape(cond_tokens, (1,) + cond_tokens.shape)
    n_prefix = cond_tokens.shape[-2]

    prefix_emb = ad.linear(cond_tokens, p.prefix_w, p.prefix_b)
    act_emb = ad.linear(x_tau, p.act_w, p.act_b)
    h = ad.concat([prefix_emb, act_emb], axis=-2)

    feats = ad.constant(timestep_features(np.broadcast_to(tau, (h.shape[0],)), dtype=h.dtype))
    if p.time_mode == "additive":
        t1_w, t1_b, t2_w, t2_b = p.time_w
        temb = ad.linear(ad.silu(ad.linear(feats, t1_w, t1_b)), t2_w, t2_b)
        h = ad.add(h, ad.reshape(temb, (h.shape[0], 1, p.d_model)))

    for block, ada in zip(p.blocks, p.ada):
        if isinstance(block, ssm.MambaBlockParams):
            norm_g, norm_b = block.norm_g, block.norm_b
        else:
            norm_g, norm_b = block.ln1_g, block.ln1_b
        n = ad.layer_norm(h, norm_g, norm_b)
        if ada is not None:
            t1_w, t1_b, t2_w, t2_b = ada
            mod = ad.linear(ad.silu(ad.linear(feats, t1_w, t1_b)), t2_w, t2_b)
            shift = ad.reshape(mod[..., :p.d_model], (-1, 1, p.d_model))
            scale = ad.reshape(mod[..., p.d_model:2 * p.d_model], (-1, 1, p.d_model))
            gate = ad.reshape(mod[..., 2 * p.d_model:], (-1, 1, p.d_model))
            n_act = ad.add(ad.mul(n[..., n_prefix:, :], ad.add(1.0, scale)), shift)
            n = ad.concat([n[..., :n_prefix, :], n_act], axis=-2)
            core = _block_core(block, n)
            core_act = ad.mul(core[..., n_prefix:, :], gate)
            core = ad.concat([core[..., :n_prefix, :], core_act], axis=-2)
        else:
            core = _block_core(block, n)
        h = ad.add(h, core)
        h = _block_ff(block, h)
        if collect_prefix is not None:
            collect_prefix.append(np.array(h.data[..., :n_prefix, :]))

    out = ad.layer_norm(h[..., n_prefix:, :], p.norm_g, p.norm_b)
    x0_hat = ad.linear(out, p.head_w, p.head_b)
    if unbatched:
        x0_hat = x0_hat[0]
    return x0_hat


# -- training loss -------------------------------------------------------------------

def diffusion_loss(p: DenoiserParams, x0: np.ndarray, cond_tokens: Tensor,
                   sched: DiffusionSchedule, rng: np.random.Generator | None,
                   taus: np.ndarray | None = None,
                   eps: np.ndarray | None = None) -> Tensor:
    """Mean over the batch of the squared error of the clean-chunk prediction.

    x0: [B, H, d_action]; each element draws its own step and noise from
    rng unless (taus, eps) are supplied explicitly.
    """
    if x0.ndim != 3 or x0.shape[0] < 1:
        raise DsspError("diffusion loss expects a non-empty [B, H, d_action] batch")
    B = x0.shape[0]
    if taus is None:
        taus = rng.integers(1, sched.L + 1, size=B)
    if eps is None:
        eps = rng.standard_normal(x0.shape)
    ab = sched.alpha_bar[taus][:, None, None]
    x_tau = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    x0_hat = denoise(p, ad.constant(x_tau.astype(x0.dtype)), taus, cond_tokens)
    d = ad.sub(x0_hat, ad.constant(x0))
    return ad.mean(ad.sum_(ad.mul(d, d), axis=(-2, -1)))


# -- sampling -----------------------------------------------------------------------

def sample_action_chunk(p: DenoiserParams, cond_tokens: np.ndarray,
                        sched: DiffusionSchedule, rng: np.random.Generator,
                        horizon: int, d_action: int,
                        denoise_fn=None) -> np.ndarray:
    """Deterministic clean-prediction sampler over the inference subset.

    Starts from standard normal noise and, for each step in the strictly
    decreasing subset, re-estimates the clean chunk and moves to the next
    noise level along the implied noise direction (no fresh noise).  The
    final output is the clean prediction at the last step.  The condition
    is built once by the caller and reused unchanged throughout.
    """
    dn = denoise_fn
    if dn is None:
        dtype = p.head_w.data.dtype
        cond_t = ad.constant(np.asarray(cond_tokens, dtype=dtype))

        def dn(x, tau):
            with ad.no_grad():
                return denoise(p, ad.constant(x.astype(dtype)), tau, cond_t).data.astype(np.float64)

    x = rng.standard_normal((horizon, d_action))
    subset = sched.inference_timestep_subset
    x0_hat = None
    for i, tau in enumerate(subset):
        x0_hat = dn(x, int(tau))
        ab = sched.alpha_bar[tau]
        next_ab = sched.alpha_bar[subset[i + 1]] if i + 1 < len(subset) else 1.0
        eps_hat = (x - np.sqrt(ab) * x0_hat) / np.sqrt(1.0 - ab)
        if next_ab >= 1.0:
            x = np.array(x0_hat)
        else:
            x = np.sqrt(next_ab) * x0_hat + np.sqrt(1.0 - next_ab) * eps_hat
    return x
