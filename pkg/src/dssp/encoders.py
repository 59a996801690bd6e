"""Observation encoding, causal history encoding, and the dynamics head.

Environments emit flat feature vectors split into a scene part and a
proprioceptive part; each side runs through its own small MLP before the
halves are fused and projected to the model width.  The history encoder
is a stack of pre-norm selective-scan blocks evaluated either over a full
token sequence (training) or one token at a time against per-layer hidden
state caches (control loop); the context token is the last output of the
stack.  A lightweight MLP predicts the next state token from the current
context and executed action, supervised with a cosine loss whose target
branch is stop-gradiented.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import ssm
from .autodiff import Tensor
from .numcore import DsspError, ParamSpec, ParamStore


@dataclass
class ObsEncoderParams:
    vis1_w: Tensor
    vis1_b: Tensor
    vis2_w: Tensor
    vis2_b: Tensor
    prop1_w: Tensor
    prop1_b: Tensor
    prop2_w: Tensor
    prop2_b: Tensor
    proj_w: Tensor
    proj_b: Tensor
    scene_dim: int
    proprio_dim: int
    d_model: int


@dataclass
class HistoryEncoderParams:
    blocks: list
    norm_g: Tensor
    norm_b: Tensor
    d_model: int
    d_inner: int
    d_state: int


@dataclass
class DynamicsParams:
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor


@dataclass
class HistoryEncoderState:
    """One streaming cache per encoder block; depth fixed at construction."""

    caches: list

    @property
    def step_count(self) -> int:
        return self.caches[0].step_count if self.caches else 0


def obs_encoder_specs(prefix: str, scene_dim: int, proprio_dim: int, d_model: int) -> list[ParamSpec]:
    half = d_model // 2
    return [
        ParamSpec(f"{prefix}.vis1_w", (d_model, scene_dim)),
        ParamSpec(f"{prefix}.vis1_b", (d_model,), "zeros"),
        ParamSpec(f"{prefix}.vis2_w", (half, d_model)),
        ParamSpec(f"{prefix}.vis2_b", (half,), "zeros"),
        ParamSpec(f"{prefix}.prop1_w", (d_model, proprio_dim)),
        ParamSpec(f"{prefix}.prop1_b", (d_model,), "zeros"),
        ParamSpec(f"{prefix}.prop2_w", (d_model - half, d_model)),
        ParamSpec(f"{prefix}.prop2_b", (d_model - half,), "zeros"),
        ParamSpec(f"{prefix}.proj_w", (d_model, d_model)),
        ParamSpec(f"{prefix}.proj_b", (d_model,), "zeros"),
    ]


def history_encoder_specs(prefix: str, d_model: int, d_inner: int, d_state: int,
                          layers: int) -> list[ParamSpec]:
    specs: list[ParamSpec] = []
    for i in range(layers):
        specs.extend(ssm.mamba_block_specs(f"{prefix}.block{i}", d_model, d_inner, d_state))
    specs.append(ParamSpec(f"{prefix}.norm_g", (d_model,), "ones"))
    specs.append(ParamSpec(f"{prefix}.norm_b", (d_model,), "zeros"))
    return specs


def dynamics_specs(prefix: str, d_model: int, d_action: int) -> list[ParamSpec]:
    return [
        ParamSpec(f"{prefix}.fc1_w", (d_model, d_model + d_action)),
        ParamSpec(f"{prefix}.fc1_b", (d_model,), "zeros"),
        ParamSpec(f"{prefix}.fc2_w", (d_model, d_model)),
        ParamSpec(f"{prefix}.fc2_b", (d_model,), "zeros"),
    ]


def bind_obs_encoder(store: ParamStore, prefix: str, scene_dim: int, proprio_dim: int,
                     d_model: int) -> ObsEncoderParams:
    g = lambda n: store[f"{prefix}.{n}"]
    return ObsEncoderParams(
        vis1_w=g("vis1_w"), vis1_b=g("vis1_b"), vis2_w=g("vis2_w"), vis2_b=g("vis2_b"),
        prop1_w=g("prop1_w"), prop1_b=g("prop1_b"), prop2_w=g("prop2_w"), prop2_b=g("prop2_b"),
        proj_w=g("proj_w"), proj_b=g("proj_b"),
        scene_dim=scene_dim, proprio_dim=proprio_dim, d_model=d_model,
    )


def bind_history_encoder(store: ParamStore, prefix: str, d_model: int, d_inner: int,
                         d_state: int, layers: int) -> HistoryEncoderParams:
    blocks = [ssm.bind_mamba_block(store, f"{prefix}.block{i}", d_model, d_inner, d_state)
              for i in range(layers)]
    return HistoryEncoderParams(
        blocks=blocks, norm_g=store[f"{prefix}.norm_g"], norm_b=store[f"{prefix}.norm_b"],
        d_model=d_model, d_inner=d_inner, d_state=d_state,
    )


def bind_dynamics(store: ParamStore, prefix: str) -> DynamicsParams:
    return DynamicsParams(
        fc1_w=store[f"{prefix}.fc1_w"], fc1_b=store[f"{prefix}.fc1_b"],
        fc2_w=store[f"{prefix}.fc2_w"], fc2_b=store[f"{prefix}.fc2_b"],
    )


# -- observation encoding --------------------------------------------------------

def encode_observations(p: ObsEncoderParams, obs: Tensor) -> Tensor:
    """Map observation rows [..., scene+proprio] to state tokens [..., d_model]."""
    if obs.shape[-1] != p.scene_dim + p.proprio_dim:
        raise DsspError(
            f"observation width {obs.shape[-1]} != scene {p.scene_dim} + proprio {p.proprio_dim}")
    scene = obs[..., :p.scene_dim]
    prop = obs[..., p.scene_dim:]
    v = ad.linear(ad.silu(ad.linear(scene, p.vis1_w, p.vis1_b)), p.vis2_w, p.vis2_b)
    q = ad.linear(ad.silu(ad.linear(prop, p.prop1_w, p.prop1_b)), p.prop2_w, p.prop2_b)
    return ad.linear(ad.concat([v, q], axis=-1), p.proj_w, p.proj_b)


def encode_observation(p: ObsEncoderParams, obs: np.ndarray) -> Tensor:
    """Single observation -> state token [d_model]."""
    dtype = p.proj_w.data.dtype
    z = encode_observations(p, ad.constant(np.asarray(obs, dtype=dtype)[None, :]))
    return z[0]


# -- history encoding --------------------------------------------------------------

def fresh_state(p: HistoryEncoderParams, dtype=np.float64) -> HistoryEncoderState:
    return HistoryEncoderState(
        caches=[ssm.SSMCache.zeros(p.d_inner, p.d_state, dtype) for _ in p.blocks])


def encode_history_full(p: HistoryEncoderParams, z_seq: Tensor) -> tuple[Tensor, Tensor]:
    """Run the causal stack over all tokens at once.

    Returns (context, all_tokens): the context token is the final output,
    and the per-position outputs are exposed so training can read the
    context for every start index from one pass.
    """
    if z_seq.shape[-2] < 1:
        raise DsspError("history encoder needs at least one token")
    h = z_seq
    for block in p.blocks:
        h, _ = ssm.mamba_block(block, h)
    h = ad.layer_norm(h, p.norm_g, p.norm_b)
    return h[..., -1, :], h


def encode_history_step(p: HistoryEncoderParams, z: Tensor,
                        state: HistoryEncoderState) -> tuple[Tensor, HistoryEncoderState]:
    """Consume one state token; constant cost regardless of history length."""
    if len(state.caches) != len(p.blocks):
        raise DsspError("history state depth does not match encoder depth")
    h = ad.reshape(z, (1, p.d_model)) if z.ndim == 1 else z
    new_caches = []
    for block, cache in zip(p.blocks, state.caches):
        h, cache = ssm.mamba_block(block, h, cache)
        new_caches.append(cache)
    h = ad.layer_norm(h, p.norm_g, p.norm_b)
    return h[0], HistoryEncoderState(new_caches)


# -- dynamics head -------------------------------------------------------------------

def predict_next_state(p: DynamicsParams, context: Tensor, action: Tensor) -> Tensor:
    """Two-layer MLP over [context, action] -> predicted next state token."""
    x = ad.concat([context, action], axis=-1)
    return ad.linear(ad.silu(ad.linear(x, p.fc1_w, p.fc1_b)), p.fc2_w, p.fc2_b)


def dynamics_loss(p: DynamicsParams, context: Tensor, action: Tensor,
                  z_next: Tensor) -> Tensor:
    """1 - cos(prediction, target); the target branch never carries gradient.

    Rows where either side has zero norm contribute loss 1 with zero
    gradient.  Averaged over leading axes if batched.
    """
    pred = predict_next_state(p, context, action)
    target = ad.stop_gradient(z_next)
    if pred.ndim == 1:
        pred = ad.reshape(pred, (1, -1))
        target = ad.reshape(target, (1, -1))
    cos = ad.cosine_similarity(pred, target)
    return ad.mean(ad.sub(1.0, cos))
