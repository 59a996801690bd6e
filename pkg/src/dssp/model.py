"""Assembly of the full policy from its parts, with ablation variants.

Variants change which pieces exist and how the condition prefix is built:

  full          -- prefix [context, recent N state tokens], dynamics head on
  no_hist       -- no history encoder at all; prefix is the recent tokens
                   (the dynamics head needs the context, so it is dropped too)
  no_recent     -- prefix is the context token alone
  no_dyn        -- full architecture, dynamics loss logged but weighted zero
  no_td         -- step embedding added to every token instead of
                   modulating action tokens through adaptive layer norm
  attn_denoiser -- causal attention backbone inside the denoiser
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import diffusion, encoders
from .autodiff import Tensor
from .config import TrainConfig
from .envs import EnvDescriptor
from .numcore import ParamSpec, ParamStore, init_params


@dataclass
class PolicyModel:
    cfg: TrainConfig
    desc: EnvDescriptor
    obs: encoders.ObsEncoderParams
    hist: encoders.HistoryEncoderParams | None
    dyn: encoders.DynamicsParams | None
    den: diffusion.DenoiserParams
    store: ParamStore

    @property
    def variant(self) -> str:
        return self.cfg.variant

    @property
    def has_history(self) -> bool:
        return self.cfg.variant != "no_hist"

    @property
    def n_prefix(self) -> int:
        if self.cfg.variant == "no_hist":
            return self.cfg.N
        if self.cfg.variant == "no_recent":
            return 1
        return self.cfg.N + 1

    @property
    def exec_offset(self) -> int:
        # chunks are aligned to window start t-N+1; position N-1 is "now"
        return self.cfg.N - 1

    @property
    def exec_count(self) -> int:
        return min(self.cfg.H_a, self.cfg.H - self.exec_offset)

    @property
    def dtype(self):
        return self.den.head_w.data.dtype


def param_specs(cfg: TrainConfig, desc: EnvDescriptor) -> list[ParamSpec]:
    d, di, ds = cfg.d_model, cfg.d_inner, cfg.d_state
    specs = encoders.obs_encoder_specs("obs", desc.scene_dim, desc.proprio_dim, d)
    if cfg.variant != "no_hist":
        specs += encoders.history_encoder_specs("hist", d, di, ds, cfg.encoder_layers)
        specs += encoders.dynamics_specs("dyn", d, desc.action_dim)
    backbone = "attention" if cfg.variant == "attn_denoiser" else "ssm"
    time_mode = "additive" if cfg.variant == "no_td" else "adaln"
    specs += diffusion.denoiser_specs("den", d, di, ds, desc.action_dim,
                                      cfg.denoiser_layers, backbone, time_mode)
    return specs


def init_model(cfg: TrainConfig, desc: EnvDescriptor, dtype=np.float64) -> ParamStore:
    return init_params(param_specs(cfg, desc), cfg.seed, dtype=dtype)


def bind_model(store: ParamStore, cfg: TrainConfig, desc: EnvDescriptor) -> PolicyModel:
    d, di, ds = cfg.d_model, cfg.d_inner, cfg.d_state
    obs = encoders.bind_obs_encoder(store, "obs", desc.scene_dim, desc.proprio_dim, d)
    hist = dyn = None
    if cfg.variant != "no_hist":
        hist = encoders.bind_history_encoder(store, "hist", d, di, ds, cfg.encoder_layers)
        dyn = encoders.bind_dynamics(store, "dyn")
    backbone = "attention" if cfg.variant == "attn_denoiser" else "ssm"
    time_mode = "additive" if cfg.variant == "no_td" else "adaln"
    den = diffusion.bind_denoiser(store, "den", d, di, ds, cfg.denoiser_layers,
                                  backbone, time_mode)
    return PolicyModel(cfg=cfg, desc=desc, obs=obs, hist=hist, dyn=dyn, den=den, store=store)


def recent_index_matrix(starts: np.ndarray, n_recent: int) -> np.ndarray:
    """Token indices for each window's recent slots, clamped at episode start.

    Row i holds [t_i-N+1, ..., t_i] with negatives clamped to 0, which
    reproduces the repeat-the-earliest-token padding exactly.
    """
    offsets = np.arange(-(n_recent - 1), 1)
    return np.maximum(starts[:, None] + offsets[None, :], 0)


def condition_from_sequence(m: PolicyModel, z_all: Tensor, aux: Tensor | None,
                            starts: np.ndarray) -> Tensor:
    """Per-window condition prefixes gathered from one encoded trajectory.

    z_all: [T+1, d] raw state tokens; aux: [T+1, d] history-encoded tokens
    (None for the no_hist variant); starts: [B] window start indices.
    Returns [B, n_prefix, d].
    """
    B = starts.shape[0]
    d = m.cfg.d_model
    parts = []
    if m.has_history:
        c_sel = ad.take(aux, starts)                      # [B, d]
        parts.append(ad.reshape(c_sel, (B, 1, d)))
    if m.cfg.variant != "no_recent":
        idx = recent_index_matrix(starts, m.cfg.N)
        recent = ad.reshape(ad.take(z_all, idx.reshape(-1)), (B, m.cfg.N, d))
        parts.append(recent)
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)


def condition_from_stream(m: PolicyModel, context: np.ndarray | None,
                          recent: list) -> np.ndarray:
    """Condition prefix at rollout time, [n_prefix, d]."""
    rows = []
    if m.has_history:
        rows.append(np.asarray(context))
    if m.cfg.variant != "no_recent":
        pad = [recent[0]] * (m.cfg.N - len(recent))
        rows.extend(np.asarray(r) for r in pad + list(recent))
    return np.stack(rows, axis=0)


def chunk_target_indices(starts: np.ndarray, H: int, N: int, T: int) -> np.ndarray:
    """Action indices for each window's clean chunk, clamped to [0, T-1].

    The chunk covers steps t-N+1 .. t-N+H; indices past either end repeat
    the terminal action.
    """
    offsets = np.arange(H) - (N - 1)
    return np.clip(starts[:, None] + offsets[None, :], 0, T - 1)
