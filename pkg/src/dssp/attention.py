"""Pre-norm causal self-attention blocks.

Reference backbone for two comparisons: a recompute-everything history
encoder in the efficiency benchmark, and an alternative denoising
backbone in the ablation matrix.  The feed-forward width is solved so the
per-block parameter count lands within a few percent of the selective-scan
block it stands in for.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .numcore import DsspError, ParamSpec, ParamStore

NEG_INF = -1e30


@dataclass
class AttentionBlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    qkv_w: Tensor   # [3*d_model, d_model]
    qkv_b: Tensor
    attn_out_w: Tensor
    attn_out_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    ff1_w: Tensor
    ff1_b: Tensor
    ff2_w: Tensor
    ff2_b: Tensor
    d_model: int
    n_heads: int


def matched_ff_width(d_model: int, d_inner: int, d_state: int) -> int:
    """Feed-forward width that matches a scan block's parameter count."""
    scan_block = (2 * d_model                       # norm
                  + 2 * d_inner * d_model + 2 * d_inner   # in proj
                  + 2 * (d_state * d_inner + d_state)     # b/c proj
                  + d_inner * d_inner + d_inner           # dt proj
                  + d_inner * d_state                     # a_log
                  + d_model * d_inner + d_model)          # out proj
    fixed = (2 * d_model                            # ln1
             + 3 * d_model * d_model + 3 * d_model  # qkv
             + d_model * d_model + d_model          # attn out
             + 2 * d_model)                         # ln2
    ff_budget = scan_block - fixed
    width = max(1, round((ff_budget - d_model) / (2 * d_model + 1)))
    return width


def attention_block_specs(prefix: str, d_model: int, d_ff: int) -> list[ParamSpec]:
    return [
        ParamSpec(f"{prefix}.ln1_g", (d_model,), "ones"),
        ParamSpec(f"{prefix}.ln1_b", (d_model,), "zeros"),
        ParamSpec(f"{prefix}.qkv_w", (3 * d_model, d_model)),
        ParamSpec(f"{prefix}.qkv_b", (3 * d_model,), "zeros"),
        ParamSpec(f"{prefix}.attn_out_w", (d_model, d_model)),
        ParamSpec(f"{prefix}.attn_out_b", (d_model,), "zeros"),
        ParamSpec(f"{prefix}.ln2_g", (d_model,), "ones"),
        ParamSpec(f"{prefix}.ln2_b", (d_model,), "zeros"),
        ParamSpec(f"{prefix}.ff1_w", (d_ff, d_model)),
        ParamSpec(f"{prefix}.ff1_b", (d_ff,), "zeros"),
        ParamSpec(f"{prefix}.ff2_w", (d_model, d_ff)),
        ParamSpec(f"{prefix}.ff2_b", (d_model,), "zeros"),
    ]


def bind_attention_block(store: ParamStore, prefix: str, d_model: int,
                         n_heads: int = 4) -> AttentionBlockParams:
    g = lambda n: store[f"{prefix}.{n}"]
    return AttentionBlockParams(
        ln1_g=g("ln1_g"), ln1_b=g("ln1_b"),
        qkv_w=g("qkv_w"), qkv_b=g("qkv_b"),
        attn_out_w=g("attn_out_w"), attn_out_b=g("attn_out_b"),
        ln2_g=g("ln2_g"), ln2_b=g("ln2_b"),
        ff1_w=g("ff1_w"), ff1_b=g("ff1_b"), ff2_w=g("ff2_w"), ff2_b=g("ff2_b"),
        d_model=d_model, n_heads=n_heads,
    )


def causal_self_attention(p: AttentionBlockParams, x_norm: Tensor) -> Tensor:
    """Multi-head causal attention over [..., T, d_model]."""
    d = p.d_model
    if d % p.n_heads != 0:
        raise DsspError(f"d_model {d} not divisible by {p.n_heads} heads")
    dk = d // p.n_heads
    steps = x_norm.shape[-2]
    lead = x_norm.shape[:-2]

    qkv = ad.linear(x_norm, p.qkv_w, p.qkv_b)
    q = qkv[..., :d]
    k = qkv[..., d:2 * d]
    v = qkv[..., 2 * d:]

    def heads(t: Tensor) -> Tensor:
        t = ad.reshape(t, lead + (steps, p.n_heads, dk))
        order = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return ad.transpose(t, order)          # [..., heads, T, dk]

    qh, kh, vh = heads(q), heads(k), heads(v)
    scores = ad.mul(ad.matmul(qh, ad.transpose(kh, tuple(range(kh.ndim - 2)) + (kh.ndim - 1, kh.ndim - 2))),
                    ad.constant(np.asarray(1.0 / np.sqrt(dk), dtype=x_norm.dtype)))
    mask = np.triu(np.ones((steps, steps), dtype=bool), k=1)
    scores = ad.where(~mask, scores, ad.constant(np.full((steps, steps), NEG_INF, dtype=scores.dtype)))
    attn = ad.softmax(scores, axis=-1)
    ctx = ad.matmul(attn, vh)                  # [..., heads, T, dk]
    order = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    ctx = ad.reshape(ad.transpose(ctx, order), lead + (steps, d))
    return ad.linear(ctx, p.attn_out_w, p.attn_out_b)


def attention_core(p: AttentionBlockParams, x_norm: Tensor) -> Tensor:
    """Attention sublayer on pre-normalized input (no residual, no FF)."""
    return causal_self_attention(p, x_norm)


def attention_block(p: AttentionBlockParams, x_seq: Tensor) -> Tensor:
    """Full pre-norm block: attention residual then feed-forward residual."""
    h = ad.add(x_seq, causal_self_attention(p, ad.layer_norm(x_seq, p.ln1_g, p.ln1_b)))
    ff_in = ad.layer_norm(h, p.ln2_g, p.ln2_b)
    ff = ad.linear(ad.silu(ad.linear(ff_in, p.ff1_w, p.ff1_b)), p.ff2_w, p.ff2_b)
    return ad.add(h, ff)
