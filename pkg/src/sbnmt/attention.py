"""Scaled dot-product and multi-head attention, plus the synchronous
bidirectional variants in which each decoding direction also attends to the
other direction's generated prefix.

All kernels accept arbitrary leading batch axes: queries are ``[..., L, d]``
and keys/values ``[..., L', d]``.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import (
    Tensor,
    add,
    concat,
    matmul,
    mul,
    relu,
    sigmoid,
    softmax,
    tanh,
    transpose,
)

FUSION_MODES = ("linear", "nonlinear", "gate")
ACTIVATIONS = {"tanh": tanh, "relu": relu}

# number of query-key score entries evaluated, keyed by call site
score_entries: Counter = Counter()


class AttentionMaskError(ValueError):
    """A query row has no admissible key."""


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    num_heads: int

    def __post_init__(self):
        if self.d_model <= 0 or self.num_heads <= 0 or self.d_model % self.num_heads:
            raise ValueError(f"d_model={self.d_model} must be a positive multiple of num_heads={self.num_heads}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.num_heads


@dataclass
class FusionConfig:
    mode: str = "nonlinear"
    lam: float = 0.1
    activation: str = "tanh"
    # gate mode only: weight [2d, 2d] and bias [2d]
    gate_w: Optional[Tensor] = field(default=None, repr=False)
    gate_b: Optional[Tensor] = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.mode!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")

    def with_gate(self, w: Tensor, b: Tensor) -> "FusionConfig":
        return FusionConfig(self.mode, self.lam, self.activation, w, b)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "lam": self.lam, "activation": self.activation}


@dataclass(frozen=True)
class MaskSpec:
    kind: str = "none"  # none | causal_self | causal_cross
    length: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "causal_self", "causal_cross"):
            raise ValueError(f"unknown mask kind {self.kind!r}")

    def matrix(self, n_query: int, n_key: int) -> np.ndarray | None:
        """Boolean admissibility matrix ``[n_query, n_key]`` (None = all admissible)."""
        if self.kind == "none":
            return None
        if self.length and (n_query > self.length or n_key > self.length):
            raise ValueError(f"mask length {self.length} shorter than {n_query}x{n_key} scores")
        # both causal kinds admit j <= i; queries are aligned to the last rows
        offset = n_key - n_query
        return np.arange(n_key)[None, :] <= (np.arange(n_query)[:, None] + offset)

    def cross(self) -> "MaskSpec":
        return MaskSpec("causal_cross", self.length) if self.kind != "none" else self


NO_MASK = MaskSpec()


def _combine_masks(mask: MaskSpec | None, n_q: int, n_k: int,
                   key_valid: np.ndarray | None) -> np.ndarray | None:
    m = mask.matrix(n_q, n_k) if mask is not None else None
    if key_valid is not None:
        kv = np.asarray(key_valid, dtype=bool)[..., None, :]  # [..., 1, L']
        m = kv if m is None else (m & kv)
    return m


def attention_weights(Q: Tensor, K: Tensor, mask: MaskSpec | None = None,
                      key_valid: np.ndarray | None = None, site: str = "attn") -> Tensor:
    n_q, n_k = Q.shape[-2], K.shape[-2]
    if Q.shape[-1] != K.shape[-1]:
        raise ValueError(f"query dim {Q.shape[-1]} != key dim {K.shape[-1]}")
    scores = mul(matmul(Q, transpose(K, _swap_last(K.ndim))), 1.0 / math.sqrt(Q.shape[-1]))
    score_entries[site] += scores.data.size
    m = _combine_masks(mask, n_q, n_k, key_valid)
    if m is not None:
        if n_k == 0 or not np.broadcast_to(m, scores.shape).any(axis=-1).all():
            raise AttentionMaskError("a query row has no admissible key")
    return softmax(scores, axis=-1, mask=m)


def scaled_dot_attention(Q: Tensor, K: Tensor, V: Tensor, mask: MaskSpec | None = None,
                         key_valid: np.ndarray | None = None, site: str = "attn") -> Tensor:
    """Softmax(QK^T / sqrt(d_k)) V with masked scores sent to -inf.

    ``key_valid`` is an optional boolean ``[..., L']`` marking real (non-pad) keys.
    """
    if K.shape[-2] != V.shape[-2]:
        raise ValueError(f"{K.shape[-2]} keys but {V.shape[-2]} values")
    return matmul(attention_weights(Q, K, mask, key_valid, site), V)


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def split_heads(x: Tensor, num_heads: int) -> Tensor:
    """``[..., L, d]`` -> ``[..., h, L, d/h]``."""
    *lead, L, d = x.shape
    x = x.reshape(*lead, L, num_heads, d // num_heads)
    n = len(lead)
    return transpose(x, tuple(range(n)) + (n + 1, n, n + 2))


def merge_heads(x: Tensor) -> Tensor:
    """``[..., h, L, d_k]`` -> ``[..., L, h * d_k]``."""
    *lead, h, L, dk = x.shape
    n = len(lead)
    x = transpose(x, tuple(range(n)) + (n + 1, n, n + 2))
    return x.reshape(*lead, L, h * dk)


@dataclass
class AttentionParams:
    """Per-head projections stored column-concatenated: ``wq[:, i*d_k:(i+1)*d_k]`` is W_i^Q."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    def check(self, cfg: AttentionConfig) -> None:
        d = cfg.d_model
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (d, d):
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {(d, d)}")


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, params: AttentionParams, num_heads: int,
                         mask: MaskSpec | None = None, key_valid: np.ndarray | None = None,
                         site: str = "mha") -> Tensor:
    """Concat_i Attention(q W_i^Q, k W_i^K, v W_i^V) W^O."""
    Q = split_heads(q @ params.wq, num_heads)
    K = split_heads(k @ params.wk, num_heads)
    V = split_heads(v @ params.wv, num_heads)
    kv = None if key_valid is None else np.asarray(key_valid)[..., None, :]
    heads = scaled_dot_attention(Q, K, V, mask, kv, site)
    return merge_heads(heads) @ params.wo


def fuse(h_hist: Tensor, h_fut: Tensor, cfg: FusionConfig) -> Tensor:
    """Combine history and future attention outputs.

    linear:    h_hist + lam * h_fut
    nonlinear: h_hist + lam * act(h_fut)
    gate:      r * h_hist + z * h_fut,  [r; z] = sigmoid([h_hist; h_fut] W^g + b^g)
    """
    if h_hist.shape != h_fut.shape:
        raise ValueError(f"fusion inputs differ in shape: {h_hist.shape} vs {h_fut.shape}")
    if cfg.mode == "linear":
        return add(h_hist, mul(h_fut, cfg.lam))
    if cfg.mode == "nonlinear":
        return add(h_hist, mul(ACTIVATIONS[cfg.activation](h_fut), cfg.lam))
    if cfg.gate_w is None or cfg.gate_b is None:
        raise ValueError("gate fusion requires gate weights")
    d = h_hist.shape[-1]
    if cfg.gate_w.shape != (2 * d, 2 * d):
        raise ValueError(f"gate weight shape {cfg.gate_w.shape} does not match features {d}")
    gates = sigmoid(add(matmul(concat([h_hist, h_fut], axis=-1), cfg.gate_w), cfg.gate_b))
    r = gates[..., :d]
    z = gates[..., d:]
    return add(mul(r, h_hist), mul(z, h_fut))


def sbdpa(q_fwd: Tensor, k_fwd: Tensor, v_fwd: Tensor,
          q_bwd: Tensor, k_bwd: Tensor, v_bwd: Tensor,
          mask: MaskSpec | None, cfg: FusionConfig,
          valid_fwd: np.ndarray | None = None, valid_bwd: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Synchronous bidirectional dot-product attention.

    Each stream attends to its own keys (history) and to the partner stream's
    keys (future); the cross-stream mask admits partner positions ``j <= i``.
    """
    if k_fwd.shape[-2] != k_bwd.shape[-2] or q_fwd.shape[-2] != q_bwd.shape[-2]:
        raise ValueError(f"stream lengths differ: fwd {k_fwd.shape[-2]} vs bwd {k_bwd.shape[-2]}")
    cross = mask.cross() if mask is not None else None
    h_fwd = fuse(scaled_dot_attention(q_fwd, k_fwd, v_fwd, mask, valid_fwd, "sb_hist"),
                 scaled_dot_attention(q_fwd, k_bwd, v_bwd, cross, valid_bwd, "sb_fut"), cfg)
    h_bwd = fuse(scaled_dot_attention(q_bwd, k_bwd, v_bwd, mask, valid_bwd, "sb_hist"),
                 scaled_dot_attention(q_bwd, k_fwd, v_fwd, cross, valid_fwd, "sb_fut"), cfg)
    return h_fwd, h_bwd


def sb_multi_head_stacked(q: Tensor, k: Tensor, v: Tensor, params: AttentionParams, num_heads: int,
                          mask: MaskSpec | None, cfg: FusionConfig,
                          valid: np.ndarray | None = None) -> Tensor:
    """Synchronous bidirectional multi-head attention on streams stacked along
    axis 0 (``q[0]`` forward, ``q[1]`` backward), so every projection runs once.

    ``valid`` is an optional boolean ``[2, ..., L']`` of non-pad keys per stream.
    Heads are concatenated per stream before fusion, so the gate acts on
    ``2 * d_model`` features; for the elementwise fusions this is the same as
    fusing head by head.
    """
    if q.shape[0] != 2 or k.shape[0] != 2:
        raise ValueError("stacked streams must have leading extent 2")
    Q = split_heads(q @ params.wq, num_heads)
    K = split_heads(k @ params.wk, num_heads)
    V = split_heads(v @ params.wv, num_heads)
    K_partner = concat([K[1:2], K[0:1]], axis=0)
    V_partner = concat([V[1:2], V[0:1]], axis=0)
    own_valid = partner_valid = None
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        own_valid = valid[..., None, :]  # broadcast over heads
        partner_valid = valid[::-1][..., None, :]
    cross = mask.cross() if mask is not None else None
    hist = merge_heads(scaled_dot_attention(Q, K, V, mask, own_valid, "sb_hist"))
    fut = merge_heads(scaled_dot_attention(Q, K_partner, V_partner, cross, partner_valid, "sb_fut"))
    return fuse(hist, fut, cfg) @ params.wo


def sb_multi_head(q_fwd: Tensor, k_fwd: Tensor, v_fwd: Tensor,
                  q_bwd: Tensor, k_bwd: Tensor, v_bwd: Tensor,
                  params: AttentionParams, num_heads: int, mask: MaskSpec | None, cfg: FusionConfig,
                  valid_fwd: np.ndarray | None = None,
                  valid_bwd: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Synchronous bidirectional multi-head attention; projections are shared by both streams."""
    if q_fwd.shape != q_bwd.shape or k_fwd.shape != k_bwd.shape:
        raise ValueError(f"stream shapes differ: {q_fwd.shape} vs {q_bwd.shape}")
    stack = lambda a, b: concat([a.reshape(1, *a.shape), b.reshape(1, *b.shape)], axis=0)
    valid = None
    if valid_fwd is not None or valid_bwd is not None:
        shape = k_fwd.shape[:-1]
        vf = np.ones(shape, bool) if valid_fwd is None else np.broadcast_to(valid_fwd, shape)
        vb = np.ones(shape, bool) if valid_bwd is None else np.broadcast_to(valid_bwd, shape)
        valid = np.stack([vf, vb])
    out = sb_multi_head_stacked(stack(q_fwd, q_bwd), stack(k_fwd, k_bwd), stack(v_fwd, v_bwd),
                                params, num_heads, mask, cfg, valid)
    return out[0], out[1]
