"""Encoder, synchronous bidirectional decoder and dual output softmax.

Parameters live in a flat ``dict[str, Tensor]`` so they map one-to-one onto
checkpoint records.  Both decoding directions share every decoder weight; the
direction is signalled only by the ``<l2r>`` / ``<r2l>`` start embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .attention import (
    AttentionParams,
    FusionConfig,
    MaskSpec,
    fuse,
    merge_heads,
    multi_head_attention,
    sb_multi_head_stacked,
    scaled_dot_attention,
    split_heads,
)
from .tensor import (
    Tensor,
    add,
    concat,
    dropout,
    embedding,
    layer_norm,
    log_softmax,
    matmul,
    mul,
    no_grad,
    relu,
)

Params = dict  # str -> Tensor

PAD, EOS, L2R, R2L = 0, 1, 2, 3
SPECIALS = ("<pad>", "</s>", "<l2r>", "<r2l>")


class Vocabulary:
    """Token <-> id bijection; ids 0..3 are PAD, EOS, <l2r>, <r2l>."""

    def __init__(self, tokens: Iterable[str]):
        self.itos: list[str] = list(SPECIALS)
        for tok in tokens:
            if tok in SPECIALS:
                raise ValueError(f"token {tok!r} collides with a reserved symbol")
            if tok not in self.itos:
                self.itos.append(tok)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def from_sentences(cls, sentences: Iterable[Sequence[str]]) -> "Vocabulary":
        return cls(sorted({tok for s in sentences for tok in s}))

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self.stoi[t] for t in tokens]
        except KeyError as exc:
            raise KeyError(f"unknown token {exc.args[0]!r}") from None

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Map ids back to tokens, dropping reserved symbols."""
        return [self.itos[i] for i in ids if i >= len(SPECIALS)]


@dataclass
class ModelConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    num_layers: int = 2
    d_model: int = 64
    num_heads: int = 4
    d_ff: int = 256
    dropout: float = 0.1
    max_len: int = 64
    fusion: FusionConfig = field(default_factory=FusionConfig)
    ln_eps: float = 1e-6

    def __post_init__(self):
        for name in ("src_vocab_size", "tgt_vocab_size", "num_layers", "d_model", "num_heads", "d_ff", "max_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.num_heads:
            raise ValueError("d_model must be divisible by num_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("src_vocab_size", "tgt_vocab_size", "num_layers", "d_model",
                                           "num_heads", "d_ff", "dropout", "max_len", "ln_eps")}
        d["fusion"] = self.fusion.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["fusion"] = FusionConfig(**d.get("fusion", {}))
        return cls(**d)


@dataclass
class Model:
    params: Params
    cfg: ModelConfig
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary


# ---------------------------------------------------------------- parameters

def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, ff = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "src_emb": (cfg.src_vocab_size, d),
        "tgt_emb": (cfg.tgt_vocab_size, d),
    }

    def attn(prefix):
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.{w}"] = (d, d)

    def ln(prefix):
        shapes[f"{prefix}.g"] = (d,)
        shapes[f"{prefix}.b"] = (d,)

    def ffn(prefix):
        shapes.update({f"{prefix}.w1": (d, ff), f"{prefix}.b1": (ff,),
                       f"{prefix}.w2": (ff, d), f"{prefix}.b2": (d,)})

    for l in range(cfg.num_layers):
        attn(f"enc{l}.self")
        ln(f"enc{l}.ln1")
        ffn(f"enc{l}.ffn")
        ln(f"enc{l}.ln2")
    for l in range(cfg.num_layers):
        attn(f"dec{l}.self")
        if cfg.fusion.mode == "gate":
            shapes[f"dec{l}.gate.w"] = (2 * d, 2 * d)
            shapes[f"dec{l}.gate.b"] = (2 * d,)
        ln(f"dec{l}.ln1")
        attn(f"dec{l}.cross")
        ln(f"dec{l}.ln2")
        ffn(f"dec{l}.ffn")
        ln(f"dec{l}.ln3")
    shapes["out.w"] = (d, cfg.tgt_vocab_size)
    shapes["out.b"] = (cfg.tgt_vocab_size,)
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> Params:
    """Scaled-uniform (Glorot) weights, unit-variance embeddings after the
    sqrt(d_model) input scaling, unit LayerNorm gains and zero biases."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith("_emb"):
            a = math.sqrt(3.0 / cfg.d_model)
            data = rng.uniform(-a, a, shape)
        elif ".ln" in name and leaf == "g":
            data = np.ones(shape)
        elif ".gate." in name and leaf == "w":
            data = rng.uniform(-0.01, 0.01, shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            a = math.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-a, a, shape)
        params[name] = Tensor(data, requires_grad=True, op=name)
    return params


def count_params(params: Params) -> int:
    return int(sum(p.data.size for p in params.values()))


def _attn(params: Params, prefix: str) -> AttentionParams:
    return AttentionParams(params[f"{prefix}.wq"], params[f"{prefix}.wk"],
                           params[f"{prefix}.wv"], params[f"{prefix}.wo"])


def _fusion(params: Params, cfg: ModelConfig, layer: int) -> FusionConfig:
    f = cfg.fusion
    if f.mode == "gate":
        return f.with_gate(params[f"dec{layer}.gate.w"], params[f"dec{layer}.gate.b"])
    return f


def _ln(x: Tensor, params: Params, prefix: str, eps: float) -> Tensor:
    return layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"], eps)


def _ffn(x: Tensor, params: Params, prefix: str) -> Tensor:
    h = relu(add(x @ params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return add(h @ params[f"{prefix}.w2"], params[f"{prefix}.b2"])


# ---------------------------------------------------------------- embeddings

_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def positional_encoding(T: int, d_model: int) -> np.ndarray:
    """Sinusoidal table: PE[p, 2i] = sin(p / 10000^(2i/d)), PE[p, 2i+1] = cos(...)."""
    key = (T, d_model)
    if key not in _PE_CACHE:
        pos = np.arange(T)[:, None]
        i2 = np.arange(0, d_model, 2)[None, :]
        angle = pos / np.power(10000.0, i2 / d_model)
        pe = np.zeros((T, d_model))
        pe[:, 0::2] = np.sin(angle)
        pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
        _PE_CACHE[key] = pe
    return _PE_CACHE[key]


def _embed(table: Tensor, ids: np.ndarray, cfg: ModelConfig, offset: int = 0) -> Tensor:
    T = ids.shape[-1]
    if offset + T > cfg.max_len:
        raise ValueError(f"sequence length {offset + T} exceeds max_len {cfg.max_len}")
    x = mul(embedding(table, ids), math.sqrt(cfg.d_model))
    return add(x, positional_encoding(offset + T, cfg.d_model)[offset:])


# ---------------------------------------------------------------- encoder

def encode(src_ids, params: Params, cfg: ModelConfig, src_valid: np.ndarray | None = None,
           train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Source ids ``[S]`` or ``[B, S]`` -> top-layer states ``[..., S, d_model]``."""
    src = np.asarray(src_ids, dtype=np.int64)
    if src.shape[-1] == 0:
        raise ValueError("empty source sentence")
    if src.min() < 0 or src.max() >= cfg.src_vocab_size:
        raise IndexError(f"source token id out of range [0, {cfg.src_vocab_size})")
    p = cfg.dropout
    x = dropout(_embed(params["src_emb"], src, cfg), p, rng, train)
    for l in range(cfg.num_layers):
        a = multi_head_attention(x, x, x, _attn(params, f"enc{l}.self"), cfg.num_heads,
                                 None, src_valid, "enc_self")
        x = _ln(add(x, dropout(a, p, rng, train)), params, f"enc{l}.ln1", cfg.ln_eps)
        f = _ffn(x, params, f"enc{l}.ffn")
        x = _ln(add(x, dropout(f, p, rng, train)), params, f"enc{l}.ln2", cfg.ln_eps)
    return x


# ---------------------------------------------------------------- decoders

def _check_target(ids: np.ndarray, cfg: ModelConfig) -> None:
    if ids.shape[-1] == 0:
        raise ValueError("empty target prefix")
    if ids.min() < 0 or ids.max() >= cfg.tgt_vocab_size:
        raise IndexError(f"target token id out of range [0, {cfg.tgt_vocab_size})")


def _decoder_tail(x: Tensor, l: int, h: Tensor, params: Params, cfg: ModelConfig,
                  src_valid, train: bool, rng) -> Tensor:
    """Encoder-decoder attention and FFN sublayers of decoder layer ``l``."""
    p = cfg.dropout
    c = multi_head_attention(x, h, h, _attn(params, f"dec{l}.cross"), cfg.num_heads,
                             None, src_valid, "dec_cross")
    x = _ln(add(x, dropout(c, p, rng, train)), params, f"dec{l}.ln2", cfg.ln_eps)
    f = _ffn(x, params, f"dec{l}.ffn")
    return _ln(add(x, dropout(f, p, rng, train)), params, f"dec{l}.ln3", cfg.ln_eps)


def decode_stacked(ids: np.ndarray, h: Tensor, params: Params, cfg: ModelConfig,
                   src_valid: np.ndarray | None = None, tgt_valid: np.ndarray | None = None,
                   train: bool = False, rng: np.random.Generator | None = None,
                   return_states: bool = False):
    """Dual decoder on streams stacked along axis 0: ``ids[0]`` forward, ``ids[1]`` backward.

    ``tgt_valid`` (bool, same shape as ``ids``) marks non-pad inputs; padded
    partner positions are excluded from cross-stream attention.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape[0] != 2:
        raise ValueError("expected two stacked streams")
    _check_target(ids, cfg)
    T = ids.shape[-1]
    mask = MaskSpec("causal_self", T)
    p = cfg.dropout
    x = dropout(_embed(params["tgt_emb"], ids, cfg), p, rng, train)
    states = [x]
    for l in range(cfg.num_layers):
        a = sb_multi_head_stacked(x, x, x, _attn(params, f"dec{l}.self"), cfg.num_heads, mask,
                                  _fusion(params, cfg, l), tgt_valid)
        x = _ln(add(x, dropout(a, p, rng, train)), params, f"dec{l}.ln1", cfg.ln_eps)
        x = _decoder_tail(x, l, h, params, cfg, src_valid, train, rng)
        states.append(x)
    logits = add(x @ params["out.w"], params["out.b"])
    return (logits, states) if return_states else logits


def decode_dual(fwd_ids, bwd_ids, h: Tensor, params: Params, cfg: ModelConfig,
                src_valid: np.ndarray | None = None, tgt_valid: np.ndarray | None = None,
                train: bool = False, rng: np.random.Generator | None = None,
                strict: bool = True) -> tuple[Tensor, Tensor]:
    """Teacher-forced dual decoding -> ``(logits_fwd, logits_bwd)``, each ``[..., T, V]``."""
    fwd = np.asarray(fwd_ids, dtype=np.int64)
    bwd = np.asarray(bwd_ids, dtype=np.int64)
    if fwd.shape != bwd.shape:
        raise ValueError(f"stream lengths differ: {fwd.shape} vs {bwd.shape}")
    if strict and (np.any(fwd[..., 0] != L2R) or np.any(bwd[..., 0] != R2L)):
        raise ValueError("forward stream must start with <l2r> and backward with <r2l>")
    logits = decode_stacked(np.stack([fwd, bwd]), h, params, cfg, src_valid, tgt_valid, train, rng)
    return logits[0], logits[1]


def history_only_attention(x: Tensor, params: AttentionParams, num_heads: int, mask: MaskSpec | None,
                           fusion: FusionConfig) -> Tensor:
    """Decoder self-attention with the partner term fixed at zero."""
    Q = split_heads(x @ params.wq, num_heads)
    K = split_heads(x @ params.wk, num_heads)
    V = split_heads(x @ params.wv, num_heads)
    hist = merge_heads(scaled_dot_attention(Q, K, V, mask, None, "uni_self"))
    return fuse(hist, Tensor(np.zeros(hist.shape)), fusion) @ params.wo


def decode_uni(ids, h: Tensor, params: Params, cfg: ModelConfig,
               src_valid: np.ndarray | None = None, train: bool = False,
               rng: np.random.Generator | None = None, return_states: bool = False):
    """Standard unidirectional decoder with the same weights (no partner stream)."""
    ids = np.asarray(ids, dtype=np.int64)
    _check_target(ids, cfg)
    mask = MaskSpec("causal_self", ids.shape[-1])
    p = cfg.dropout
    x = dropout(_embed(params["tgt_emb"], ids, cfg), p, rng, train)
    states = [x]
    for l in range(cfg.num_layers):
        a = history_only_attention(x, _attn(params, f"dec{l}.self"), cfg.num_heads, mask,
                                   _fusion(params, cfg, l))
        x = _ln(add(x, dropout(a, p, rng, train)), params, f"dec{l}.ln1", cfg.ln_eps)
        x = _decoder_tail(x, l, h, params, cfg, src_valid, train, rng)
        states.append(x)
    logits = add(x @ params["out.w"], params["out.b"])
    return (logits, states) if return_states else logits


# ---------------------------------------------------------------- incremental decoding

class LayerCache:
    """Self-attention keys/values ``[n, h, t, d_k]`` for one decoder layer."""

    __slots__ = ("k", "v")

    def __init__(self, k: np.ndarray, v: np.ndarray):
        self.k = k
        self.v = v


Cache = list  # list[LayerCache], one per layer


def empty_cache(cfg: ModelConfig, n: int) -> Cache:
    dk = cfg.d_model // cfg.num_heads
    z = np.zeros((n, cfg.num_heads, 0, dk))
    return [LayerCache(z, z) for _ in range(cfg.num_layers)]


def select_cache(cache: Cache, rows) -> Cache:
    rows = np.asarray(rows, dtype=np.int64)
    return [LayerCache(c.k[rows], c.v[rows]) for c in cache]


def concat_caches(caches: Sequence[Cache]) -> Cache:
    return [LayerCache(np.concatenate([c[l].k for c in caches]), np.concatenate([c[l].v for c in caches]))
            for l in range(len(caches[0]))]


class IncrementalDecoder:
    """Step-by-step decoding of one source sentence with per-hypothesis caches.

    ``step`` advances ``n`` hypotheses by one position.  ``partner[i]`` selects
    the future context of hypothesis ``i``: an index into the same batch
    (a live hypothesis advanced in lockstep), ``-1`` for none (history only),
    or a key ``<= -2`` into ``frozen`` -- the cache of a completed hypothesis.
    """

    def __init__(self, model: Model, src_ids: Sequence[int]):
        self.model = model
        self.cfg = cfg = model.cfg
        params = model.params
        with no_grad():
            h = encode(np.asarray(src_ids, dtype=np.int64)[None, :], params, cfg)
            self.memory = []
            for l in range(cfg.num_layers):
                ap = _attn(params, f"dec{l}.cross")
                self.memory.append((split_heads(h @ ap.wk, cfg.num_heads),
                                    split_heads(h @ ap.wv, cfg.num_heads)))
        self.h = h

    def step(self, tokens: Sequence[int], pos: int, cache: Cache,
             partner: Sequence[int] | None = None,
             frozen: dict[int, Cache] | None = None) -> tuple[np.ndarray, Cache]:
        cfg, params = self.cfg, self.model.params
        tokens = np.asarray(tokens, dtype=np.int64)
        n = tokens.shape[0]
        partner = np.full(n, -1) if partner is None else np.asarray(partner, dtype=np.int64)
        frozen = frozen or {}
        nh = cfg.num_heads
        new_cache: Cache = []
        with no_grad():
            x = _embed(params["tgt_emb"], tokens[:, None], cfg, offset=pos)  # [n, 1, d]
            for l in range(cfg.num_layers):
                ap = _attn(params, f"dec{l}.self")
                q = split_heads(x @ ap.wq, nh)
                k_all = np.concatenate([cache[l].k, split_heads(x @ ap.wk, nh).data], axis=2)
                v_all = np.concatenate([cache[l].v, split_heads(x @ ap.wv, nh).data], axis=2)
                new_cache.append(LayerCache(k_all, v_all))
                hist = scaled_dot_attention(q, Tensor(k_all), Tensor(v_all), None, None, "inc_hist")
                kp, vp, valid, has = self._partner_states(l, k_all, v_all, partner, frozen)
                fut = scaled_dot_attention(q, Tensor(kp), Tensor(vp), None, valid[:, None, :], "inc_fut")
                fut = mul(merge_heads(fut), has[:, None, None])
                a = fuse(merge_heads(hist), fut, _fusion(params, cfg, l)) @ ap.wo
                x = _ln(add(x, a), params, f"dec{l}.ln1", cfg.ln_eps)
                cp = _attn(params, f"dec{l}.cross")
                mk, mv = self.memory[l]
                c = merge_heads(scaled_dot_attention(split_heads(x @ cp.wq, nh), mk, mv, None, None,
                                                     "inc_cross")) @ cp.wo
                x = _ln(add(x, c), params, f"dec{l}.ln2", cfg.ln_eps)
                x = _ln(add(x, _ffn(x, params, f"dec{l}.ffn")), params, f"dec{l}.ln3", cfg.ln_eps)
            logits = add(x @ params["out.w"], params["out.b"])
            logp = log_softmax(logits).data[:, 0, :]
        return logp, new_cache

    @staticmethod
    def _partner_states(l, k_all, v_all, partner, frozen):
        n, nh, t1, dk = k_all.shape
        kp = np.zeros_like(k_all)
        vp = np.zeros_like(v_all)
        valid = np.zeros((n, t1), dtype=bool)
        has = np.ones(n)
        for i, j in enumerate(partner):
            if 0 <= j < n:
                kp[i], vp[i] = k_all[j], v_all[j]
                valid[i] = True
            elif j <= -2:
                fc = frozen[j][l]
                m = min(fc.k.shape[-2], t1)  # completed partner truncated to the current step
                kp[i, :, :m], vp[i, :, :m] = fc.k[0, :, :m], fc.v[0, :, :m]
                valid[i, :m] = True
            else:
                valid[i, 0] = True  # placeholder row; its output is zeroed
                has[i] = 0.0
        return kp, vp, valid, has
