"""Small model builders shared by the test modules."""

from __future__ import annotations

import numpy as np

from sbnmt.attention import FusionConfig
from sbnmt.model import Model, ModelConfig, Vocabulary, init_params


def tiny_config(content: int = 4, src_vocab: int = 8, layers: int = 1, d_model: int = 8, heads: int = 2,
                d_ff: int = 16, mode: str = "linear", lam: float = 0.0, max_len: int = 8,
                dropout: float = 0.0) -> ModelConfig:
    """Target vocabulary = 4 reserved ids + ``content`` tokens."""
    return ModelConfig(src_vocab, 4 + content, layers, d_model, heads, d_ff, dropout, max_len,
                       FusionConfig(mode, lam))


def tiny_model(seed: int, sharpen: float = 6.0, **kw) -> Model:
    """Random model whose output layer is scaled up so next-token
    distributions are far from uniform and searches actually disagree."""
    cfg = tiny_config(**kw)
    params = init_params(cfg, seed)
    params["out.w"].data *= sharpen
    src = Vocabulary(f"s{i}" for i in range(cfg.src_vocab_size - 4))
    tgt = Vocabulary(f"t{i}" for i in range(cfg.tgt_vocab_size - 4))
    return Model(params, cfg, src, tgt)


def random_ids(rng: np.random.Generator, n: int, lo: int, hi: int) -> list[int]:
    return [int(x) for x in rng.integers(lo, hi, size=n)]


# one "criterion N: PASS|FAIL - detail" line per acceptance check, printed in the run summary
ACCEPTANCE: list[str] = []


def record(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    print(line)
    ACCEPTANCE.append(line)
    assert passed, line
