"""Greedy, standard beam and synchronous bidirectional beam search.

All searches share one convention: ``max_len`` bounds the number of generated
tokens (EOS included), hypothesis length for the length penalty counts the
same tokens, and the reserved ids PAD / <l2r> / <r2l> are never generated.
Ties among equal-scoring candidates go to the lower token id, then to the
lower parent rank; across directions L2R wins ties.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .model import (
    EOS,
    L2R,
    PAD,
    R2L,
    IncrementalDecoder,
    Model,
    concat_caches,
    decode_uni,
    empty_cache,
    encode,
    select_cache,
)
from .tensor import log_softmax, no_grad

log = logging.getLogger(__name__)

START = {"L2R": L2R, "R2L": R2L}
BANNED = (PAD, L2R, R2L)


@dataclass
class Hypothesis:
    direction: str
    tokens: list[int]  # start token first; EOS last when complete
    logprob: float
    complete: bool = False

    @property
    def length(self) -> int:
        return len(self.tokens) - 1

    def score(self, alpha: float) -> float:
        return length_penalized_score(self.logprob, max(self.length, 1), alpha)

    def output(self) -> list[int]:
        """Generated tokens in natural left-to-right order, without start/EOS."""
        body = [t for t in self.tokens[1:] if t != EOS]
        return body[::-1] if self.direction == "R2L" else body


@dataclass
class SearchConfig:
    beam_size: int = 4
    max_len: int = 64
    alpha: float = 0.6
    pairing: str = "rank"  # rank | one_best
    fallback: str = "completed"  # completed | history

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.pairing not in ("rank", "one_best"):
            raise ValueError(f"unknown pairing {self.pairing!r}")
        if self.fallback not in ("completed", "history"):
            raise ValueError(f"unknown fallback {self.fallback!r}")


@dataclass
class SyncBeam:
    l2r: list[Hypothesis]
    r2l: list[Hypothesis]
    step: int

    def check_synchrony(self) -> None:
        lengths = {len(h.tokens) for h in self.l2r + self.r2l}
        if len(lengths) > 1:
            raise AssertionError(f"step {self.step}: ongoing lengths differ {sorted(lengths)}")


@dataclass
class SearchResult:
    best: Hypothesis
    finished: list[Hypothesis]
    warning: str | None = None
    trace: list[str] = field(default_factory=list)

    @property
    def direction(self) -> str:
        return self.best.direction

    @property
    def tokens(self) -> list[int]:
        return self.best.output()


def length_penalized_score(logprob: float, length: int, alpha: float) -> float:
    """``logprob / ((5 + length) / 6) ** alpha``."""
    if length < 1:
        raise ValueError("length must be >= 1")
    return logprob / ((5.0 + length) / 6.0) ** alpha


def _steps(model: Model, cfg: SearchConfig) -> int:
    return min(cfg.max_len, model.cfg.max_len)


def _mask_banned(lp: np.ndarray) -> np.ndarray:
    lp = lp.copy()
    lp[:, list(BANNED)] = -np.inf
    return lp


def _top_candidates(base: np.ndarray, lp: np.ndarray, k: int) -> list[tuple[int, int, float]]:
    """Best ``k`` (parent, token, logprob) extensions, ties to lower token then lower parent."""
    total = base[:, None] + lp
    n, V = total.shape
    flat = total.reshape(-1)
    finite = np.flatnonzero(np.isfinite(flat))
    parents, tokens = np.divmod(finite, V)
    order = np.lexsort((parents, tokens, -flat[finite]))[:k]
    return [(int(parents[i]), int(tokens[i]), float(flat[finite[i]])) for i in order]


def _best(hyps: list[Hypothesis], alpha: float) -> Hypothesis:
    # max() keeps the first of equal scores, so list order decides ties
    return max(hyps, key=lambda h: h.score(alpha))


def _can_stop(finished: list[Hypothesis], alive: list[Hypothesis], cfg: SearchConfig, steps: int) -> bool:
    """True when no live hypothesis can still beat the best finished one."""
    if not finished or not alive:
        return not alive
    lp_max = ((5.0 + steps) / 6.0) ** cfg.alpha
    bound = max(h.logprob for h in alive) / lp_max
    return _best(finished, cfg.alpha).score(cfg.alpha) >= bound


def greedy_decode(model: Model, src, cfg: SearchConfig | None = None, direction: str = "L2R") -> Hypothesis:
    """Argmax token per step until EOS or ``max_len``."""
    cfg = cfg or SearchConfig(beam_size=1)
    dec = IncrementalDecoder(model, src)
    hyp = Hypothesis(direction, [START[direction]], 0.0)
    cache = empty_cache(model.cfg, 1)
    for t in range(_steps(model, cfg)):
        lp, cache = dec.step([hyp.tokens[-1]], t, cache)
        row = _mask_banned(lp)[0]
        tok = int(np.argmax(row))
        hyp = Hypothesis(direction, hyp.tokens + [tok], hyp.logprob + float(row[tok]), tok == EOS)
        if hyp.complete:
            break
    return hyp


def standard_beam_search(model: Model, src, cfg: SearchConfig, direction: str = "L2R",
                         return_result: bool = False):
    """Unidirectional beam search; completed hypotheses are set aside and the
    final pick maximises the length-penalised score."""
    k = cfg.beam_size
    dec = IncrementalDecoder(model, src)
    alive = [Hypothesis(direction, [START[direction]], 0.0)]
    cache = empty_cache(model.cfg, 1)
    finished: list[Hypothesis] = []
    steps = _steps(model, cfg)
    for t in range(steps):
        lp, new_cache = dec.step([h.tokens[-1] for h in alive], t, cache)
        lp = _mask_banned(lp)
        keep = []
        next_alive = []
        for parent, tok, score in _top_candidates(np.array([h.logprob for h in alive]), lp, k):
            h = Hypothesis(direction, alive[parent].tokens + [tok], score, tok == EOS)
            if h.complete:
                finished.append(h)
            else:
                next_alive.append(h)
                keep.append(parent)
        alive = next_alive
        if not alive or _can_stop(finished, alive, cfg, steps):
            break
        cache = select_cache(new_cache, keep)
    warning = None
    if finished:
        best = _best(finished, cfg.alpha)
    else:
        best = _best(alive, cfg.alpha)
        warning = "no complete hypothesis within max_len"
    result = SearchResult(best, finished, warning)
    return result if return_result else best


def sync_bidirectional_beam_search(model: Model, src, cfg: SearchConfig, trace: bool = False) -> SearchResult:
    """One beam split into L2R and R2L halves that advance in lockstep.

    At each step the rank-i ongoing L2R hypothesis attends to the rank-i
    ongoing R2L hypothesis and vice versa.  A hypothesis whose rank has no
    ongoing counterpart pairs with the best ongoing one; when the opposite half
    is exhausted it falls back to the best completed opposite hypothesis
    (``fallback="completed"``) or to no future context (``"history"``).
    """
    k = cfg.beam_size
    if k < 2 or k % 2:
        raise ValueError(f"synchronous search needs an even beam size >= 2, got {k}")
    half = k // 2
    dec = IncrementalDecoder(model, src)
    alive = {"L2R": [Hypothesis("L2R", [L2R], 0.0)], "R2L": [Hypothesis("R2L", [R2L], 0.0)]}
    caches = {"L2R": empty_cache(model.cfg, 1), "R2L": empty_cache(model.cfg, 1)}
    finished: list[Hypothesis] = []
    frozen: dict[int, list] = {}
    frozen_key: dict[int, int] = {}  # id(hyp) -> key into frozen
    lines: list[str] = []
    steps = _steps(model, cfg)

    def partner_of(i: int, own: str, offset_opp: int) -> int:
        opp = "R2L" if own == "L2R" else "L2R"
        n_opp = len(alive[opp])
        if n_opp:
            j = i if (cfg.pairing == "rank" and i < n_opp) else 0
            return offset_opp + j
        if cfg.fallback == "history":
            return -1
        done = [h for h in finished if h.direction == opp]
        return frozen_key[id(_best(done, cfg.alpha))] if done else -1

    for t in range(steps):
        SyncBeam(alive["L2R"], alive["R2L"], t).check_synchrony()
        nl, nr = len(alive["L2R"]), len(alive["R2L"])
        rows = alive["L2R"] + alive["R2L"]
        partner = [partner_of(i, "L2R", nl) for i in range(nl)] + [partner_of(i, "R2L", 0) for i in range(nr)]
        parts = [caches[d] for d in ("L2R", "R2L") if alive[d]]
        cache = concat_caches(parts) if len(parts) > 1 else parts[0]
        lp, new_cache = dec.step([h.tokens[-1] for h in rows], t, cache, partner, frozen)
        lp = _mask_banned(lp)
        for d, lo, n in (("L2R", 0, nl), ("R2L", nl, nr)):
            if not n:
                continue
            base = np.array([h.logprob for h in alive[d]])
            keep, nxt = [], []
            for parent, tok, score in _top_candidates(base, lp[lo:lo + n], half):
                h = Hypothesis(d, alive[d][parent].tokens + [tok], score, tok == EOS)
                if h.complete:
                    key = -2 - len(frozen)
                    frozen[key] = select_cache(new_cache, [lo + parent])
                    frozen_key[id(h)] = key
                    finished.append(h)
                else:
                    nxt.append(h)
                    keep.append(lo + parent)
            alive[d] = nxt
            if nxt:
                caches[d] = select_cache(new_cache, keep)
        if trace:
            lines.append(_trace_line(t, alive, finished, cfg.alpha))
        everyone = alive["L2R"] + alive["R2L"]
        if not everyone or _can_stop(finished, everyone, cfg, steps):
            break
    warning = None
    if finished:
        order = sorted(range(len(finished)), key=lambda i: (finished[i].direction != "L2R", i))
        best = _best([finished[i] for i in order], cfg.alpha)
    else:
        best = _best(alive["L2R"] + alive["R2L"], cfg.alpha)
        warning = "both directions exhausted without a complete hypothesis"
        log.warning(warning)
    return SearchResult(best, finished, warning, lines)


def pick_final(results: list[SearchResult], alpha: float) -> Hypothesis:
    """Selection rule shared by all searches, applied across several results:
    the best complete hypothesis by length-penalised score, or the best
    incomplete one when nothing completed.  Earlier results win ties."""
    done = [h for r in results for h in r.finished]
    if done:
        return _best(done, alpha)
    return _best([r.best for r in results], alpha)


def _trace_line(t: int, alive, finished, alpha) -> str:
    fmt = lambda hs: " ; ".join(f"{' '.join(map(str, h.tokens[1:]))} ({h.logprob:.4f})" for h in hs)
    return f"step {t}\tL2R: {fmt(alive['L2R'])}\tR2L: {fmt(alive['R2L'])}\tfinished: {len(finished)}"


# ---------------------------------------------------------------- oracles

@dataclass
class OracleResult:
    tokens: list[int]  # generated tokens including the final EOS
    logprob: float
    n_complete: int
    n_incomplete: int


def sequence_logprobs(model: Model, src, sequences: list[list[int]], direction: str = "L2R") -> np.ndarray:
    """Teacher-forced log-probability of each generated-token sequence, by full
    re-evaluation of the unidirectional decoder."""
    out = np.zeros(len(sequences))
    start = START[direction]
    with no_grad():
        h = encode(np.asarray(src)[None, :], model.params, model.cfg)
        by_len: dict[int, list[int]] = {}
        for i, s in enumerate(sequences):
            by_len.setdefault(len(s), []).append(i)
        for n, idx in by_len.items():
            seqs = np.array([sequences[i] for i in idx], dtype=np.int64).reshape(len(idx), n)
            inputs = np.concatenate([np.full((len(idx), 1), start), seqs[:, :-1]], axis=1)
            lp = log_softmax(decode_uni(inputs, h, model.params, model.cfg)).data
            out[idx] = np.take_along_axis(lp, seqs[:, :, None], axis=2)[:, :, 0].sum(axis=1)
    return out


def exhaustive_oracle(model: Model, src, max_len: int, direction: str = "L2R",
                      limit: int = 10 ** 6) -> OracleResult:
    """Enumerate every EOS-terminated output of at most ``max_len`` tokens and
    return the highest-logprob one (ties: lexicographically smallest)."""
    V = model.cfg.tgt_vocab_size
    content = [i for i in range(V) if i not in BANNED and i != EOS]
    alphabet = len(content) + 1
    if alphabet ** max_len > limit:
        raise ValueError(f"search space {alphabet}^{max_len} exceeds {limit}")
    complete = [list(body) + [EOS] for m in range(max_len) for body in itertools.product(content, repeat=m)]
    n_incomplete = len(content) ** max_len
    scores = sequence_logprobs(model, src, complete, direction)
    best = int(np.argmax(scores))  # first maximum; enumeration order is lexicographic per length
    return OracleResult(complete[best], float(scores[best]), len(complete), n_incomplete)
