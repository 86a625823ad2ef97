"""Corpus BLEU, position-anchored prefix/suffix accuracy and report rendering."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

Sentence = Sequence[str]


def _ngrams(tokens: Sentence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class BleuStats:
    matches: list[int]
    totals: list[int]
    cand_len: int
    ref_len: int

    def score(self, smooth: bool = False) -> float:
        if self.cand_len == 0:
            return 0.0
        log_p = 0.0
        for m, c in zip(self.matches, self.totals):
            if m == 0:
                if not smooth:
                    return 0.0
                m, c = m + 1, c + 1
            log_p += math.log(m / c)
        log_p /= len(self.matches)
        bp = 1.0 if self.cand_len > self.ref_len else math.exp(1.0 - self.ref_len / self.cand_len)
        return 100.0 * bp * math.exp(log_p)


def bleu_stats(candidates: Sequence[Sentence], references: Sequence[Sentence], max_n: int = 4) -> BleuStats:
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} references")
    if not candidates:
        raise ValueError("empty corpus")
    matches, totals = [0] * max_n, [0] * max_n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, max_n + 1):
            c = _ngrams(cand, n)
            r = _ngrams(ref, n)
            matches[n - 1] += sum(min(v, r[g]) for g, v in c.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    return BleuStats(matches, totals, c_len, r_len)


def corpus_bleu(candidates: Sequence[Sentence], references: Sequence[Sentence], max_n: int = 4,
                smooth: bool = False) -> float:
    """Corpus-level BLEU in [0, 100] with a single reference per line.

    ``smooth`` adds one to the match and total counts of every n-gram order
    that has no matches; orders with matches are left untouched.
    """
    return bleu_stats(candidates, references, max_n).score(smooth)


def prefix_suffix_accuracy(candidates: Sequence[Sentence], references: Sequence[Sentence],
                           k: int = 4) -> tuple[float, float]:
    """Mean fraction of the first (last) ``min(k, len(ref))`` reference tokens
    reproduced at the same offset from the start (end) of the candidate.
    Empty references are skipped."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} references")
    first = last = 0.0
    n = 0
    for cand, ref in zip(candidates, references):
        kk = min(k, len(ref))
        if kk == 0:
            continue
        n += 1
        first += sum(i < len(cand) and cand[i] == ref[i] for i in range(kk)) / kk
        last += sum(i < len(cand) and cand[-1 - i] == ref[-1 - i] for i in range(kk)) / kk
    if n == 0:
        return 0.0, 0.0
    return first / n, last / n


def exact_match(candidates: Sequence[Sentence], references: Sequence[Sentence]) -> float:
    if not candidates:
        raise ValueError("empty corpus")
    return sum(list(c) == list(r) for c, r in zip(candidates, references, strict=True)) / len(candidates)


@dataclass
class Bucket:
    lo: int
    hi: int
    count: int
    bleu: float
    mean_output_len: float

    @property
    def label(self) -> str:
        return f"{self.lo}-{self.hi}"


def length_bucket_report(candidates: Sequence[Sentence], references: Sequence[Sentence],
                         sources: Sequence[Sentence], bucket_width: int) -> list[Bucket]:
    """Per source-length bucket BLEU and mean output length; buckets without
    sentences are omitted."""
    if bucket_width < 1:
        raise ValueError("bucket_width must be >= 1")
    if not len(candidates) == len(references) == len(sources):
        raise ValueError("candidates, references and sources must be aligned")
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(sources):
        groups.setdefault(max(len(s) - 1, 0) // bucket_width, []).append(i)
    out = []
    for b in sorted(groups):
        idx = groups[b]
        cands = [candidates[i] for i in idx]
        refs = [references[i] for i in idx]
        out.append(Bucket(b * bucket_width + 1, (b + 1) * bucket_width, len(idx), corpus_bleu(cands, refs),
                          sum(len(c) for c in cands) / len(idx)))
    return out


@dataclass
class EvalReport:
    bleu: float
    bleu_smoothed: float
    exact_match: float
    first_k: float
    last_k: float
    k: int = 4
    l2r_win_rate: float | None = None
    buckets: list[Bucket] = field(default_factory=list)
    size: int = 0

    def to_kv(self) -> str:
        """Line-oriented ``key=value`` form for diffing."""
        rows = [("size", str(self.size)), ("bleu", f"{self.bleu:.4f}"),
                ("bleu_smoothed", f"{self.bleu_smoothed:.4f}"), ("exact_match", f"{self.exact_match:.6f}"),
                ("k", str(self.k)), (f"first_{self.k}", f"{self.first_k:.6f}"),
                (f"last_{self.k}", f"{self.last_k:.6f}")]
        if self.l2r_win_rate is not None:
            rows.append(("l2r_win_rate", f"{self.l2r_win_rate:.6f}"))
        for b in self.buckets:
            rows.append((f"bucket.{b.label}.count", str(b.count)))
            rows.append((f"bucket.{b.label}.bleu", f"{b.bleu:.4f}"))
            rows.append((f"bucket.{b.label}.mean_len", f"{b.mean_output_len:.4f}"))
        return "".join(f"{k}={v}\n" for k, v in rows)

    def render(self, name: str = "system") -> str:
        lines = [
            f"sentences      {self.size}",
            f"BLEU           {self.bleu:.2f}  (smoothed {self.bleu_smoothed:.2f})",
            f"exact match    {100 * self.exact_match:.2f}%",
            accuracy_table([(name, self.first_k, self.last_k)], self.k),
        ]
        if self.l2r_win_rate is not None:
            lines.append(f"L2R wins       {100 * self.l2r_win_rate:.2f}%  R2L wins {100 * (1 - self.l2r_win_rate):.2f}%")
        if self.buckets:
            lines.append(bucket_table(self.buckets))
        return "\n".join(lines) + "\n"


def evaluate(candidates: Sequence[Sentence], references: Sequence[Sentence], sources: Sequence[Sentence] | None = None,
             k: int = 4, bucket_width: int | None = None, directions: Sequence[str] | None = None) -> EvalReport:
    first, last = prefix_suffix_accuracy(candidates, references, k)
    win = None
    if directions:
        win = sum(d == "L2R" for d in directions) / len(directions)
    buckets = []
    if bucket_width and sources is not None:
        buckets = length_bucket_report(candidates, references, sources, bucket_width)
    return EvalReport(corpus_bleu(candidates, references), corpus_bleu(candidates, references, smooth=True),
                      exact_match(candidates, references), first, last, k, win, buckets, len(candidates))


def accuracy_row(first: float, last: float) -> str:
    """``'40.21% / 35.10%'``."""
    return f"{100 * first:.2f}% / {100 * last:.2f}%"


def accuracy_table(rows: Sequence[tuple[str, float, float]], k: int = 4) -> str:
    width = max(len("Model"), *(len(r[0]) for r in rows))
    head = f"{'Model':<{width}}  First {k} / Last {k} tokens"
    return "\n".join([head] + [f"{name:<{width}}  {accuracy_row(f, l)}" for name, f, l in rows])


def bucket_table(buckets: Sequence[Bucket]) -> str:
    lines = [f"{'length':>8}  {'count':>6}  {'BLEU':>7}  {'out len':>8}"]
    lines += [f"{b.label:>8}  {b.count:>6}  {b.bleu:>7.2f}  {b.mean_output_len:>8.2f}" for b in buckets]
    return "\n".join(lines)
