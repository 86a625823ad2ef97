"""Synthetic transduction corpora and their on-disk TSV form."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

KINDS = ("copy", "reverse", "rotate", "suffix-hard")
SPLITS = ("train", "dev", "test")

Pair = tuple[list[str], list[str]]


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "copy"
    vocab_size: int = 20
    min_len: int = 3
    max_len: int = 12
    n_train: int = 10000
    n_dev: int = 500
    n_test: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {KINDS}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if min(self.n_train, self.n_dev, self.n_test) < 0:
            raise ValueError("corpus sizes must be non-negative")
        capacity = sum(self.vocab_size ** n for n in range(self.min_len, self.max_len + 1))
        if capacity < self.n_train + self.n_dev + self.n_test:
            raise ValueError(f"vocab {self.vocab_size} with lengths {self.min_len}-{self.max_len} "
                             f"admits only {capacity} distinct sequences")

    def to_dict(self) -> dict:
        return asdict(self)


def token(i: int) -> str:
    return f"w{i}"


def suffix_hard_target(src: Sequence[int], vocab_size: int) -> list[int]:
    """Running prefix sums (mod V) over the first ceil(L/3) positions, running
    suffix sums over the last ceil(L/3), the middle copied.

    The head is cheap to produce left to right (each value is the previous one
    plus the aligned source token) but needs a multi-token sum when it is the
    last thing generated; the tail is the mirror image.
    """
    L = len(src)
    m = math.ceil(L / 3)
    out = list(src)
    acc = 0
    for i in range(m):
        acc = (acc + src[i]) % vocab_size
        out[i] = acc
    acc = 0
    for i in range(L - 1, L - 1 - m, -1):
        acc = (acc + src[i]) % vocab_size
        out[i] = acc
    return out


def transform(kind: str, src: Sequence[int], vocab_size: int) -> list[int]:
    if kind == "copy":
        return list(src)
    if kind == "reverse":
        return list(src)[::-1]
    if kind == "rotate":
        return list(src[1:]) + list(src[:1])
    if kind == "suffix-hard":
        return suffix_hard_target(src, vocab_size)
    raise ValueError(f"unknown task kind {kind!r}")


def generate_task(spec: TaskSpec) -> dict[str, list[Pair]]:
    """Deterministic train/dev/test corpora; splits never share a source."""
    rng = np.random.default_rng(spec.seed)
    total = spec.n_train + spec.n_dev + spec.n_test
    seen: set[tuple[int, ...]] = set()
    sources: list[tuple[int, ...]] = []
    while len(sources) < total:
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        s = tuple(int(v) for v in rng.integers(0, spec.vocab_size, n))
        if s not in seen:
            seen.add(s)
            sources.append(s)
    bounds = np.cumsum([0, spec.n_train, spec.n_dev, spec.n_test])
    out: dict[str, list[Pair]] = {}
    for name, lo, hi in zip(SPLITS, bounds[:-1], bounds[1:]):
        out[name] = [([token(v) for v in s], [token(v) for v in transform(spec.kind, s, spec.vocab_size)])
                     for s in sources[lo:hi]]
    return out


def write_tsv(path, pairs: Sequence[Pair]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for src, tgt in pairs:
            fh.write(f"{' '.join(src)}\t{' '.join(tgt)}\n")


def read_tsv(path) -> list[Pair]:
    """Read ``source<TAB>target`` lines of space-separated tokens."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 tab-separated fields, got {len(fields)}")
            pairs.append((fields[0].split(), fields[1].split()))
    return pairs


def read_lines(path) -> list[list[str]]:
    """One tokenised sentence per line (blank lines kept as empty sentences)."""
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n").split() for line in fh]


def write_lines(path, sentences: Sequence[Sequence[str]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(" ".join(s) + "\n" for s in sentences)


def write_task(out_dir, corpus: dict[str, list[Pair]]) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for name in SPLITS:
        p = out_dir / f"{name}.tsv"
        write_tsv(p, corpus[name])
        paths.append(p)
    return paths
