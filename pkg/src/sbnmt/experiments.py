"""Desk-scale end-to-end experiments: corpus generation, training, decoding
and scoring wired together with fixed seeds."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

from .attention import FusionConfig
from .data import TaskSpec, generate_task
from .decoding import SearchConfig
from .metrics import exact_match, prefix_suffix_accuracy
from .model import Model, ModelConfig
from .pipeline import beam_sweep, build_vocabs, gold_triples, to_ids, translate_corpus
from .training import TrainingConfig, build_pseudo_triples, train

Progress = Callable[[int, float], None]


@dataclass
class CopyRun:
    model: Model
    exact_match: float
    steps: int
    test_size: int


def copy_experiment(steps: int = 4000, lr_scale: float = 0.5, seed: int = 0, n_test: int = 1000,
                    beam: int = 4, progress: Progress | None = None) -> CopyRun:
    """Train the default model jointly on the copy task and measure
    synchronous-search exact match on held-out pairs."""
    corpus = generate_task(TaskSpec("copy", 20, 3, 12, 10000, 500, n_test, seed))
    sv, tv = build_vocabs(corpus["train"])
    triples = gold_triples(to_ids(corpus["train"], sv, tv))
    tcfg = TrainingConfig(total_steps=steps, lr_scale=lr_scale, seed=seed)
    model = train(triples, tcfg, ModelConfig(len(sv), len(tv)), sv, tv, progress=progress).model
    test = corpus["test"]
    out = translate_corpus(model, [s for s, _ in test], SearchConfig(beam, 64, 0.6), "sb")
    return CopyRun(model, exact_match([o.tokens for o in out], [t for _, t in test]), steps, len(test))


def copy_beam_sweep(model: Model, seed: int = 0, n_pairs: int = 200,
                    sizes=(2, 4, 8, 16, 32)) -> list[tuple[int, float]]:
    corpus = generate_task(TaskSpec("copy", 20, 3, 12, 10000, 500, 1000, seed))
    return beam_sweep(model, corpus["test"][:n_pairs], sizes, SearchConfig(4, 64, 0.6), "sb")


@dataclass
class MechanismRun:
    seed: int
    l2r: tuple[float, float]  # (first-k, last-k) accuracy
    r2l: tuple[float, float]
    sb: tuple[float, float]

    def baseline_gaps_hold(self) -> bool:
        return self.l2r[1] < self.l2r[0] and self.r2l[0] < self.r2l[1]

    def sb_balanced(self) -> bool:
        return min(self.sb) >= max(min(self.l2r), min(self.r2l))

    def passed(self) -> bool:
        return self.baseline_gaps_hold() and self.sb_balanced()


def mechanism_experiment(seed: int = 0, n_train: int = 4000, n_test: int = 300, baseline_steps: int = 3000,
                         sb_steps: int = 3000, lr_scale: float = 0.5, k: int = 4, beam: int = 4,
                         model_overrides: dict | None = None, progress: Progress | None = None) -> MechanismRun:
    """Train history-only L2R and R2L baselines on the suffix-hard task, build
    pseudo-reference triples from them, train a joint model on those, and
    compare first-k / last-k accuracies on held-out pairs."""
    corpus = generate_task(TaskSpec("suffix-hard", 20, 3, 12, n_train, 100, n_test, seed))
    sv, tv = build_vocabs(corpus["train"])
    ids = to_ids(corpus["train"], sv, tv)
    base_cfg = ModelConfig(len(sv), len(tv), **(model_overrides or {}))
    uni_cfg = replace(base_cfg, fusion=FusionConfig("linear", 0.0))
    tcfg = TrainingConfig(total_steps=baseline_steps, lr_scale=lr_scale, seed=seed)
    gold = gold_triples(ids)
    l2r = train(gold, replace(tcfg, directions="l2r"), uni_cfg, sv, tv, progress=progress).model
    r2l = train(gold, replace(tcfg, directions="r2l"), uni_cfg, sv, tv, progress=progress).model
    search = SearchConfig(beam, 64, 0.6)
    triples = build_pseudo_triples(ids, l2r, r2l, search)
    sb = train(triples, replace(tcfg, total_steps=sb_steps), base_cfg, sv, tv, progress=progress).model

    test = corpus["test"]
    srcs, refs = [s for s, _ in test], [t for _, t in test]

    def acc(model: Model, mode: str) -> tuple[float, float]:
        out = translate_corpus(model, srcs, search, mode)
        return prefix_suffix_accuracy([o.tokens for o in out], refs, k)

    return MechanismRun(seed, acc(l2r, "l2r"), acc(r2l, "r2l"), acc(sb, "sb"))
