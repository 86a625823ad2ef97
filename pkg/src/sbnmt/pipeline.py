"""Glue between token corpora, models, searches and reports."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .data import Pair
from .decoding import SearchConfig, greedy_decode, standard_beam_search, sync_bidirectional_beam_search
from .metrics import corpus_bleu
from .model import EOS, Model, Vocabulary
from .training import TrainingTriple, gold_triple

MODES = ("sb", "l2r", "r2l", "greedy-l2r", "greedy-r2l")


def build_vocabs(pairs: Sequence[Pair]) -> tuple[Vocabulary, Vocabulary]:
    return (Vocabulary.from_sentences(s for s, _ in pairs),
            Vocabulary.from_sentences(t for _, t in pairs))


def to_ids(pairs: Sequence[Pair], src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> list[tuple[list[int], list[int]]]:
    return [(src_vocab.encode(s), tgt_vocab.encode(t)) for s, t in pairs]


def gold_triples(id_pairs) -> list[TrainingTriple]:
    return [gold_triple(s, t) for s, t in id_pairs]


@dataclass
class Translation:
    tokens: list[str]
    direction: str
    score: float
    length: int
    complete: bool
    trace: list[str] | None = None


def translate(model: Model, source: Sequence[str], search: SearchConfig, mode: str = "sb",
              trace: bool = False) -> Translation:
    if mode not in MODES:
        raise ValueError(f"unknown decoding mode {mode!r}; expected one of {MODES}")
    src = [*model.src_vocab.encode(source), EOS]
    lines = None
    if mode == "sb":
        res = sync_bidirectional_beam_search(model, src, search, trace=trace)
        hyp, lines = res.best, res.trace
    elif mode.startswith("greedy"):
        hyp = greedy_decode(model, src, search, mode.split("-")[1].upper())
    else:
        hyp = standard_beam_search(model, src, search, mode.upper())
    return Translation(model.tgt_vocab.decode(hyp.output()), hyp.direction, hyp.score(search.alpha),
                       hyp.length, hyp.complete, lines if trace else None)


def translate_corpus(model: Model, sources: Sequence[Sequence[str]], search: SearchConfig,
                     mode: str = "sb") -> list[Translation]:
    return [translate(model, s, search, mode) for s in sources]


def beam_sweep(model: Model, pairs: Sequence[Pair], sizes: Sequence[int], search: SearchConfig | None = None,
               mode: str = "sb") -> list[tuple[int, float]]:
    """Corpus BLEU of ``pairs`` decoded at each beam size, in the given order."""
    if not sizes:
        raise ValueError("no beam sizes given")
    if mode == "sb" and any(k < 2 or k % 2 for k in sizes):
        raise ValueError(f"synchronous search needs even beam sizes, got {list(sizes)}")
    base = search or SearchConfig()
    refs = [t for _, t in pairs]
    rows = []
    for k in sizes:
        cfg = SearchConfig(k, base.max_len, base.alpha, base.pairing, base.fallback)
        hyps = [tr.tokens for tr in translate_corpus(model, [s for s, _ in pairs], cfg, mode)]
        rows.append((k, corpus_bleu(hyps, refs)))
    return rows


def sweep_table(rows: Sequence[tuple[int, float]]) -> str:
    lines = [f"{'beam':>6}  {'BLEU':>7}"] + [f"{k:>6}  {b:>7.2f}" for k, b in rows]
    return "\n".join(lines) + "\n"
