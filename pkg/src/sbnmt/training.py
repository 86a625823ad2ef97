"""Joint bidirectional training: triples, loss, Adam with warmup, checkpoints."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import load_checkpoint, model_from_tensors, save_model
from .decoding import SearchConfig, standard_beam_search
from .model import EOS, L2R, PAD, R2L, Model, ModelConfig, Vocabulary, decode_stacked, decode_uni, encode, init_params
from .tensor import NonFiniteError, Tensor, cross_entropy_label_smoothed

log = logging.getLogger(__name__)


@dataclass
class TrainingTriple:
    src: list[int]  # source ids, EOS-terminated
    y_fwd: list[int]  # <l2r> y_1 .. y_n EOS
    y_bwd: list[int]  # <r2l> y_n .. y_1 EOS
    prov_fwd: str = "gold"
    prov_bwd: str = "gold"
    flags: tuple[str, ...] = ()


def fwd_side(content: Sequence[int]) -> list[int]:
    return [L2R, *content, EOS]


def bwd_side(content_reversed: Sequence[int]) -> list[int]:
    return [R2L, *content_reversed, EOS]


def gold_triple(src: Sequence[int], tgt: Sequence[int]) -> TrainingTriple:
    """``src``/``tgt`` are content ids (no EOS)."""
    return TrainingTriple([*src, EOS], fwd_side(tgt), bwd_side(tgt[::-1]))


@dataclass
class TrainingConfig:
    beta1: float = 0.9
    beta2: float = 0.998
    adam_eps: float = 1e-9
    warmup_steps: int = 400
    lr_scale: float = 1.0
    fixed_lr: float | None = None  # overrides the warmup schedule when set
    eps_ls: float = 0.1
    batch_size: int = 64
    total_steps: int = 2000
    checkpoint_every: int = 500
    avg_last_k: int = 1
    seed: int = 0
    directions: str = "both"  # both | l2r | r2l
    supervise: str = "both"  # both | gold
    bucket_batches: int = 20

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if not 0.0 <= self.eps_ls < 1.0:
            raise ValueError("eps_ls must be in [0, 1)")
        if self.directions not in ("both", "l2r", "r2l"):
            raise ValueError(f"unknown directions {self.directions!r}")
        if self.supervise not in ("both", "gold"):
            raise ValueError(f"unknown supervise {self.supervise!r}")


# ---------------------------------------------------------------- batching

@dataclass
class Batch:
    src: np.ndarray  # [B, S]
    src_valid: np.ndarray  # [B, S]
    dec_in: np.ndarray  # [2, B, T]
    dec_out: np.ndarray  # [2, B, T], PAD where excluded
    dec_valid: np.ndarray  # [2, B, T]


def make_batch(triples: Sequence[TrainingTriple], supervise: str = "both") -> Batch:
    """Right-pad both target sides to the common length max(len_fwd, len_bwd) - 1."""
    if not triples:
        raise ValueError("empty batch")
    B = len(triples)
    S = max(len(t.src) for t in triples)
    T = max(max(len(t.y_fwd), len(t.y_bwd)) for t in triples) - 1
    src = np.full((B, S), PAD, dtype=np.int64)
    dec_in = np.full((2, B, T), PAD, dtype=np.int64)
    dec_out = np.full((2, B, T), PAD, dtype=np.int64)
    for b, t in enumerate(triples):
        src[b, :len(t.src)] = t.src
        for s, (y, prov) in enumerate(((t.y_fwd, t.prov_fwd), (t.y_bwd, t.prov_bwd))):
            n = len(y) - 1
            dec_in[s, b, :n] = y[:-1]
            if supervise == "both" or prov == "gold":
                dec_out[s, b, :n] = y[1:]
    lengths = np.array([[len(t.y_fwd) - 1 for t in triples], [len(t.y_bwd) - 1 for t in triples]])
    dec_valid = np.arange(T)[None, None, :] < lengths[:, :, None]
    return Batch(src, src != PAD, dec_in, dec_out, dec_valid)


# ---------------------------------------------------------------- loss

def joint_loss(batch: Batch | Sequence[TrainingTriple], params, cfg: ModelConfig, eps_ls: float = 0.0,
               train: bool = False, rng: np.random.Generator | None = None,
               directions: str = "both", supervise: str = "both") -> Tensor:
    """Mean smoothed NLL of the forward targets plus that of the backward
    targets, both from one dual decoding pass."""
    if not isinstance(batch, Batch):
        batch = make_batch(batch, supervise)
    h = encode(batch.src, params, cfg, batch.src_valid, train, rng)
    if directions == "both":
        logits = decode_stacked(batch.dec_in, h, params, cfg, batch.src_valid, batch.dec_valid, train, rng)
        streams = [(logits[0], batch.dec_out[0]), (logits[1], batch.dec_out[1])]
    else:
        s = 0 if directions == "l2r" else 1
        streams = [(decode_uni(batch.dec_in[s], h, params, cfg, batch.src_valid, train, rng), batch.dec_out[s])]
    total = None
    for logits, targets in streams:
        if not (targets != PAD).any():
            continue
        term = cross_entropy_label_smoothed(logits, targets, eps_ls, PAD)
        total = term if total is None else total + term
    if total is None:
        raise ValueError("batch has no supervised positions")
    return total


# ---------------------------------------------------------------- optimisation

def noam_lr(step: int, d_model: int, warmup: int, scale: float = 1.0) -> float:
    """``scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)``."""
    if step < 1:
        raise ValueError("step counts from 1")
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.998, eps: float = 1e-9):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        grads = {}
        for n, p in self.params.items():
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for {n}; step aborted")
            grads[n] = g
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for n, p in self.params.items():
            g = grads[n]
            self.m[n] = b1 * self.m[n] + (1.0 - b1) * g
            self.v[n] = b2 * self.v[n] + (1.0 - b2) * g * g
            p.data = p.data - lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{n}": a for n, a in self.m.items()}
        out.update({f"opt.v.{n}": a for n, a in self.v.items()})
        return out

    def load_state(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for n in self.params:
            self.m[n] = tensors[f"opt.m.{n}"].copy()
            self.v[n] = tensors[f"opt.v.{n}"].copy()
        self.t = t


def adam_step(params: dict[str, Tensor], opt: Adam, step: int, tcfg: TrainingConfig, d_model: int) -> float:
    """One update at 1-based ``step``; returns the learning rate used."""
    lr = tcfg.fixed_lr if tcfg.fixed_lr is not None else noam_lr(step, d_model, tcfg.warmup_steps, tcfg.lr_scale)
    opt.step(lr)
    return lr


# ---------------------------------------------------------------- loop

@dataclass
class TrainResult:
    model: Model
    losses: list[tuple[int, float]]
    checkpoints: list[Path] = field(default_factory=list)


def _epoch_batches(triples: Sequence[TrainingTriple], tcfg: TrainingConfig, epoch: int) -> list[np.ndarray]:
    """Seeded shuffle, length-sorted within windows to limit padding, then the
    batch order shuffled again."""
    rng = np.random.default_rng([tcfg.seed, epoch])
    perm = rng.permutation(len(triples))
    B = tcfg.batch_size
    window = B * max(tcfg.bucket_batches, 1)
    batches = []
    for lo in range(0, len(perm), window):
        chunk = perm[lo:lo + window]
        lengths = np.array([max(len(triples[i].y_fwd), len(triples[i].y_bwd)) for i in chunk])
        chunk = chunk[np.argsort(lengths, kind="stable")]
        batches.extend(chunk[i:i + B] for i in range(0, len(chunk), B))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


class _Schedule:
    def __init__(self, triples, tcfg):
        self.triples, self.tcfg = triples, tcfg
        self.epoch, self.plan = -1, []
        self.per_epoch = len(_epoch_batches(triples, tcfg, 0))

    def batch_for(self, step: int) -> list[TrainingTriple]:
        epoch, j = divmod(step - 1, self.per_epoch)
        if epoch != self.epoch:
            self.epoch, self.plan = epoch, _epoch_batches(self.triples, self.tcfg, epoch)
        return [self.triples[i] for i in self.plan[j]]


_CKPT = re.compile(r"step_(\d+)\.sbck$")


def list_checkpoints(out_dir) -> list[Path]:
    paths = [p for p in Path(out_dir).glob("step_*.sbck") if _CKPT.search(p.name)]
    return sorted(paths, key=lambda p: int(_CKPT.search(p.name).group(1)))


def train(triples: Sequence[TrainingTriple], tcfg: TrainingConfig, mcfg: ModelConfig,
          src_vocab: Vocabulary, tgt_vocab: Vocabulary, out_dir=None, resume: bool = False,
          stop_after: int | None = None, init: Model | None = None,
          progress: Callable[[int, float], None] | None = None) -> TrainResult:
    """Train for ``tcfg.total_steps`` updates.

    With ``out_dir`` set, checkpoints ``step_NNNNNN.sbck`` are written every
    ``checkpoint_every`` steps (and at the end) and ``loss.tsv`` receives one
    ``step<TAB>loss`` line per step.  ``resume`` restarts from the newest
    checkpoint; ``stop_after`` ends the run early, as an interruption would.
    """
    if not triples:
        raise ValueError("empty training set")
    out = Path(out_dir) if out_dir is not None else None
    params = init.params if init is not None else init_params(mcfg, tcfg.seed)
    model = Model(params, mcfg, src_vocab, tgt_vocab)
    opt = Adam(params, tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    losses: list[tuple[int, float]] = []
    start = 1
    loss_path = out / "loss.tsv" if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        existing = list_checkpoints(out)
        if resume and existing:
            tensors, meta = load_checkpoint(existing[-1])
            restored = model_from_tensors(tensors, meta)
            for n, p in params.items():
                p.data = restored.params[n].data
            opt.load_state(tensors, meta["step"])
            start = meta["step"] + 1
            losses = [(s, l) for s, l in read_loss_curve(loss_path) if s < start]
        _write_loss_curve(loss_path, losses)
    sched = _Schedule(triples, tcfg)
    checkpoints: list[Path] = []
    last = tcfg.total_steps if stop_after is None else min(stop_after, tcfg.total_steps)
    for step in range(start, last + 1):
        rng = np.random.default_rng([tcfg.seed, step, 1])
        batch = make_batch(sched.batch_for(step), tcfg.supervise)
        opt.zero_grad()
        loss = joint_loss(batch, params, mcfg, tcfg.eps_ls, train=True, rng=rng,
                          directions=tcfg.directions)
        loss.backward()
        adam_step(params, opt, step, tcfg, mcfg.d_model)
        value = loss.item()
        losses.append((step, value))
        if loss_path is not None:
            with open(loss_path, "a", encoding="utf-8") as fh:
                fh.write(f"{step}\t{value!r}\n")
        if progress is not None:
            progress(step, value)
        if out is not None and (step % tcfg.checkpoint_every == 0 or step == tcfg.total_steps):
            path = out / f"step_{step:06d}.sbck"
            save_model(path, model, opt.state_tensors(), {"step": step, "train": asdict(tcfg)})
            checkpoints.append(path)
    opt.zero_grad()
    return TrainResult(model, losses, checkpoints)


def read_loss_curve(path) -> list[tuple[int, float]]:
    path = Path(path)
    if not path.exists():
        return []
    rows = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            s, l = line.split("\t")
            rows.append((int(s), float(l)))
    return rows


def _write_loss_curve(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{s}\t{l!r}\n" for s, l in rows)


# ---------------------------------------------------------------- pseudo references

@dataclass
class PseudoOutputs:
    fwd: list[list[int]]  # L2R model output, natural order
    bwd: list[list[int]]  # R2L model output, reversed order
    fwd_truncated: list[bool]
    bwd_truncated: list[bool]


def decode_pseudo(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], l2r_model: Model, r2l_model: Model,
                  search: SearchConfig | None = None) -> PseudoOutputs:
    search = search or SearchConfig(beam_size=4, alpha=0.6)
    out = PseudoOutputs([], [], [], [])
    for src, _ in pairs:
        s = [*src, EOS]
        for model, direction, seqs, flags in ((l2r_model, "L2R", out.fwd, out.fwd_truncated),
                                              (r2l_model, "R2L", out.bwd, out.bwd_truncated)):
            hyp = standard_beam_search(model, s, search, direction)
            body = [t for t in hyp.tokens[1:] if t != EOS]
            seqs.append(body)
            flags.append(not hyp.complete)
    return out


def _pseudo_triple(src, fwd, bwd, prov_fwd, prov_bwd, flags) -> TrainingTriple:
    return TrainingTriple([*src, EOS], fwd_side(fwd), bwd_side(bwd), prov_fwd, prov_bwd, tuple(flags))


def build_pseudo_triples(pairs, l2r_model: Model, r2l_model: Model, search: SearchConfig | None = None,
                         pseudo: PseudoOutputs | None = None) -> list[TrainingTriple]:
    """Two triples per pair: (x, fwd pseudo, bwd gold) and (x, fwd gold, bwd pseudo)."""
    if not pairs:
        return []
    pseudo = pseudo or decode_pseudo(pairs, l2r_model, r2l_model, search)
    out = []
    for i, (src, tgt) in enumerate(pairs):
        gf, gb = list(tgt), list(tgt)[::-1]
        pf, pb = pseudo.fwd[i], pseudo.bwd[i]
        ff = ("fwd_truncated",) if pseudo.fwd_truncated[i] else ()
        fb = ("bwd_truncated",) if pseudo.bwd_truncated[i] else ()
        out.append(_pseudo_triple(src, pf, gb, "pseudo", "gold", ff))
        out.append(_pseudo_triple(src, gf, pb, "gold", "pseudo", fb))
    return out


def expand_six_triples(pairs, l2r_model: Model, r2l_model: Model, search: SearchConfig | None = None,
                       pseudo: PseudoOutputs | None = None) -> list[TrainingTriple]:
    """Six gold/pseudo/reversed-pseudo combinations per pair."""
    if not pairs:
        return []
    pseudo = pseudo or decode_pseudo(pairs, l2r_model, r2l_model, search)
    out = []
    for i, (src, tgt) in enumerate(pairs):
        gf, gb = list(tgt), list(tgt)[::-1]
        pf, pb = pseudo.fwd[i], pseudo.bwd[i]
        ff = ("fwd_truncated",) if pseudo.fwd_truncated[i] else ()
        fb = ("bwd_truncated",) if pseudo.bwd_truncated[i] else ()
        out.extend([
            _pseudo_triple(src, gf, pb, "gold", "pseudo", fb),
            _pseudo_triple(src, pb[::-1], gb, "pseudo", "gold", fb),
            _pseudo_triple(src, pf, gb, "pseudo", "gold", ff),
            _pseudo_triple(src, gf, pf[::-1], "gold", "pseudo", ff),
            _pseudo_triple(src, pf, pb, "pseudo", "pseudo", ff + fb),
            _pseudo_triple(src, pb[::-1], pf[::-1], "pseudo", "pseudo", ff + fb),
        ])
    return out
