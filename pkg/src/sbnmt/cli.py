"""Command-line entry point.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines (``#``
starts a comment); keys are the long flag names with dashes or underscores.
Flags given on the command line override the file.  Exit status: 0 success,
1 usage error (bad flag, malformed config), 2 data or model error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

from .attention import FusionConfig
from .checkpoint import CheckpointError, average_checkpoints, load_model, model_from_tensors, save_checkpoint
from .data import KINDS, TaskSpec, generate_task, read_lines, read_tsv, write_lines, write_task
from .decoding import SearchConfig
from .metrics import corpus_bleu, evaluate
from .model import EOS, L2R, PAD, R2L, ModelConfig
from .pipeline import MODES, beam_sweep, build_vocabs, gold_triples, sweep_table, to_ids, translate
from .tensor import NonFiniteError
from .training import TrainingConfig, TrainingTriple, build_pseudo_triples, expand_six_triples, list_checkpoints, train

log = logging.getLogger("sbnmt")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class Opt:
    name: str
    type: Callable = str
    default: Any = None
    help: str = ""
    choices: Sequence | None = None


def _bool(s) -> bool:
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s) -> list[int]:
    return [int(x) for x in str(s).replace(",", " ").split()]


def _opt_float(s):
    return None if str(s).lower() in ("", "none") else float(s)


MODEL_OPTS = [
    Opt("layers", int, 2, "encoder and decoder layers"),
    Opt("d-model", int, 64, "model width"),
    Opt("heads", int, 4, "attention heads"),
    Opt("d-ff", int, 256, "feed-forward width"),
    Opt("dropout", float, 0.1, "dropout rate"),
    Opt("max-len", int, 64, "longest supported sequence"),
    Opt("fusion", str, "nonlinear", "history/future fusion", ("linear", "nonlinear", "gate")),
    Opt("lam", float, 0.1, "future-context weight for linear/nonlinear fusion"),
    Opt("activation", str, "tanh", "activation for nonlinear fusion", ("tanh", "relu")),
]

TRAIN_OPTS = [
    Opt("steps", int, 2000, "optimizer updates"),
    Opt("batch-size", int, 64, "sentences per batch"),
    Opt("warmup", int, 400, "warmup steps"),
    Opt("lr-scale", float, 1.0, "multiplier on the warmup schedule"),
    Opt("lr", _opt_float, None, "fixed learning rate (disables the schedule)"),
    Opt("label-smoothing", float, 0.1, "label smoothing"),
    Opt("checkpoint-every", int, 500, "steps between checkpoints"),
    Opt("avg-last", int, 1, "average this many final checkpoints into model.sbck"),
    Opt("seed", int, 0, "random seed"),
    Opt("directions", str, "both", "which decoder streams to train", ("both", "l2r", "r2l")),
    Opt("supervise", str, "both", "supervise pseudo-reference sides too, or gold only", ("both", "gold")),
    Opt("resume", _bool, False, "continue from the newest checkpoint in --out"),
]

SEARCH_OPTS = [
    Opt("beam", int, 4, "beam size (split between directions for sb)"),
    Opt("mode", str, "sb", "search", MODES),
    Opt("alpha", float, 0.6, "length penalty exponent"),
    Opt("decode-max-len", int, 64, "longest output in tokens, EOS included"),
    Opt("pairing", str, "rank", "partner pairing in sb search", ("rank", "one_best")),
    Opt("fallback", str, "completed", "partner when the other half is finished", ("completed", "history")),
]

COMMANDS: dict[str, tuple[str, list[Opt]]] = {
    "gen-data": ("generate a synthetic corpus", [
        Opt("task", str, "copy", "task kind", KINDS),
        Opt("vocab-size", int, 20), Opt("min-len", int, 3), Opt("max-len", int, 12),
        Opt("n-train", int, 10000), Opt("n-dev", int, 500), Opt("n-test", int, 1000),
        Opt("seed", int, 0), Opt("out", str, None, "output directory"),
    ]),
    "train": ("train a model", [
        Opt("train", str, None, "gold source<TAB>target corpus"),
        Opt("triples", str, None, "triples file from build-triples (replaces --train)"),
        Opt("out", str, None, "run directory"),
        *MODEL_OPTS, *TRAIN_OPTS,
    ]),
    "build-triples": ("decode pseudo references and write training triples", [
        Opt("train", str, None, "gold corpus"),
        Opt("l2r", str, None, "left-to-right baseline checkpoint"),
        Opt("r2l", str, None, "right-to-left baseline checkpoint"),
        Opt("expand", str, "two", "triples per sentence pair", ("two", "six")),
        Opt("gold", _bool, True, "also emit the all-gold triple per pair"),
        Opt("beam", int, 4), Opt("alpha", float, 0.6), Opt("decode-max-len", int, 64),
        Opt("out", str, None, "triples file"),
    ]),
    "translate": ("decode one sentence per input line", [
        Opt("ckpt", str, None), Opt("input", str, None, "sentences, or a TSV whose first column is used"),
        Opt("output", str, None, "defaults to stdout"),
        Opt("records", str, None, "per-sentence direction/score/length records"),
        Opt("trace", str, None, "per-step search trace (sb mode)"),
        *SEARCH_OPTS,
    ]),
    "score": ("corpus BLEU", [
        Opt("cand", str, None), Opt("ref", str, None, "references, or a TSV whose second column is used"),
        Opt("max-n", int, 4),
    ]),
    "analyze": ("full evaluation report", [
        Opt("cand", str, None), Opt("ref", str, None), Opt("src", str, None),
        Opt("records", str, None, "records file from translate, for direction statistics"),
        Opt("k", int, 4, "prefix/suffix window"), Opt("bucket-width", int, 5),
        Opt("name", str, "system"), Opt("report", str, None, "text report path (default stdout)"),
        Opt("kv", str, None, "key=value report path"),
    ]),
    "sweep-beam": ("BLEU across beam sizes", [
        Opt("ckpt", str, None), Opt("data", str, None, "source<TAB>target corpus"),
        Opt("sizes", _ints, [2, 4, 8, 16, 32]), Opt("limit", int, 0, "use only the first N pairs"),
        Opt("out", str, None, "table path (default stdout)"),
        *[o for o in SEARCH_OPTS if o.name != "beam"],
    ]),
    "avg-ckpt": ("average the last k checkpoints", [
        Opt("inputs", str, None, "comma-separated checkpoints, or a run directory"),
        Opt("k", int, 1), Opt("out", str, None),
    ]),
}


def build_parser() -> _Parser:
    parser = _Parser(prog="sbnmt", description="Bidirectional sequence transduction toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, (help_text, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key = value configuration file")
        for o in opts:
            default = f" (default: {o.default})" if o.default is not None else ""
            p.add_argument(f"--{o.name}", type=o.type, default=None, choices=o.choices,
                           help=o.help + default, metavar=o.name.upper().replace("-", "_"))
    return parser


def read_config(path) -> dict[str, str]:
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise UsageError(f"{path}:{lineno}: empty key")
        out[key.replace("_", "-")] = value
    return out


def resolve(command: str, ns: argparse.Namespace) -> argparse.Namespace:
    """Merge defaults < config file < command-line flags."""
    opts = {o.name: o for o in COMMANDS[command][1]}
    values = {name: o.default for name, o in opts.items()}
    if ns.config:
        for key, raw in read_config(ns.config).items():
            if key not in opts:
                raise UsageError(f"{ns.config}: unknown key {key!r} for {command}")
            o = opts[key]
            try:
                v = o.type(raw)
            except ValueError:
                raise UsageError(f"{ns.config}: bad value {raw!r} for {key}") from None
            if o.choices and v not in o.choices:
                raise UsageError(f"{ns.config}: {key} must be one of {list(o.choices)}")
            values[key] = v
    for name in opts:
        v = getattr(ns, name.replace("-", "_"))
        if v is not None:
            values[name] = v
    return argparse.Namespace(**{k.replace("-", "_"): v for k, v in values.items()})


def _need(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) in (None, "")]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join(missing)}")


def _search(args, beam=None) -> SearchConfig:
    return SearchConfig(beam if beam is not None else args.beam, args.decode_max_len, args.alpha,
                        args.pairing, args.fallback)


def _reference_column(path, column: int) -> list[list[str]]:
    """Sentences from a plain file, or one column of a TSV file."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if lines and all("\t" in l for l in lines if l):
        return [l.split("\t")[column].split() for l in lines]
    return [l.split() for l in lines]


# ---------------------------------------------------------------- triples file

def write_triples(path, triples: Sequence[TrainingTriple], src_vocab, tgt_vocab) -> None:
    def text(ids, vocab):
        return " ".join(vocab.decode(i for i in ids if i not in (EOS, L2R, R2L, PAD)))

    rows = [f"{text(t.src, src_vocab)}\t{text(t.y_fwd, tgt_vocab)}\t{text(t.y_bwd, tgt_vocab)}\t"
            f"{t.prov_fwd}\t{t.prov_bwd}\t{','.join(t.flags)}" for t in triples]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(r + "\n" for r in rows), encoding="utf-8")


def read_triples(path) -> list[tuple[list[str], list[str], list[str], str, str, tuple[str, ...]]]:
    """Rows of (source, forward target, backward target in reversed order,
    forward provenance, backward provenance, flags)."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        f = line.split("\t")
        if len(f) != 6:
            raise DataError(f"{path}:{lineno}: expected 6 tab-separated fields, got {len(f)}")
        rows.append((f[0].split(), f[1].split(), f[2].split(), f[3], f[4], tuple(x for x in f[5].split(",") if x)))
    return rows


# ---------------------------------------------------------------- commands

def cmd_gen_data(a) -> int:
    _need(a, "out")
    spec = TaskSpec(a.task, a.vocab_size, a.min_len, a.max_len, a.n_train, a.n_dev, a.n_test, a.seed)
    for p in write_task(a.out, generate_task(spec)):
        print(p)
    return 0


def cmd_train(a) -> int:
    _need(a, "out")
    if not (a.train or a.triples):
        raise UsageError("train needs --train or --triples")
    if a.triples:
        rows = read_triples(a.triples)
        pairs = [(s, f) for s, f, *_ in rows] + [(s, b[::-1]) for s, _, b, *_ in rows]
        src_vocab, tgt_vocab = build_vocabs(pairs)
        from .training import bwd_side, fwd_side

        triples = [TrainingTriple([*src_vocab.encode(s), EOS], fwd_side(tgt_vocab.encode(f)),
                                  bwd_side(tgt_vocab.encode(b)), pf, pb, fl) for s, f, b, pf, pb, fl in rows]
    else:
        pairs = read_tsv(a.train)
        src_vocab, tgt_vocab = build_vocabs(pairs)
        triples = gold_triples(to_ids(pairs, src_vocab, tgt_vocab))
    if not triples:
        raise DataError("training data is empty")
    fusion = FusionConfig(mode=a.fusion, lam=a.lam, activation=a.activation)
    mcfg = ModelConfig(len(src_vocab), len(tgt_vocab), a.layers, a.d_model, a.heads, a.d_ff, a.dropout,
                       a.max_len, fusion)
    tcfg = TrainingConfig(warmup_steps=a.warmup, lr_scale=a.lr_scale, fixed_lr=a.lr, eps_ls=a.label_smoothing,
                          batch_size=a.batch_size, total_steps=a.steps, checkpoint_every=a.checkpoint_every,
                          avg_last_k=a.avg_last, seed=a.seed, directions=a.directions, supervise=a.supervise)

    def progress(step, loss):
        if step % 100 == 0 or step == tcfg.total_steps:
            log.info("step %d loss %.4f", step, loss)

    train(triples, tcfg, mcfg, src_vocab, tgt_vocab, a.out, resume=a.resume, progress=progress)
    out = Path(a.out)
    ckpts = list_checkpoints(out)
    k = min(tcfg.avg_last_k, len(ckpts))
    tensors, meta = average_checkpoints(ckpts, k)
    meta["averaged"] = [p.name for p in ckpts[-k:]]
    save_checkpoint(out / "model.sbck", tensors, meta)
    print(out / "model.sbck")
    return 0


def cmd_build_triples(a) -> int:
    _need(a, "train", "l2r", "r2l", "out")
    l2r, r2l = load_model(a.l2r), load_model(a.r2l)
    pairs = read_tsv(a.train)
    id_pairs = [(l2r.src_vocab.encode(s), l2r.tgt_vocab.encode(t)) for s, t in pairs]
    search = SearchConfig(a.beam, a.decode_max_len, a.alpha)
    build = expand_six_triples if a.expand == "six" else build_pseudo_triples
    triples = build(id_pairs, l2r, r2l, search)
    if a.gold:
        triples = gold_triples(id_pairs) + triples
    write_triples(a.out, triples, l2r.src_vocab, l2r.tgt_vocab)
    print(a.out)
    return 0


def cmd_translate(a) -> int:
    _need(a, "ckpt", "input")
    model = load_model(a.ckpt)
    sources = _reference_column(a.input, 0)
    search = _search(a)
    outputs, records, traces = [], [], []
    for i, s in enumerate(sources):
        tr = translate(model, s, search, a.mode, trace=bool(a.trace) and a.mode == "sb")
        outputs.append(tr.tokens)
        records.append(f"{i}\tdirection={tr.direction}\tscore={tr.score:.6f}\tlength={tr.length}"
                       f"\tcomplete={int(tr.complete)}")
        if tr.trace is not None:
            traces.append(f"# sentence {i}")
            traces.extend(tr.trace)
    if a.output:
        write_lines(a.output, outputs)
    else:
        sys.stdout.writelines(" ".join(o) + "\n" for o in outputs)
    if a.records:
        Path(a.records).write_text("".join(r + "\n" for r in records), encoding="utf-8")
    if a.trace:
        Path(a.trace).write_text("".join(t + "\n" for t in traces), encoding="utf-8")
    return 0


def cmd_score(a) -> int:
    _need(a, "cand", "ref")
    cands, refs = read_lines(a.cand), _reference_column(a.ref, 1)
    if len(cands) != len(refs):
        raise DataError(f"{len(cands)} candidate lines but {len(refs)} references")
    print(f"BLEU {corpus_bleu(cands, refs, a.max_n):.2f}")
    print(f"BLEU(smoothed) {corpus_bleu(cands, refs, a.max_n, smooth=True):.2f}")
    return 0


def _directions(path) -> list[str]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        fields = dict(f.split("=", 1) for f in line.split("\t")[1:])
        out.append(fields["direction"])
    return out


def cmd_analyze(a) -> int:
    _need(a, "cand", "ref")
    cands, refs = read_lines(a.cand), _reference_column(a.ref, 1)
    if len(cands) != len(refs):
        raise DataError(f"{len(cands)} candidate lines but {len(refs)} references")
    sources = _reference_column(a.src, 0) if a.src else None
    directions = _directions(a.records) if a.records else None
    report = evaluate(cands, refs, sources, a.k, a.bucket_width if sources else None, directions)
    text = report.render(a.name)
    if a.report:
        Path(a.report).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if a.kv:
        Path(a.kv).write_text(report.to_kv(), encoding="utf-8")
    return 0


def cmd_sweep_beam(a) -> int:
    _need(a, "ckpt", "data")
    model = load_model(a.ckpt)
    pairs = read_tsv(a.data)
    if a.limit:
        pairs = pairs[:a.limit]
    rows = beam_sweep(model, pairs, a.sizes, _search(a, beam=2), a.mode)
    table = sweep_table(rows)
    if a.out:
        Path(a.out).write_text(table, encoding="utf-8")
    else:
        sys.stdout.write(table)
    return 0


def cmd_avg_ckpt(a) -> int:
    _need(a, "inputs", "out")
    p = Path(a.inputs)
    paths = list_checkpoints(p) if p.is_dir() else [Path(x) for x in a.inputs.split(",") if x]
    tensors, meta = average_checkpoints(paths, a.k)
    model_from_tensors(tensors, meta)  # validate before writing
    meta["averaged"] = [x.name for x in paths[-a.k:]]
    save_checkpoint(a.out, tensors, meta)
    print(a.out)
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "build-triples": cmd_build_triples,
    "translate": cmd_translate, "score": cmd_score, "analyze": cmd_analyze,
    "sweep-beam": cmd_sweep_beam, "avg-ckpt": cmd_avg_ckpt,
}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        ns = build_parser().parse_args(argv)
        if ns.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        args = resolve(ns.command, ns)
        return HANDLERS[ns.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, NonFiniteError, KeyError, ValueError, OSError) as exc:
        msg = exc.strerror + f": {exc.filename}" if isinstance(exc, OSError) and exc.strerror else exc
        if isinstance(exc, KeyError):
            msg = exc.args[0] if exc.args else "unknown key"
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
