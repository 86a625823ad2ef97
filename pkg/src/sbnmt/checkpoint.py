"""Binary checkpoint format.

Layout (little-endian)::

    b"SBCK"  u32 version
    repeated:  u32 name_len  name (utf-8)  u32 rank  u64 extent * rank  f64 * prod(extents)

Non-tensor metadata (model config, vocabularies, optimizer counters) travels
as a single rank-1 record named ``meta.json`` whose payload is the UTF-8 JSON
text, one byte per float64 value.  Every value round-trips bit-exactly.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"SBCK"
VERSION = 1
META = "meta.json"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write atomically: a temp file in the target directory, then rename."""
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    records = dict(tensors)
    if meta is not None:
        raw = json.dumps(meta, sort_keys=True).encode("utf-8")
        records[META] = np.frombuffer(raw, dtype=np.uint8).astype(np.float64)
    for name, arr in records.items():
        arr = np.asarray(arr, dtype="<f8")  # tobytes() below is C-order; keeps 0-d shapes
        key = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(key)))
        chunks.append(key)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(chunks))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an SBCK checkpoint")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    off = 8
    tensors: dict[str, np.ndarray] = {}
    meta: dict = {}
    try:
        while off < len(buf):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
            off += 8 * count
            if name == META:
                meta = json.loads(arr.astype(np.uint8).tobytes().decode("utf-8"))
            else:
                tensors[name] = arr
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt ({exc})") from None
    return tensors, meta


def average_checkpoints(paths: Sequence, k: int) -> tuple[dict[str, np.ndarray], dict]:
    """Elementwise mean of the model tensors in the last ``k`` checkpoints.

    Optimizer state (names starting with ``opt.``) is dropped; metadata comes
    from the newest checkpoint.
    """
    if k < 1 or len(paths) < k:
        raise CheckpointError(f"need at least k={k} checkpoints, got {len(paths)}")
    chosen = list(paths)[-k:]
    total: dict[str, np.ndarray] | None = None
    meta: dict = {}
    for path in chosen:
        tensors, meta = load_checkpoint(path)
        tensors = {n: a for n, a in tensors.items() if not n.startswith("opt.")}
        if total is None:
            total = {n: a.copy() for n, a in tensors.items()}
            continue
        if tensors.keys() != total.keys():
            raise CheckpointError(f"{path}: tensor names differ from {chosen[0]}")
        for n, a in tensors.items():
            if a.shape != total[n].shape:
                raise CheckpointError(f"{path}: {n} has shape {a.shape}, expected {total[n].shape}")
            total[n] += a
    if k == 1:
        return total, meta
    return {n: a / k for n, a in total.items()}, meta


def save_model(path, model, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
    """Checkpoint a :class:`~sbnmt.model.Model` (weights, config, vocabularies)."""
    tensors = {n: p.data for n, p in model.params.items()}
    if extra:
        tensors.update(extra)
    full_meta = {"model": model.cfg.to_dict(),
                 "src_vocab": model.src_vocab.itos, "tgt_vocab": model.tgt_vocab.itos}
    full_meta.update(meta or {})
    save_checkpoint(path, tensors, full_meta)


def model_from_tensors(tensors: dict[str, np.ndarray], meta: dict):
    from .model import SPECIALS, Model, ModelConfig, Vocabulary, param_shapes
    from .tensor import Tensor

    if "model" not in meta:
        raise CheckpointError("checkpoint carries no model configuration")
    cfg = ModelConfig.from_dict(meta["model"])
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        if tensors[name].shape != shape:
            raise CheckpointError(f"{name}: shape {tensors[name].shape}, expected {shape}")
        params[name] = Tensor(tensors[name], requires_grad=True, op=name)
    vocab = lambda itos: Vocabulary(itos[len(SPECIALS):])
    return Model(params, cfg, vocab(meta["src_vocab"]), vocab(meta["tgt_vocab"]))


def load_model(path):
    tensors, meta = load_checkpoint(path)
    return model_from_tensors(tensors, meta)
