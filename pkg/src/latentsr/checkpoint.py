"""Binary checkpoint container: magic, JSON header, raw little-endian tensors.

Reloading is bit-exact. Optimizer moments are stored alongside the weights so
training can resume.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Any

import numpy as np

from .cvae import AdamState, ModelConfig, ModelParams, TrainConfig, config_dict
from .encoding import Vocabulary
from .errors import CheckpointError, DiskError

MAGIC = b"LSRCKPT\x01"
FORMAT_VERSION = 1


def _table(prefix: str, arrays: dict[str, np.ndarray], offset: int, entries: list, blobs: list) -> int:
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        data = a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": f"{prefix}{name}", "dtype": a.dtype.str.lstrip("<>|="), "shape": list(a.shape),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    return offset


def save_checkpoint(
    path,
    params: ModelParams,
    adam: AdamState | None = None,
    train_cfg: TrainConfig | None = None,
    extra: dict[str, Any] | None = None,
) -> None:
    """Write atomically (temp file then rename)."""
    entries: list = []
    blobs: list = []
    off = _table("w/", params.tensors, 0, entries, blobs)
    if adam is not None:
        off = _table("m/", adam.m, off, entries, blobs)
        _table("v/", adam.v, off, entries, blobs)
    header = {
        "format": FORMAT_VERSION,
        "model_config": config_dict(params.config),
        "train_config": None if train_cfg is None else config_dict(train_cfg),
        "vocab": {"version": params.vocab.version, "tokens": list(params.vocab.tokens)},
        "step": 0 if adam is None else adam.step,
        "has_optimizer": adam is not None,
        "tensors": entries,
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    tmp = f"{os.fspath(path)}.partial"
    try:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(head)))
            fh.write(head)
            for b in blobs:
                fh.write(b)
        os.replace(tmp, path)
    except OSError as exc:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise DiskError(f"cannot write checkpoint {path}: {exc}") from exc


class Checkpoint:
    def __init__(self, params: ModelParams, adam: AdamState | None, train_cfg: TrainConfig | None, extra: dict):
        self.params = params
        self.adam = adam
        self.train_cfg = train_cfg
        self.extra = extra


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n))


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DiskError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint")
    (n,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(raw[start : start + n])
    if header.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {header.get('format')}")
    body = memoryview(raw)[start + n :]
    groups: dict[str, dict[str, np.ndarray]] = {"w": {}, "m": {}, "v": {}}
    for e in header["tensors"]:
        dt = np.dtype("<" + e["dtype"])
        chunk = body[e["offset"] : e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError(f"truncated tensor {e['name']}")
        arr = np.frombuffer(chunk, dtype=dt).reshape(e["shape"]).astype(dt.newbyteorder("="))
        kind, name = e["name"].split("/", 1)
        groups[kind][name] = arr
    vocab = Vocabulary(header["vocab"]["tokens"], header["vocab"]["version"])
    params = ModelParams(ModelConfig(**header["model_config"]), groups["w"], vocab)
    adam = AdamState(groups["m"], groups["v"], header["step"]) if header["has_optimizer"] else None
    tc = header["train_config"]
    return Checkpoint(params, adam, None if tc is None else TrainConfig(**tc), header["extra"])
