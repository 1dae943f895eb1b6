"""Run configuration: JSON document with sections, overridable from the CLI.

Every artifact embeds a header ``{"tool", "version", "command", "config"}``;
passing that artifact back as ``--config`` re-creates the run.
"""

from __future__ import annotations

import copy
import json
import os
from typing import Any

from . import __version__
from .checkpoint import MAGIC, read_header

TOOL = "latentsr"

DEFAULTS: dict[str, dict[str, Any]] = {
    "gen": {
        "ops": "logexp",
        "max_tokens": 15,
        "max_vars": 3,
        "m": 32,
        "domain": [-2.0, 2.0],
        "const_prob": 0.25,
        "unary_share": 0.3,
        "family": None,
        "count": 2000,
    },
    "model": {"d": 32, "d_n": 8, "n_layers": 2, "n_heads": 2, "d_ff": 64, "n_memory": 4, "pad_len": None},
    "train": {
        "batch_size": 32,
        "epochs": 12,
        "steps_per_epoch": 250,
        "base_lr": 0.03,
        "warmup": 250,
        "kl_anneal_frac": 0.5,
        "n_latent": 4,
        "clip_norm": 1.0,
    },
    "cma": {"s": 50, "p": None, "k": None, "t": 1.1, "max_generations": 100, "omega": 0.005, "max_widen": 3},
    "search": {"split": 0.75, "patience": 20, "min_improvement": 1e-6, "restarts": 3, "record_time": False},
    "bench": {"levels": [0.0, 0.001, 0.01, 0.1], "n_points": 64, "targets": []},
    "interp": {"ratios": [0.0, 0.25, 0.5, 0.75, 1.0]},
    "io": {},
}


def default_config(seed: int = 0) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    cfg["seed"] = seed
    return cfg


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _header_from_text(text: str) -> dict | None:
    first = text.split("\n", 1)[0]
    if first.startswith("# "):
        return json.loads(first[2:])
    if first.startswith('{"_header"'):
        return json.loads(first)["_header"]
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        return None
    if isinstance(doc, dict) and "header" in doc:
        return doc["header"]
    return None


def embedded_header(path) -> dict | None:
    """Header of an artifact written by this tool, or None for plain config files."""
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC))
    if head == MAGIC:
        return read_header(path).get("extra", {}).get("header")
    with open(path, encoding="utf-8") as fh:
        return _header_from_text(fh.read())


def load_config_file(path) -> dict:
    """A JSON config document, or the embedded config of an artifact."""
    header = embedded_header(path)
    if header is not None and "config" in header:
        return header["config"]
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return doc


def make_header(command: str, config: dict) -> dict:
    return {"tool": TOOL, "version": __version__, "command": command, "config": config}


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def comment_line(header: dict) -> str:
    return "# " + dumps(header) + "\n"


def write_text_atomic(path, text: str) -> None:
    tmp = f"{os.fspath(path)}.partial"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)
