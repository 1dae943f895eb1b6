"""Synthetic equation corpora paired with sampled numeric data."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .encoding import BINARY_OPS, representable, round_sig4
from .errors import GenerationTimeout
from .seeding import stream_id
from .expr import (
    Expr,
    complexity,
    const,
    evaluate_masked,
    operators,
    prefix_text,
    to_prefix,
    var,
    variables,
    walk,
)

LOGEXP_OPS = ("add", "sub", "mul", "div", "log", "exp")
TRIG_OPS = LOGEXP_OPS + ("sin", "cos", "tan")
OPERATOR_SETS = {"logexp": LOGEXP_OPS, "trig": TRIG_OPS}
# function-family suites: arithmetic plus the family's own operators
FAMILY_OPS = {
    "exp": ("exp",),
    "trig": ("sin", "cos", "tan"),
    "log": ("log",),
}

MAX_EXPR_REJECTIONS = 10_000
MIN_ACCEPT_RATE = 0.01


@dataclass
class GenConfig:
    ops: tuple[str, ...] = LOGEXP_OPS
    max_tokens: int = 15
    max_vars: int = 3
    m: int = 32
    domain: tuple[float, float] = (-2.0, 2.0)
    const_prob: float = 0.25
    unary_share: float = 0.3
    family: str | None = None
    seed: int = 0

    def __post_init__(self):
        self.ops = tuple(self.ops)
        self.domain = tuple(float(v) for v in self.domain)
        if self.max_tokens < 1 or self.m < 1 or not 1 <= self.max_vars <= 10:
            raise ValueError("need max_tokens >= 1, m >= 1 and 1 <= max_vars <= 10")
        if not set(self.ops) <= set(TRIG_OPS):
            raise ValueError(f"unknown operators in {self.ops}")
        if self.family is not None and self.family not in FAMILY_OPS:
            raise ValueError(f"unknown family {self.family!r}")
        if self.domain[0] >= self.domain[1]:
            raise ValueError("empty input domain")

    @classmethod
    def for_family(cls, family: str, **kw) -> "GenConfig":
        ops = tuple(BINARY_OPS) + FAMILY_OPS[family]
        return cls(ops=ops, family=family, **kw)

    @property
    def tag(self) -> str:
        if self.family:
            return self.family
        if set(self.ops) == set(LOGEXP_OPS):
            return "logexp"
        if set(self.ops) == set(TRIG_OPS):
            return "trig"
        return "custom"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ops"] = list(self.ops)
        d["domain"] = list(self.domain)
        return d


@dataclass
class CorpusEntry:
    expr: Expr
    X: np.ndarray
    y: np.ndarray
    family: str
    D: int
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        samples = [[[float(v) for v in row], float(t)] for row, t in zip(self.X, self.y)]
        rec = {
            "expr_prefix": to_prefix(self.expr),
            "samples": samples,
            "family": self.family,
            "D": self.D,
            "seed": self.seed,
        }
        return json.dumps(rec, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "CorpusEntry":
        from .expr import from_prefix

        rec = json.loads(line)
        D = int(rec["D"])
        X = np.array([s[0] for s in rec["samples"]], dtype=np.float64).reshape(-1, D)
        y = np.array([s[1] for s in rec["samples"]], dtype=np.float64)
        return cls(from_prefix(rec["expr_prefix"]), X, y, rec["family"], D, rec.get("seed", 0))


def _leaf_probs(cfg: GenConfig) -> tuple[float, float]:
    """Leaf probabilities (root, below root) for an expected size of ~60% of the cap.

    Below the root, growth is a Galton-Watson process with expected offspring
    ``(1 - q) * b`` where ``b = u + 2 (1 - u)``, so a subtree has expected size
    ``1 / (1 - (1 - q) b)``. The root is an operator whenever the cap allows.
    """
    target = max(1.0, 0.6 * cfg.max_tokens)
    has_unary = any(op not in BINARY_OPS for op in cfg.ops)
    has_binary = any(op in BINARY_OPS for op in cfg.ops)
    if cfg.max_tokens < 2 or not (has_unary or has_binary):
        return 1.0, 1.0
    u = cfg.unary_share if (has_unary and has_binary) else (1.0 if has_unary else 0.0)
    branching = u + 2.0 * (1.0 - u)
    subtree = max(1.0, (target - 1.0) / branching)
    q = 1.0 - (1.0 - 1.0 / subtree) / branching
    return 0.0, min(1.0, max(0.05, q))


def _grow(cfg: GenConfig, rng: np.random.Generator, qs: tuple[float, float], depth: int, budget: list[int]) -> Expr:
    # budget[0] counts remaining nodes; growth stops early once it is spent
    budget[0] -= 1
    unary = [op for op in cfg.ops if op not in BINARY_OPS]
    binary = [op for op in cfg.ops if op in BINARY_OPS]
    q = qs[0] if depth == 0 else qs[1]
    if budget[0] <= 0 or rng.random() < q:
        if rng.random() < cfg.const_prob:
            magnitude = 10 ** rng.uniform(-1.0, 1.0)
            sign = 1.0 if rng.random() < 0.5 else -1.0
            return const(round_sig4(sign * magnitude))
        return var(int(rng.integers(cfg.max_vars)))
    use_unary = bool(unary) and (not binary or rng.random() < cfg.unary_share)
    if use_unary:
        op = unary[int(rng.integers(len(unary)))]
        return Expr(op, (_grow(cfg, rng, qs, depth + 1, budget),))
    op = binary[int(rng.integers(len(binary)))]
    a = _grow(cfg, rng, qs, depth + 1, budget)
    b = _grow(cfg, rng, qs, depth + 1, budget)
    return Expr(op, (a, b))


def _acceptable(e: Expr, cfg: GenConfig) -> bool:
    if complexity(e) > cfg.max_tokens:
        return False
    vs = variables(e)
    if not vs or max(vs) >= cfg.max_vars:
        return False
    if not operators(e) <= set(cfg.ops):
        return False
    if cfg.family is not None and not operators(e) & set(FAMILY_OPS[cfg.family]):
        return False
    return True


def sample_expression(cfg: GenConfig, rng: np.random.Generator) -> Expr:
    """Draw a random expression within the token cap and variable bound."""
    qs = _leaf_probs(cfg)
    for _ in range(MAX_EXPR_REJECTIONS):
        e = _grow(cfg, rng, qs, 0, [cfg.max_tokens + 1])
        if _acceptable(e, cfg):
            return e
    raise GenerationTimeout(f"no acceptable expression after {MAX_EXPR_REJECTIONS} draws")


def needs_positive_domain(e: Expr) -> bool:
    """True when some log takes a variable-dependent argument."""
    return any(n.op == "log" and variables(n) for n in walk(e))


def sample_dataset(
    e: Expr, cfg: GenConfig, rng: np.random.Generator, n_vars: int | None = None, m: int | None = None
):
    """``m`` points ``(X, y)`` with X uniform in the domain and every y finite.

    Points where the expression is undefined, or whose values cannot be
    tokenized, are rejected. When some log
    depends on the inputs, the domain's lower bound is raised to zero.
    """
    m = cfg.m if m is None else m
    vs = variables(e)
    D = n_vars if n_vars is not None else (max(vs) + 1 if vs else 1)
    lo, hi = cfg.domain
    positive = needs_positive_domain(e) and hi > 0
    X_parts, y_parts = [], []
    have = tried = 0
    max_tries = int(np.ceil(m / MIN_ACCEPT_RATE))
    while have < m:
        if tried >= max_tries:
            raise GenerationTimeout(f"acceptance below {MIN_ACCEPT_RATE:.0%} for {e}")
        batch = min(max(2 * (m - have), 16), max_tries - tried)
        if positive:
            X = hi - rng.uniform(0.0, hi - max(lo, 0.0), size=(batch, D))
        else:
            X = rng.uniform(lo, hi, size=(batch, D))
        tried += batch
        y, ok = evaluate_masked(e, X)
        ok &= representable(y) & representable(X).all(axis=1)
        X_parts.append(X[ok])
        y_parts.append(y[ok])
        have += int(ok.sum())
    return np.concatenate(X_parts)[:m], np.concatenate(y_parts)[:m]


def add_noise(ys, level: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise scaled by ``level`` times the sample std of ``ys``."""
    ys = np.asarray(ys, dtype=np.float64)
    if level < 0:
        raise ValueError("noise level must be >= 0")
    if level == 0 or ys.size < 2:
        return ys.copy()
    sd = float(np.std(ys, ddof=1))
    if sd == 0.0:
        return ys.copy()
    return ys + level * sd * rng.standard_normal(ys.shape)


def entry_rng(seed: int, index: int, stream: str = "corpus") -> tuple[np.random.Generator, int]:
    """Independent generator for one corpus draw, plus its integer seed."""
    ss = np.random.SeedSequence([seed, index, stream_id(stream)])
    sub_seed = int(ss.generate_state(1, dtype=np.uint64)[0])
    return np.random.default_rng(sub_seed), sub_seed


def iter_corpus(cfg: GenConfig, count: int) -> Iterator[CorpusEntry]:
    """Unique entries, deduplicated by prefix string."""
    seen: set[str] = set()
    produced = 0
    attempt = 0
    max_attempts = 50 * count + 1000
    while produced < count:
        if attempt >= max_attempts:
            raise GenerationTimeout(f"only {produced} unique entries after {attempt} attempts")
        rng, sub_seed = entry_rng(cfg.seed, attempt)
        attempt += 1
        e = sample_expression(cfg, rng)
        key = prefix_text(e)
        if key in seen:
            continue
        D = max(variables(e)) + 1
        try:
            X, y = sample_dataset(e, cfg, rng, n_vars=D)
        except GenerationTimeout:
            continue
        seen.add(key)
        produced += 1
        yield CorpusEntry(e, X, y, cfg.tag, D, sub_seed)


def build_corpus(cfg: GenConfig, count: int, path: str | os.PathLike, header: dict | None = None) -> int:
    """Stream ``count`` entries to a JSON-lines file; returns the count.

    An optional ``header`` becomes a first line ``{"_header": ...}``. A
    partially written file is removed if generation fails.
    """
    tmp = f"{os.fspath(path)}.partial"
    try:
        with open(tmp, "w", encoding="utf-8") as fh:
            if header is not None:
                fh.write(json.dumps({"_header": header}, sort_keys=True, separators=(",", ":")) + "\n")
            for entry in iter_corpus(cfg, count):
                fh.write(entry.to_json() + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
    return count


def read_corpus_header(path: str | os.PathLike) -> dict | None:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if first.startswith('{"_header"'):
        return json.loads(first)["_header"]
    return None


def load_corpus(path: str | os.PathLike) -> list[CorpusEntry]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith('{"_header"'):
                entries.append(CorpusEntry.from_json(line))
    return entries
